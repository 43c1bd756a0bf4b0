#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradflow/rng.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {

// Quantized image batch plus an optional dequantized float view in [0,1].
// `sample_ids` records each image's index in its source dataset so score
// rows stay traceable.
struct ImageBatch {
    size_t n = 0, channels = 0, height = 0, width = 0;
    uint32_t levels = 256;
    std::vector<uint8_t> pixels;   // n*channels*height*width, values < levels
    std::vector<double> dequant;   // empty until dequantize() fills it
    std::vector<uint64_t> sample_ids;
    std::string source_tag;

    size_t dims() const { return channels * height * width; }
    size_t pixel_count() const { return n * dims(); }
    bool has_dequant() const { return dequant.size() == pixel_count() && n > 0; }
    void validate() const;

    // View of sample i's quantized pixels.
    std::span<const uint8_t> sample(size_t i) const {
        return {pixels.data() + i * dims(), dims()};
    }
};

// x = (p + u)/S with u ~ U[0,1) from `rng`; fills the dequantized view.
// In f32 mode values are rounded through float.
void dequantize(ImageBatch& batch, SeededRng rng, Precision prec = Precision::f32);

// ------------------------------------------------------------------
// Synthetic families: desk-scale stand-ins spanning a complexity range.
enum class SynthFamily { flat_blob, correlated_field, white_noise };

const char* synth_family_name(SynthFamily f);

struct SyntheticSpec {
    SynthFamily family = SynthFamily::flat_blob;
    size_t channels = 1, height = 8, width = 8;
    uint32_t levels = 256;
    double corr_length = 2.0;      // correlated-field kernel width (pixels)
    double blob_noise_sigma = 4.0; // flat-blob noise, in quantization steps

    void validate() const;
    std::string tag() const;
};

// Pure function of (spec, index, seed): one image per index.
ImageBatch synth_generate(const SyntheticSpec& spec, size_t n, uint64_t seed);

// ------------------------------------------------------------------
// A data source is either a fully-loaded IDX file or a synthetic spec;
// both materialize arbitrary index subsets deterministically.
struct DataSource {
    std::optional<SyntheticSpec> synth;
    ImageBatch loaded; // idx-backed sources keep everything in memory
    size_t length = 0;
    uint64_t seed = 0;
    std::string name;

    ImageBatch materialize(std::span<const uint64_t> indices) const;

    static std::shared_ptr<const DataSource> from_idx(const std::string& path);
    static std::shared_ptr<const DataSource> from_synth(const SyntheticSpec& spec,
                                                        size_t n, uint64_t seed);
};

enum class Split { train, fit, test };

const char* split_name(Split s);

struct DatasetHandle {
    std::shared_ptr<const DataSource> source;
    Split split = Split::train;
    std::vector<uint64_t> indices; // disjoint across splits of one source
    uint64_t seed = 0;

    size_t size() const { return indices.size(); }
};

struct SplitSet {
    DatasetHandle train, fit, test;
};

// Seeded permutation partitioned by fractions (train, fit, test).
SplitSet make_splits(std::shared_ptr<const DataSource> source,
                     const std::array<double, 3>& fractions, uint64_t seed);

// Seeded sample of n items without replacement; order fixed by seed.
ImageBatch sample_eval_set(const DatasetHandle& split, size_t n, uint64_t seed);

// ------------------------------------------------------------------
// IDX image files (big-endian header, raw unsigned bytes).
ImageBatch load_idx(const std::string& path);
void write_idx(const ImageBatch& batch, const std::string& path);

// Raw export: little-endian u8 pixels plus a one-line JSON shape sidecar.
void export_raw(const ImageBatch& batch, const std::string& path);

} // namespace gradflow
