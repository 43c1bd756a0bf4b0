#include "gradflow/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "gradflow/error.hpp"

namespace gradflow {

void ImageBatch::validate() const {
    check(n >= 1, ErrorKind::invalid_argument, "image batch must hold at least one image");
    check(levels >= 2 && levels <= 256, ErrorKind::invalid_argument,
          "quantization levels must lie in [2,256]");
    check(pixels.size() == pixel_count(), ErrorKind::shape,
          "pixel buffer size does not match batch shape");
    check(sample_ids.empty() || sample_ids.size() == n, ErrorKind::shape,
          "sample_ids length must equal batch size");
    for (uint8_t p : pixels)
        check(p < levels, ErrorKind::domain, "pixel value exceeds levels-1");
}

void dequantize(ImageBatch& batch, SeededRng rng, Precision prec) {
    batch.validate();
    const double inv_s = 1.0 / double(batch.levels);
    batch.dequant.resize(batch.pixel_count());
    for (size_t i = 0; i < batch.pixels.size(); ++i) {
        double x = (double(batch.pixels[i]) + rng.uniform01()) * inv_s;
        if (prec == Precision::f32) x = double(float(x));
        batch.dequant[i] = x;
    }
}

// ------------------------------------------------------------------

const char* synth_family_name(SynthFamily f) {
    switch (f) {
        case SynthFamily::flat_blob: return "flat-blob";
        case SynthFamily::correlated_field: return "correlated-field";
        case SynthFamily::white_noise: return "white-noise";
    }
    return "?";
}

void SyntheticSpec::validate() const {
    check(channels >= 1 && height >= 1 && width >= 1, ErrorKind::config,
          "synthetic spec: image shape extents must be positive");
    check(levels >= 2 && levels <= 256, ErrorKind::config,
          "synthetic spec: levels must lie in [2,256]");
    if (family == SynthFamily::correlated_field)
        check(corr_length > 0.0 && corr_length <= double(std::max(height, width)),
              ErrorKind::config,
              "synthetic spec: corr_length must lie in (0, max(height,width)]");
    if (family == SynthFamily::flat_blob)
        check(blob_noise_sigma >= 0.0 && blob_noise_sigma <= double(levels),
              ErrorKind::config,
              "synthetic spec: blob_noise_sigma must lie in [0, levels]");
}

std::string SyntheticSpec::tag() const {
    std::string t = std::string("synthetic:") + synth_family_name(family);
    char buf[64];
    std::snprintf(buf, sizeof buf, ":%zux%zux%zu", channels, height, width);
    t += buf;
    if (family == SynthFamily::correlated_field) {
        std::snprintf(buf, sizeof buf, ":l=%g", corr_length);
        t += buf;
    }
    return t;
}

namespace {

uint8_t quantize_clamped(double v, uint32_t levels) {
    long q = std::lround(v);
    if (q < 0) q = 0;
    if (q > long(levels) - 1) q = long(levels) - 1;
    return uint8_t(q);
}

// Writes one image's pixels; pure in (spec, index, seed).
void synth_image(const SyntheticSpec& spec, uint64_t index, uint64_t seed, uint8_t* out) {
    SeededRng rng(seed, fnv1a64(spec.tag()) ^ index);
    const size_t hw = spec.height * spec.width;
    switch (spec.family) {
        case SynthFamily::flat_blob: {
            const double gray = double(rng.uniform_below(spec.levels));
            for (size_t i = 0; i < spec.channels * hw; ++i)
                out[i] = quantize_clamped(gray + rng.normal() * spec.blob_noise_sigma,
                                          spec.levels);
            break;
        }
        case SynthFamily::white_noise: {
            for (size_t i = 0; i < spec.channels * hw; ++i)
                out[i] = uint8_t(rng.uniform_below(spec.levels));
            break;
        }
        case SynthFamily::correlated_field: {
            // Smooth a unit white field with a wrap-around Gaussian kernel,
            // L2-normalized so the output stays unit variance, then map to
            // mean levels/2, std levels/6.
            const double ell = spec.corr_length;
            const int radius = std::max(1, int(std::ceil(3.0 * ell)));
            std::vector<double> kernel(2 * radius + 1);
            double l2 = 0.0;
            for (int d = -radius; d <= radius; ++d) {
                const double w = std::exp(-0.5 * double(d) * double(d) / (ell * ell));
                kernel[size_t(d + radius)] = w;
                l2 += w * w;
            }
            l2 = std::sqrt(l2);
            for (double& w : kernel) w /= l2;

            const int H = int(spec.height), W = int(spec.width);
            std::vector<double> noise(hw), rows(hw), field(hw);
            for (size_t c = 0; c < spec.channels; ++c) {
                for (auto& v : noise) v = rng.normal();
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        double acc = 0.0;
                        for (int d = -radius; d <= radius; ++d)
                            acc += kernel[size_t(d + radius)] *
                                   noise[size_t(i) * W + size_t(((j + d) % W + W) % W)];
                        rows[size_t(i) * W + size_t(j)] = acc;
                    }
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        double acc = 0.0;
                        for (int d = -radius; d <= radius; ++d)
                            acc += kernel[size_t(d + radius)] *
                                   rows[size_t(((i + d) % H + H) % H) * W + size_t(j)];
                        field[size_t(i) * W + size_t(j)] = acc;
                    }
                const double mid = 0.5 * double(spec.levels);
                const double scale = double(spec.levels) / 6.0;
                for (size_t i = 0; i < hw; ++i)
                    out[c * hw + i] = quantize_clamped(mid + field[i] * scale, spec.levels);
            }
            break;
        }
    }
}

} // namespace

ImageBatch synth_generate(const SyntheticSpec& spec, size_t n, uint64_t seed) {
    spec.validate();
    check(n >= 1, ErrorKind::invalid_argument, "synth_generate: n must be >= 1");
    ImageBatch b;
    b.n = n;
    b.channels = spec.channels;
    b.height = spec.height;
    b.width = spec.width;
    b.levels = spec.levels;
    b.source_tag = spec.tag();
    b.pixels.resize(b.pixel_count());
    b.sample_ids.resize(n);
    for (size_t i = 0; i < n; ++i) {
        b.sample_ids[i] = i;
        synth_image(spec, i, seed, b.pixels.data() + i * b.dims());
    }
    return b;
}

// ------------------------------------------------------------------

ImageBatch DataSource::materialize(std::span<const uint64_t> indices) const {
    check(!indices.empty(), ErrorKind::invalid_argument, "materialize: empty index list");
    ImageBatch b;
    if (synth) {
        b.channels = synth->channels;
        b.height = synth->height;
        b.width = synth->width;
        b.levels = synth->levels;
    } else {
        b.channels = loaded.channels;
        b.height = loaded.height;
        b.width = loaded.width;
        b.levels = loaded.levels;
    }
    b.n = indices.size();
    b.source_tag = name;
    b.pixels.resize(b.pixel_count());
    b.sample_ids.assign(indices.begin(), indices.end());
    for (size_t i = 0; i < indices.size(); ++i) {
        const uint64_t idx = indices[i];
        check(idx < length, ErrorKind::invalid_argument,
              "materialize: index " + std::to_string(idx) + " out of range");
        if (synth) {
            synth_image(*synth, idx, seed, b.pixels.data() + i * b.dims());
        } else {
            std::memcpy(b.pixels.data() + i * b.dims(),
                        loaded.pixels.data() + idx * loaded.dims(), b.dims());
        }
    }
    return b;
}

std::shared_ptr<const DataSource> DataSource::from_idx(const std::string& path) {
    auto src = std::make_shared<DataSource>();
    src->loaded = load_idx(path);
    src->length = src->loaded.n;
    src->name = "idx:" + path;
    return src;
}

std::shared_ptr<const DataSource> DataSource::from_synth(const SyntheticSpec& spec,
                                                         size_t n, uint64_t seed) {
    spec.validate();
    check(n >= 1, ErrorKind::config, "synthetic source: n must be >= 1");
    auto src = std::make_shared<DataSource>();
    src->synth = spec;
    src->length = n;
    src->seed = seed;
    src->name = spec.tag();
    return src;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::fit: return "fit";
        case Split::test: return "test";
    }
    return "?";
}

SplitSet make_splits(std::shared_ptr<const DataSource> source,
                     const std::array<double, 3>& fractions, uint64_t seed) {
    check(source != nullptr && source->length >= 1, ErrorKind::config,
          "make_splits: empty source");
    double sum = 0.0;
    for (double f : fractions) {
        check(f >= 0.0, ErrorKind::config, "make_splits: negative fraction");
        sum += f;
    }
    check(std::abs(sum - 1.0) <= 1e-6, ErrorKind::config,
          "make_splits: fractions must sum to 1");

    const size_t total = source->length;
    std::vector<uint64_t> perm(total);
    for (size_t i = 0; i < total; ++i) perm[i] = i;
    SeededRng rng(seed, fnv1a64("splits"));
    rng.shuffle(perm);

    const size_t n_train = size_t(std::floor(fractions[0] * double(total)));
    const size_t n_fit = size_t(std::floor(fractions[1] * double(total)));
    check(n_train + n_fit <= total, ErrorKind::config, "make_splits: fractions overflow");
    const size_t n_test = total - n_train - n_fit;
    check(n_train >= 1 && n_fit >= 1 && n_test >= 1, ErrorKind::config,
          "make_splits: every split must be non-empty");

    SplitSet out;
    auto fill = [&](DatasetHandle& h, Split s, size_t begin, size_t count) {
        h.source = source;
        h.split = s;
        h.seed = seed;
        h.indices.assign(perm.begin() + long(begin), perm.begin() + long(begin + count));
    };
    fill(out.train, Split::train, 0, n_train);
    fill(out.fit, Split::fit, n_train, n_fit);
    fill(out.test, Split::test, n_train + n_fit, n_test);
    return out;
}

ImageBatch sample_eval_set(const DatasetHandle& split, size_t n, uint64_t seed) {
    check(n >= 1, ErrorKind::invalid_argument, "sample_eval_set: n must be >= 1");
    check(split.size() >= n, ErrorKind::insufficient_data,
          "sample_eval_set: requested " + std::to_string(n) + " samples from a split of " +
              std::to_string(split.size()));
    std::vector<uint64_t> pool = split.indices;
    SeededRng rng(seed, fnv1a64("eval-sample"));
    for (size_t i = 0; i < n; ++i) {
        const size_t j = i + size_t(rng.uniform_below(pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(n);
    return split.source->materialize(pool);
}

// ------------------------------------------------------------------

namespace {

uint32_t read_be_u32(const unsigned char* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) |
           uint32_t(p[3]);
}

void write_be_u32(std::ofstream& f, uint32_t v) {
    const unsigned char b[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8),
                                uint8_t(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

} // namespace

ImageBatch load_idx(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), ErrorKind::io, "load_idx: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());

    check(bytes.size() >= 4, ErrorKind::format,
          "load_idx: truncated header at byte offset " + std::to_string(bytes.size()));
    const uint32_t magic = read_be_u32(bytes.data());
    if (magic != 0x00000803u) {
        char buf[96];
        std::snprintf(buf, sizeof buf,
                      "load_idx: bad magic 0x%08x at byte offset 0 (expected 0x00000803)",
                      magic);
        fail(ErrorKind::format, buf);
    }
    check(bytes.size() >= 16, ErrorKind::format,
          "load_idx: truncated dimensions at byte offset " + std::to_string(bytes.size()));
    const uint32_t n = read_be_u32(bytes.data() + 4);
    const uint32_t h = read_be_u32(bytes.data() + 8);
    const uint32_t w = read_be_u32(bytes.data() + 12);
    const size_t expected = 16 + size_t(n) * h * w;
    if (bytes.size() != expected) {
        fail(ErrorKind::format,
             "load_idx: expected " + std::to_string(expected) + " bytes, file ends at byte offset " +
                 std::to_string(bytes.size()));
    }
    check(n >= 1 && h >= 1 && w >= 1, ErrorKind::format, "load_idx: zero dimension");

    ImageBatch b;
    b.n = n;
    b.channels = 1;
    b.height = h;
    b.width = w;
    b.levels = 256;
    b.source_tag = "idx:" + path;
    b.pixels.assign(bytes.begin() + 16, bytes.end());
    b.sample_ids.resize(n);
    for (size_t i = 0; i < n; ++i) b.sample_ids[i] = i;
    return b;
}

void write_idx(const ImageBatch& batch, const std::string& path) {
    batch.validate();
    check(batch.channels == 1, ErrorKind::invalid_argument,
          "write_idx: only single-channel batches");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), ErrorKind::io, "write_idx: cannot open " + path);
    write_be_u32(f, 0x00000803u);
    write_be_u32(f, uint32_t(batch.n));
    write_be_u32(f, uint32_t(batch.height));
    write_be_u32(f, uint32_t(batch.width));
    f.write(reinterpret_cast<const char*>(batch.pixels.data()),
            std::streamsize(batch.pixels.size()));
    check(f.good(), ErrorKind::io, "write_idx: write failed for " + path);
}

void export_raw(const ImageBatch& batch, const std::string& path) {
    batch.validate();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), ErrorKind::io, "export_raw: cannot open " + path);
    f.write(reinterpret_cast<const char*>(batch.pixels.data()),
            std::streamsize(batch.pixels.size()));
    check(f.good(), ErrorKind::io, "export_raw: write failed for " + path);

    std::ofstream side(path + ".json", std::ios::trunc);
    check(side.good(), ErrorKind::io, "export_raw: cannot open sidecar for " + path);
    char line[160];
    std::snprintf(line, sizeof line,
                  "{\"shape\":[%zu,%zu,%zu,%zu],\"levels\":%u,\"dtype\":\"u8\"}\n",
                  batch.n, batch.channels, batch.height, batch.width, batch.levels);
    side << line;
}

} // namespace gradflow
