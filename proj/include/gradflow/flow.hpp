#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gradflow/datasets.hpp"
#include "gradflow/rng.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {

enum class CouplingKind { convolutional, dense };
enum class LayerGrouping { per_tensor, per_sublayer };

struct FlowConfig {
    size_t blocks = 2;
    size_t steps_per_block = 4;
    size_t hidden_channels = 64;
    CouplingKind coupling_kind = CouplingKind::convolutional;
    size_t channels = 1, height = 8, width = 8;
    uint32_t quantization_levels = 256;
    double scale_clamp = 2.0; // s_max of the coupling clamp s_max*tanh(s/s_max)
    double logit_alpha = 0.05;
    Precision precision = Precision::f32;

    void validate() const;
    std::string canonical_json() const;
    static FlowConfig from_json_string(const std::string& s);
    uint64_t hash() const; // of the canonical JSON
};

// Named presets: glow-desk (desk-scale), glow-1ch, glow-3ch.
FlowConfig flow_preset(const std::string& name);

// One named parameter tensor; indices are contiguous and stable across
// save/load because they follow construction order.
struct LayerRef {
    size_t index = 0;
    std::string name;
    std::vector<size_t> shape;
};

struct LayerGroup {
    std::string name;
    std::vector<size_t> layer_indices;
};

struct LogProbResult {
    std::vector<double> per_sample_log_prob; // nats
    double total_log_prob = 0.0;             // sum over the batch
    Tensor latent;                           // (n, latent_dims)
    std::vector<Tensor> per_layer_gradients; // aligned with layers when requested
};

// ------------------------------------------------------------------
// Internal step wiring: every step is (actnorm, invertible mix, affine
// coupling); parameters live in the model's flat registry and steps hold
// indices into it.
struct ActNormStep {
    size_t logs_p = 0, bias_p = 0;
};
struct MixStep {
    size_t lower_p = 0, upper_p = 0, logs_p = 0;
    size_t perm_b = 0, sign_b = 0; // indices into perms / signs
};
struct CouplingStep {
    bool flip = false;
    std::vector<uint32_t> pass_idx, trans_idx; // channel partition
    size_t w1_p = 0, b1_p = 0, w2_p = 0, b2_p = 0, w3_p = 0, b3_p = 0;
    size_t k1 = 3, k2 = 1, k3 = 3; // kernel sizes (dense mode uses 1,1,1)
};
struct FlowStep {
    ActNormStep actnorm;
    MixStep mix;
    CouplingStep coupling;
};
struct BlockShape {
    size_t c = 0, h = 0, w = 0;
};

class FlowModel {
  public:
    FlowConfig config;
    std::vector<LayerRef> layers;
    std::vector<Tensor> params;              // aligned with layers
    std::vector<std::vector<size_t>> perms;  // mix row permutations (buffers)
    std::vector<std::vector<double>> signs;  // mix diagonal signs (buffers)
    std::vector<std::vector<FlowStep>> blocks;
    std::vector<BlockShape> block_shapes; // activation dims inside each block
    bool actnorm_ready = false;

    static FlowModel build(const FlowConfig& cfg, SeededRng rng);

    size_t layer_count() const { return layers.size(); }
    size_t param_count() const;
    const BlockShape& latent_shape() const { return block_shapes.back(); }
    size_t latent_dims() const;

    // Data-dependent scale/bias initialization on one batch (size >= 2).
    void actnorm_init(const ImageBatch& batch);

    // Exact log-density of the dequantized, logit-preprocessed input.
    // Requires batch.has_dequant().
    LogProbResult forward_log_prob(const ImageBatch& batch) const;

    // Same, plus gradients of the summed log-likelihood w.r.t. every
    // parameter tensor (reverse-mode); the model is not modified.
    LogProbResult log_prob_and_gradients(const ImageBatch& batch) const;

    // Latent -> image in [0,1] (continuous; quantized view filled too).
    ImageBatch inverse(const Tensor& latent, double temperature) const;

    Tensor sample_latent(size_t n, SeededRng& rng) const;

    std::vector<LayerGroup> layer_groups(LayerGrouping g) const;

    // Captures each actnorm's output on a batch (introspection for tests).
    std::vector<Tensor> trace_actnorm_outputs(const ImageBatch& batch) const;

    void round_params_to_precision();
};

// BPD = -log_prob/(dims*ln 2) + log2(levels).
double bpd(double log_prob_nats, size_t dims, uint32_t levels);

// Grid of single-channel images as binary PGM (P5).
void write_pgm_grid(const ImageBatch& batch, size_t cols, const std::string& path);

} // namespace gradflow
