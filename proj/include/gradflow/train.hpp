#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gradflow/datasets.hpp"
#include "gradflow/flow.hpp"

namespace gradflow {

struct AdamParams {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct TrainConfig {
    size_t batch_size = 64;
    double learning_rate = 1e-4;
    double weight_decay = 0.0;
    size_t epochs = 10;
    std::vector<size_t> checkpoint_epochs; // empty -> default sweep list
    uint64_t seed = 0;
    AdamParams adam;
    std::optional<double> grad_clip_norm = 50.0;

    void validate() const;
    // The sweep default {1,10,20,30,40,50,70,80,100,150} clipped to
    // [1, epochs]; the final epoch is always included.
    std::vector<size_t> resolved_checkpoint_epochs() const;
};

// Batch size / learning rate defaults that accompany each flow preset.
TrainConfig train_preset(const std::string& name);

struct OptimizerState {
    std::vector<Tensor> m, v; // shapes mirror the parameter registry
    uint64_t step = 0;

    static OptimizerState zeros_like(const std::vector<Tensor>& params);
};

// Decoupled weight decay, then a bias-corrected Adam update. `grads` is the
// gradient of the loss being minimized.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               OptimizerState& state, double learning_rate, double weight_decay,
               const AdamParams& adam);

struct Checkpoint {
    size_t epoch = 0;
    FlowModel model;
    OptimizerState opt;
    uint64_t train_seed = 0;
    std::vector<double> loss_history; // mean BPD per completed epoch

    // Content hash binding scoring statistics to one set of weights.
    std::string id() const;
};

// Binary format: "GFCK", version u32 LE, header-length u32 LE, JSON header,
// then raw little-endian blobs (params, Adam m, Adam v) in layer order at
// the model's precision. Round trip is bitwise exact.
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

enum class TrainStatus { ok, numeric_failure };

struct TrainResult {
    TrainStatus status = TrainStatus::ok;
    std::vector<Checkpoint> checkpoints;
    std::vector<double> bpd_history;
    std::string failure_report; // non-empty on numeric failure
};

using CheckpointSink = std::function<void(const Checkpoint&)>;

// Maximum-likelihood training with Adam; shuffles per epoch from the seed,
// initializes actnorm on the first batch, checkpoints at the configured
// epochs. A non-finite loss aborts with the last good checkpoint retained.
TrainResult train(FlowModel model, const DatasetHandle& data, const TrainConfig& cfg,
                  const CheckpointSink& on_checkpoint = nullptr);

// Continues a run loaded from a checkpoint up to `epochs` total epochs.
TrainResult resume(const Checkpoint& from, const DatasetHandle& data, const TrainConfig& cfg,
                   const CheckpointSink& on_checkpoint = nullptr);

} // namespace gradflow
