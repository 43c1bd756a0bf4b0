#include "gradflow/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gradflow/error.hpp"

namespace gradflow {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order and assume little-endian");

void TrainConfig::validate() const {
    check(batch_size >= 1, ErrorKind::config, "train config: batch_size must be >= 1");
    check(epochs >= 1, ErrorKind::config, "train config: epochs must be >= 1");
    check(learning_rate >= 0.0, ErrorKind::config, "train config: negative learning rate");
    check(weight_decay >= 0.0, ErrorKind::config, "train config: negative weight decay");
    check(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0,
          ErrorKind::config, "train config: adam betas must lie in [0,1)");
    check(adam.eps > 0.0, ErrorKind::config, "train config: adam eps must be positive");
    for (size_t e : checkpoint_epochs)
        check(e >= 1 && e <= epochs, ErrorKind::config,
              "train config: checkpoint epoch " + std::to_string(e) + " outside [1, epochs]");
    if (grad_clip_norm)
        check(*grad_clip_norm > 0.0, ErrorKind::config,
              "train config: grad_clip_norm must be positive");
}

std::vector<size_t> TrainConfig::resolved_checkpoint_epochs() const {
    std::vector<size_t> out;
    if (checkpoint_epochs.empty()) {
        for (size_t e : {1, 10, 20, 30, 40, 50, 70, 80, 100, 150})
            if (e <= epochs) out.push_back(e);
    } else {
        out = checkpoint_epochs;
    }
    out.push_back(epochs); // final epoch always checkpointed
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

TrainConfig train_preset(const std::string& name) {
    TrainConfig t;
    if (name == "glow-desk") {
        t.batch_size = 64;
        t.learning_rate = 1e-3;
        t.epochs = 10;
    } else if (name == "glow-3ch") {
        t.batch_size = 64;
        t.learning_rate = 5e-4;
        t.epochs = 250;
    } else if (name == "glow-1ch") {
        t.batch_size = 128;
        t.learning_rate = 1e-3;
        t.weight_decay = 1e-4;
        t.epochs = 200;
    } else {
        fail(ErrorKind::config, "unknown train preset: " + name);
    }
    return t;
}

OptimizerState OptimizerState::zeros_like(const std::vector<Tensor>& params) {
    OptimizerState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
        s.m.push_back(Tensor::zeros(p.shape, p.prec));
        s.v.push_back(Tensor::zeros(p.shape, p.prec));
    }
    return s;
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               OptimizerState& state, double learning_rate, double weight_decay,
               const AdamParams& adam) {
    check(params.size() == grads.size() && params.size() == state.m.size() &&
              params.size() == state.v.size(),
          ErrorKind::shape, "adam_step: parameter/gradient/state registries differ in length");
    state.step += 1;
    const double t = double(state.step);
    const double bc1 = 1.0 - std::pow(adam.beta1, t);
    const double bc2 = 1.0 - std::pow(adam.beta2, t);
    const double decay = 1.0 - learning_rate * weight_decay;
    for (size_t i = 0; i < params.size(); ++i) {
        check(params[i].same_shape(grads[i]), ErrorKind::shape,
              "adam_step: gradient shape mismatch at tensor " + std::to_string(i));
        Tensor& p = params[i];
        const Tensor& g = grads[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (size_t j = 0; j < p.size(); ++j) {
            p[j] *= decay;
            m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * g[j];
            v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= learning_rate * mhat / (std::sqrt(vhat) + adam.eps);
        }
    }
}

// ------------------------------------------------------------------
// Checkpoint file format

namespace {

constexpr char kMagic[4] = {'G', 'F', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void append_blob(std::string& out, const Tensor& t) {
    if (t.prec == Precision::f32) {
        for (double v : t.data) {
            const float f = float(v);
            out.append(reinterpret_cast<const char*>(&f), 4);
        }
    } else {
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 8);
    }
}

void read_blob(const std::string& bytes, size_t& off, Tensor& t) {
    const size_t width = t.prec == Precision::f32 ? 4 : 8;
    const size_t need = t.size() * width;
    check(off + need <= bytes.size(), ErrorKind::format,
          "checkpoint truncated at byte offset " + std::to_string(bytes.size()) +
              " (blob expected to end at " + std::to_string(off + need) + ")");
    if (t.prec == Precision::f32) {
        for (size_t i = 0; i < t.size(); ++i) {
            float f;
            std::memcpy(&f, bytes.data() + off + i * 4, 4);
            t[i] = double(f);
        }
    } else {
        std::memcpy(t.data.data(), bytes.data() + off, need);
    }
    off += need;
}

std::string param_bytes(const std::vector<Tensor>& params) {
    std::string out;
    for (const auto& p : params) append_blob(out, p);
    return out;
}

} // namespace

std::string Checkpoint::id() const {
    const std::string cfg = model.config.canonical_json();
    uint64_t h = fnv1a64(cfg);
    const uint64_t e = epoch;
    h = fnv1a64(&e, sizeof e, h);
    const std::string blob = param_bytes(model.params);
    h = fnv1a64(blob.data(), blob.size(), h);
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    json header;
    header["version"] = kVersion;
    header["config"] = json::parse(c.model.config.canonical_json());
    header["epoch"] = c.epoch;
    json layers = json::array();
    for (const auto& l : c.model.layers) layers.push_back({{"name", l.name}, {"shape", l.shape}});
    header["layers"] = std::move(layers);
    header["rng_state"] = {{"seed", c.train_seed}, {"next_epoch", c.epoch + 1}};
    header["loss_history"] = c.loss_history;
    header["precision"] = precision_name(c.model.config.precision);
    header["adam_step"] = c.opt.step;
    header["actnorm_initialized"] = c.model.actnorm_ready;
    char hashbuf[24];
    std::snprintf(hashbuf, sizeof hashbuf, "%016llx",
                  static_cast<unsigned long long>(c.model.config.hash()));
    header["config_hash"] = hashbuf;
    header["buffers"] = {{"perms", c.model.perms}, {"signs", c.model.signs}};
    const std::string head = header.dump();

    std::string body;
    for (const auto& p : c.model.params) append_blob(body, p);
    for (const auto& m : c.opt.m) append_blob(body, m);
    for (const auto& v : c.opt.v) append_blob(body, v);

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        check(f.good(), ErrorKind::io, "save_checkpoint: cannot open " + tmp);
        f.write(kMagic, 4);
        const uint32_t ver = kVersion;
        const uint32_t hlen = uint32_t(head.size());
        f.write(reinterpret_cast<const char*>(&ver), 4);
        f.write(reinterpret_cast<const char*>(&hlen), 4);
        f.write(head.data(), std::streamsize(head.size()));
        f.write(body.data(), std::streamsize(body.size()));
        check(f.good(), ErrorKind::io, "save_checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), ErrorKind::io, "load_checkpoint: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    check(bytes.size() >= 12, ErrorKind::format,
          "checkpoint truncated at byte offset " + std::to_string(bytes.size()) +
              " (12-byte preamble expected)");
    check(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::format,
          "bad checkpoint magic at byte offset 0");
    uint32_t ver, hlen;
    std::memcpy(&ver, bytes.data() + 4, 4);
    std::memcpy(&hlen, bytes.data() + 8, 4);
    check(ver == kVersion, ErrorKind::format,
          "unsupported checkpoint version " + std::to_string(ver) + " at byte offset 4");
    check(12 + size_t(hlen) <= bytes.size(), ErrorKind::format,
          "checkpoint truncated at byte offset " + std::to_string(bytes.size()) +
              " (header expected to end at " + std::to_string(12 + size_t(hlen)) + ")");

    json header = json::parse(bytes.substr(12, hlen), nullptr, false);
    check(!header.is_discarded(), ErrorKind::format,
          "checkpoint header is not valid JSON (starts at byte offset 12)");

    Checkpoint c;
    try {
        const FlowConfig cfg = FlowConfig::from_json_string(header.at("config").dump());
        c.model = FlowModel::build(cfg, SeededRng(0, 0));
        c.epoch = header.at("epoch").get<size_t>();
        c.train_seed = header.at("rng_state").at("seed").get<uint64_t>();
        c.loss_history = header.at("loss_history").get<std::vector<double>>();
        c.model.actnorm_ready = header.at("actnorm_initialized").get<bool>();
        c.opt.step = header.at("adam_step").get<uint64_t>();
        c.model.perms = header.at("buffers").at("perms").get<std::vector<std::vector<size_t>>>();
        c.model.signs = header.at("buffers").at("signs").get<std::vector<std::vector<double>>>();

        const auto& layers = header.at("layers");
        check(layers.size() == c.model.layers.size(), ErrorKind::format,
              "checkpoint header declares " + std::to_string(layers.size()) +
                  " layers but the config builds " + std::to_string(c.model.layers.size()));
        for (size_t i = 0; i < c.model.layers.size(); ++i) {
            check(layers[i].at("name").get<std::string>() == c.model.layers[i].name &&
                      layers[i].at("shape").get<std::vector<size_t>>() ==
                          c.model.layers[i].shape,
                  ErrorKind::format,
                  "checkpoint header layer " + std::to_string(i) +
                      " does not match the configured architecture");
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("checkpoint header: missing or bad field: ") + e.what());
    }

    const size_t width = c.model.config.precision == Precision::f32 ? 4 : 8;
    const size_t expected = 12 + size_t(hlen) + 3 * c.model.param_count() * width;
    check(bytes.size() == expected, ErrorKind::format,
          "checkpoint blob length mismatch: header-declared shapes need " +
              std::to_string(expected) + " bytes, file ends at byte offset " +
              std::to_string(bytes.size()));

    size_t off = 12 + hlen;
    for (auto& p : c.model.params) read_blob(bytes, off, p);
    c.opt = OptimizerState::zeros_like(c.model.params);
    c.opt.step = header["adam_step"].get<uint64_t>();
    for (auto& m : c.opt.m) read_blob(bytes, off, m);
    for (auto& v : c.opt.v) read_blob(bytes, off, v);
    return c;
}

// ------------------------------------------------------------------
// Training loop

namespace {

TrainResult run_epochs(FlowModel model, OptimizerState opt, size_t start_epoch,
                       std::vector<double> history, const DatasetHandle& data,
                       const TrainConfig& cfg, const CheckpointSink& on_checkpoint) {
    cfg.validate();
    check(data.size() >= 1, ErrorKind::insufficient_data, "train: empty dataset");
    check(cfg.epochs > start_epoch, ErrorKind::config,
          "train: target epochs must exceed the starting epoch");

    const auto ckpt_epochs = cfg.resolved_checkpoint_epochs();
    const size_t dims = model.config.channels * model.config.height * model.config.width;
    const uint32_t levels = model.config.quantization_levels;
    SeededRng base(cfg.seed, 0);

    TrainResult result;
    result.bpd_history = history;

    auto abort_with = [&](size_t epoch, size_t batch_index, const std::string& why) {
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "numeric failure at epoch %zu batch %zu: %s; last good checkpoint retained",
                      epoch, batch_index, why.c_str());
        result.status = TrainStatus::numeric_failure;
        result.failure_report = buf;
        return result;
    };

    for (size_t epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<uint64_t> order = data.indices;
        {
            SeededRng shuffle_rng = base.derive("train.shuffle", epoch);
            shuffle_rng.shuffle(order);
        }

        double lp_sum_bpd = 0.0;
        size_t seen = 0;
        const size_t n_batches = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
        for (size_t bi = 0; bi < n_batches; ++bi) {
            const size_t lo = bi * cfg.batch_size;
            const size_t hi = std::min(order.size(), lo + cfg.batch_size);
            std::span<const uint64_t> slice(order.data() + lo, hi - lo);
            ImageBatch batch = data.source->materialize(slice);
            dequantize(batch, base.derive("train.dequant", (uint64_t(epoch) << 32) | bi),
                       model.config.precision);

            if (!model.actnorm_ready) model.actnorm_init(batch);

            LogProbResult res;
            try {
                res = model.log_prob_and_gradients(batch);
            } catch (const Error& e) {
                if (e.kind() == ErrorKind::numeric) return abort_with(epoch, bi, e.what());
                throw;
            }
            if (!std::isfinite(res.total_log_prob))
                return abort_with(epoch, bi, "non-finite log-likelihood");

            // loss = -mean log-likelihood
            const double scale = -1.0 / double(batch.n);
            double sq_norm = 0.0;
            for (auto& g : res.per_layer_gradients)
                for (double& v : g.data) {
                    v *= scale;
                    sq_norm += v * v;
                }
            if (!std::isfinite(sq_norm)) return abort_with(epoch, bi, "non-finite gradient");
            if (cfg.grad_clip_norm) {
                const double norm = std::sqrt(sq_norm);
                if (norm > *cfg.grad_clip_norm) {
                    const double s = *cfg.grad_clip_norm / norm;
                    for (auto& g : res.per_layer_gradients)
                        for (double& v : g.data) v *= s;
                }
            }

            adam_step(model.params, res.per_layer_gradients, opt, cfg.learning_rate,
                      cfg.weight_decay, cfg.adam);
            model.round_params_to_precision();
            for (auto& m : opt.m) m.round_to_precision();
            for (auto& v : opt.v) v.round_to_precision();

            for (double lp : res.per_sample_log_prob) lp_sum_bpd += bpd(lp, dims, levels);
            seen += batch.n;
        }

        result.bpd_history.push_back(lp_sum_bpd / double(seen));

        if (std::find(ckpt_epochs.begin(), ckpt_epochs.end(), epoch) != ckpt_epochs.end()) {
            Checkpoint c;
            c.epoch = epoch;
            c.model = model;
            c.opt = opt;
            c.train_seed = cfg.seed;
            c.loss_history = result.bpd_history;
            if (on_checkpoint) on_checkpoint(c);
            result.checkpoints.push_back(std::move(c));
        }
    }
    return result;
}

} // namespace

TrainResult train(FlowModel model, const DatasetHandle& data, const TrainConfig& cfg,
                  const CheckpointSink& on_checkpoint) {
    OptimizerState opt = OptimizerState::zeros_like(model.params);
    return run_epochs(std::move(model), std::move(opt), 0, {}, data, cfg, on_checkpoint);
}

TrainResult resume(const Checkpoint& from, const DatasetHandle& data, const TrainConfig& cfg,
                   const CheckpointSink& on_checkpoint) {
    check(cfg.seed == from.train_seed, ErrorKind::consistency,
          "resume: config seed differs from the checkpoint's training seed");
    return run_epochs(from.model, from.opt, from.epoch, from.loss_history, data, cfg,
                      on_checkpoint);
}

} // namespace gradflow
