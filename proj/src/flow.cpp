#include "gradflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gradflow/error.hpp"
#include "gradflow/stats.hpp"

namespace gradflow {

using json = nlohmann::json;

// ------------------------------------------------------------------
// Config

void FlowConfig::validate() const {
    check(blocks >= 1 && steps_per_block >= 1 && hidden_channels >= 1, ErrorKind::config,
          "flow config: blocks, steps_per_block, hidden_channels must be >= 1");
    check(channels >= 1 && height >= 1 && width >= 1, ErrorKind::config,
          "flow config: image shape extents must be positive");
    check(channels * height * width >= 2, ErrorKind::config,
          "flow config: need at least 2 dimensions for coupling");
    check(quantization_levels >= 2 && quantization_levels <= 256, ErrorKind::config,
          "flow config: quantization_levels must lie in [2,256]");
    check(scale_clamp > 0.0, ErrorKind::config, "flow config: scale_clamp must be positive");
    check(logit_alpha > 0.0 && logit_alpha < 0.5, ErrorKind::config,
          "flow config: logit_alpha must lie in (0, 0.5)");
    if (coupling_kind == CouplingKind::dense) {
        check(blocks == 1, ErrorKind::config, "flow config: dense coupling requires blocks = 1");
    } else {
        const size_t div = size_t(1) << blocks;
        check(height % div == 0 && width % div == 0, ErrorKind::config,
              "flow config: height and width must be divisible by 2^blocks for squeezing");
    }
}

std::string FlowConfig::canonical_json() const {
    json j;
    j["blocks"] = blocks;
    j["steps_per_block"] = steps_per_block;
    j["hidden_channels"] = hidden_channels;
    j["coupling_kind"] = coupling_kind == CouplingKind::dense ? "dense" : "convolutional";
    j["channels"] = channels;
    j["height"] = height;
    j["width"] = width;
    j["quantization_levels"] = quantization_levels;
    j["scale_clamp"] = scale_clamp;
    j["logit_alpha"] = logit_alpha;
    j["precision"] = precision_name(precision);
    return j.dump();
}

FlowConfig FlowConfig::from_json_string(const std::string& s) {
    json j = json::parse(s, nullptr, false);
    check(!j.is_discarded(), ErrorKind::format, "flow config: invalid JSON");
    FlowConfig c;
    try {
        c.blocks = j.at("blocks").get<size_t>();
        c.steps_per_block = j.at("steps_per_block").get<size_t>();
        c.hidden_channels = j.at("hidden_channels").get<size_t>();
        c.coupling_kind = j.at("coupling_kind").get<std::string>() == "dense"
                              ? CouplingKind::dense
                              : CouplingKind::convolutional;
        c.channels = j.at("channels").get<size_t>();
        c.height = j.at("height").get<size_t>();
        c.width = j.at("width").get<size_t>();
        c.quantization_levels = j.at("quantization_levels").get<uint32_t>();
        c.scale_clamp = j.at("scale_clamp").get<double>();
        c.logit_alpha = j.at("logit_alpha").get<double>();
        c.precision = precision_from_name(j.at("precision").get<std::string>());
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("flow config: missing or bad field: ") + e.what());
    }
    c.validate();
    return c;
}

uint64_t FlowConfig::hash() const { return fnv1a64(canonical_json()); }

FlowConfig flow_preset(const std::string& name) {
    FlowConfig c;
    if (name == "glow-desk") {
        c.blocks = 2;
        c.steps_per_block = 4;
        c.hidden_channels = 64;
        c.coupling_kind = CouplingKind::convolutional;
        c.channels = 1;
        c.height = 8;
        c.width = 8;
    } else if (name == "glow-3ch") {
        c.blocks = 3;
        c.steps_per_block = 32;
        c.hidden_channels = 512;
        c.coupling_kind = CouplingKind::convolutional;
        c.channels = 3;
        c.height = 32;
        c.width = 32;
    } else if (name == "glow-1ch") {
        c.blocks = 1;
        c.steps_per_block = 10;
        c.hidden_channels = 1000;
        c.coupling_kind = CouplingKind::dense;
        c.channels = 1;
        c.height = 28;
        c.width = 28;
    } else {
        fail(ErrorKind::config, "unknown flow preset: " + name);
    }
    c.validate();
    return c;
}

// ------------------------------------------------------------------
// Activation buffer and kernels

namespace {

struct Act {
    size_t n = 0, c = 0, h = 0, w = 0;
    std::vector<double> v;

    Act() = default;
    Act(size_t n_, size_t c_, size_t h_, size_t w_)
        : n(n_), c(c_), h(h_), w(w_), v(n_ * c_ * h_ * w_, 0.0) {}

    size_t hw() const { return h * w; }
    double* plane(size_t s, size_t ch) { return v.data() + (s * c + ch) * hw(); }
    const double* plane(size_t s, size_t ch) const { return v.data() + (s * c + ch) * hw(); }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

// kxk convolution, stride 1, zero padding (k-1)/2; k is 1 or 3.
void conv_fwd(const Act& in, const Tensor& w, const Tensor& b, size_t k, Act& out) {
    const size_t oc_n = w.shape[0], ic_n = w.shape[1];
    out = Act(in.n, oc_n, in.h, in.w);
    const size_t hw = in.hw();
    const long H = long(in.h), W = long(in.w);
    for (size_t s = 0; s < in.n; ++s) {
        for (size_t oc = 0; oc < oc_n; ++oc) {
            double* o = out.plane(s, oc);
            const double bias = b[oc];
            for (size_t p = 0; p < hw; ++p) o[p] = bias;
            if (k == 1) {
                const double* wrow = w.data.data() + oc * ic_n;
                for (size_t ic = 0; ic < ic_n; ++ic) {
                    const double wv = wrow[ic];
                    const double* x = in.plane(s, ic);
                    for (size_t p = 0; p < hw; ++p) o[p] += wv * x[p];
                }
            } else {
                for (size_t ic = 0; ic < ic_n; ++ic) {
                    const double* wk = w.data.data() + ((oc * ic_n) + ic) * 9;
                    const double* x = in.plane(s, ic);
                    for (long di = -1; di <= 1; ++di) {
                        for (long dj = -1; dj <= 1; ++dj) {
                            const double wv = wk[(di + 1) * 3 + (dj + 1)];
                            const long i0 = std::max(0L, -di), i1 = std::min(H, H - di);
                            const long j0 = std::max(0L, -dj), j1 = std::min(W, W - dj);
                            for (long i = i0; i < i1; ++i) {
                                double* orow = o + i * W;
                                const double* xrow = x + (i + di) * W + dj;
                                for (long j = j0; j < j1; ++j) orow[j] += wv * xrow[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Gradient w.r.t. the convolution input.
void conv_bwd_input(const Act& gout, const Tensor& w, size_t k, Act& gin) {
    const size_t oc_n = w.shape[0], ic_n = w.shape[1];
    gin = Act(gout.n, ic_n, gout.h, gout.w);
    const size_t hw = gout.hw();
    const long H = long(gout.h), W = long(gout.w);
    for (size_t s = 0; s < gout.n; ++s) {
        for (size_t oc = 0; oc < oc_n; ++oc) {
            const double* g = gout.plane(s, oc);
            if (k == 1) {
                const double* wrow = w.data.data() + oc * ic_n;
                for (size_t ic = 0; ic < ic_n; ++ic) {
                    const double wv = wrow[ic];
                    double* gi = gin.plane(s, ic);
                    for (size_t p = 0; p < hw; ++p) gi[p] += wv * g[p];
                }
            } else {
                for (size_t ic = 0; ic < ic_n; ++ic) {
                    const double* wk = w.data.data() + ((oc * ic_n) + ic) * 9;
                    double* gi = gin.plane(s, ic);
                    for (long di = -1; di <= 1; ++di) {
                        for (long dj = -1; dj <= 1; ++dj) {
                            const double wv = wk[(di + 1) * 3 + (dj + 1)];
                            const long i0 = std::max(0L, -di), i1 = std::min(H, H - di);
                            const long j0 = std::max(0L, -dj), j1 = std::min(W, W - dj);
                            for (long i = i0; i < i1; ++i) {
                                const double* grow = g + i * W;
                                double* girow = gi + (i + di) * W + dj;
                                for (long j = j0; j < j1; ++j) girow[j] += wv * grow[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Gradients w.r.t. weights and bias, accumulated into gw/gb.
void conv_bwd_params(const Act& in, const Act& gout, size_t k, Tensor& gw, Tensor& gb) {
    const size_t oc_n = gout.c, ic_n = in.c;
    const size_t hw = in.hw();
    const long H = long(in.h), W = long(in.w);
    for (size_t s = 0; s < in.n; ++s) {
        for (size_t oc = 0; oc < oc_n; ++oc) {
            const double* g = gout.plane(s, oc);
            double bsum = 0.0;
            for (size_t p = 0; p < hw; ++p) bsum += g[p];
            gb[oc] += bsum;
            if (k == 1) {
                double* gwrow = gw.data.data() + oc * ic_n;
                for (size_t ic = 0; ic < ic_n; ++ic) {
                    const double* x = in.plane(s, ic);
                    double acc = 0.0;
                    for (size_t p = 0; p < hw; ++p) acc += g[p] * x[p];
                    gwrow[ic] += acc;
                }
            } else {
                for (size_t ic = 0; ic < ic_n; ++ic) {
                    double* gwk = gw.data.data() + ((oc * ic_n) + ic) * 9;
                    const double* x = in.plane(s, ic);
                    for (long di = -1; di <= 1; ++di) {
                        for (long dj = -1; dj <= 1; ++dj) {
                            const long i0 = std::max(0L, -di), i1 = std::min(H, H - di);
                            const long j0 = std::max(0L, -dj), j1 = std::min(W, W - dj);
                            double acc = 0.0;
                            for (long i = i0; i < i1; ++i) {
                                const double* grow = g + i * W;
                                const double* xrow = x + (i + di) * W + dj;
                                for (long j = j0; j < j1; ++j) acc += grow[j] * xrow[j];
                            }
                            gwk[(di + 1) * 3 + (dj + 1)] += acc;
                        }
                    }
                }
            }
        }
    }
}

// Space-to-depth, factor 2: (c,h,w) -> (4c, h/2, w/2).
Act squeeze2(const Act& in) {
    Act out(in.n, in.c * 4, in.h / 2, in.w / 2);
    for (size_t s = 0; s < in.n; ++s)
        for (size_t c = 0; c < in.c; ++c) {
            const double* x = in.plane(s, c);
            for (size_t dy = 0; dy < 2; ++dy)
                for (size_t dx = 0; dx < 2; ++dx) {
                    double* o = out.plane(s, c * 4 + dy * 2 + dx);
                    for (size_t i = 0; i < out.h; ++i)
                        for (size_t j = 0; j < out.w; ++j)
                            o[i * out.w + j] = x[(2 * i + dy) * in.w + (2 * j + dx)];
                }
        }
    return out;
}

Act unsqueeze2(const Act& in) {
    Act out(in.n, in.c / 4, in.h * 2, in.w * 2);
    for (size_t s = 0; s < in.n; ++s)
        for (size_t c = 0; c < out.c; ++c) {
            double* x = out.plane(s, c);
            for (size_t dy = 0; dy < 2; ++dy)
                for (size_t dx = 0; dx < 2; ++dx) {
                    const double* o = in.plane(s, c * 4 + dy * 2 + dx);
                    for (size_t i = 0; i < in.h; ++i)
                        for (size_t j = 0; j < in.w; ++j)
                            x[(2 * i + dy) * out.w + (2 * j + dx)] = o[i * in.w + j];
                }
        }
    return out;
}

Act gather_channels(const Act& in, const std::vector<uint32_t>& idx) {
    Act out(in.n, idx.size(), in.h, in.w);
    for (size_t s = 0; s < in.n; ++s)
        for (size_t k = 0; k < idx.size(); ++k)
            std::memcpy(out.plane(s, k), in.plane(s, idx[k]), in.hw() * sizeof(double));
    return out;
}

void scatter_channels(const Act& part, const std::vector<uint32_t>& idx, Act& out) {
    for (size_t s = 0; s < part.n; ++s)
        for (size_t k = 0; k < idx.size(); ++k)
            std::memcpy(out.plane(s, idx[k]), part.plane(s, k), part.hw() * sizeof(double));
}

// Dense c x c matrix from the packed LU parameterization:
// W[r,:] = (L * U')[perm[r],:], L unit lower, U' = strict upper + diag(sign*exp(logs)).
std::vector<double> assemble_mix_matrix(const Tensor& lower, const Tensor& upper,
                                        const Tensor& logs, const std::vector<double>& sign,
                                        const std::vector<size_t>& perm) {
    const size_t c = logs.size();
    std::vector<double> L(c * c, 0.0), U(c * c, 0.0), W(c * c, 0.0);
    size_t li = 0, ui = 0;
    for (size_t i = 0; i < c; ++i) {
        L[i * c + i] = 1.0;
        for (size_t j = 0; j < i; ++j) L[i * c + j] = lower[li++];
        U[i * c + i] = sign[i] * std::exp(logs[i]);
        for (size_t j = i + 1; j < c; ++j) U[i * c + j] = upper[ui++];
    }
    std::vector<double> M(c * c, 0.0);
    for (size_t i = 0; i < c; ++i)
        for (size_t k = 0; k <= i; ++k) {
            const double l = L[i * c + k];
            for (size_t j = k; j < c; ++j) M[i * c + j] += l * U[k * c + j];
        }
    for (size_t r = 0; r < c; ++r)
        std::memcpy(W.data() + r * c, M.data() + perm[r] * c, c * sizeof(double));
    return W;
}

struct CouplingCache {
    Act xa, xb, z1, z2, s, es;
};

struct StepCache {
    Act actnorm_out; // output of actnorm == input of mix
    CouplingCache cp;
};

void tanh_inplace(Act& a) {
    for (double& x : a.v) x = std::tanh(x);
}

} // namespace

// ------------------------------------------------------------------
// Construction

namespace {

// Modified Gram-Schmidt orthogonalization of a random Gaussian matrix.
std::vector<double> random_orthogonal(size_t c, SeededRng& rng) {
    std::vector<double> a(c * c);
    for (double& x : a) x = rng.normal();
    for (size_t k = 0; k < c; ++k) {
        for (size_t j = 0; j < k; ++j) {
            double dot = 0.0;
            for (size_t i = 0; i < c; ++i) dot += a[i * c + j] * a[i * c + k];
            for (size_t i = 0; i < c; ++i) a[i * c + k] -= dot * a[i * c + j];
        }
        double norm = 0.0;
        for (size_t i = 0; i < c; ++i) norm += a[i * c + k] * a[i * c + k];
        norm = std::sqrt(norm);
        check(norm > 1e-12, ErrorKind::numeric, "degenerate random matrix in mix init");
        for (size_t i = 0; i < c; ++i) a[i * c + k] /= norm;
    }
    return a;
}

} // namespace

FlowModel FlowModel::build(const FlowConfig& cfg, SeededRng rng) {
    cfg.validate();
    FlowModel m;
    m.config = cfg;

    const bool dense = cfg.coupling_kind == CouplingKind::dense;
    size_t cc = cfg.channels, hh = cfg.height, ww = cfg.width;
    if (dense) {
        cc = cfg.channels * cfg.height * cfg.width;
        hh = ww = 1;
    }

    auto add_param = [&](const std::string& name, std::vector<size_t> shape) {
        const size_t idx = m.params.size();
        m.layers.push_back({idx, name, shape});
        m.params.push_back(Tensor::zeros(std::move(shape), cfg.precision));
        return idx;
    };

    for (size_t b = 0; b < cfg.blocks; ++b) {
        if (!dense) {
            cc *= 4;
            hh /= 2;
            ww /= 2;
        }
        m.block_shapes.push_back({cc, hh, ww});
        m.blocks.emplace_back();
        for (size_t k = 0; k < cfg.steps_per_block; ++k) {
            const std::string prefix =
                "block" + std::to_string(b) + ".step" + std::to_string(k) + ".";
            FlowStep step;

            step.actnorm.logs_p = add_param(prefix + "actnorm.logs", {cc});
            step.actnorm.bias_p = add_param(prefix + "actnorm.bias", {cc});

            // LU-parameterized invertible mix from a random rotation.
            const auto orth = random_orthogonal(cc, rng);
            std::vector<double> lu = orth;
            std::vector<size_t> piv(cc);
            for (size_t i = 0; i < cc; ++i) piv[i] = i;
            for (size_t col = 0; col < cc; ++col) {
                size_t best = col;
                for (size_t i = col + 1; i < cc; ++i)
                    if (std::abs(lu[i * cc + col]) > std::abs(lu[best * cc + col])) best = i;
                if (best != col) {
                    for (size_t j = 0; j < cc; ++j)
                        std::swap(lu[col * cc + j], lu[best * cc + j]);
                    std::swap(piv[col], piv[best]);
                }
                const double pivot = lu[col * cc + col];
                check(std::abs(pivot) > 1e-12, ErrorKind::numeric, "singular mix init");
                for (size_t i = col + 1; i < cc; ++i) {
                    lu[i * cc + col] /= pivot;
                    const double f = lu[i * cc + col];
                    for (size_t j = col + 1; j < cc; ++j) lu[i * cc + j] -= f * lu[col * cc + j];
                }
            }
            step.mix.lower_p = add_param(prefix + "mix.lower", {cc * (cc - 1) / 2});
            step.mix.upper_p = add_param(prefix + "mix.upper", {cc * (cc - 1) / 2});
            step.mix.logs_p = add_param(prefix + "mix.logs", {cc});
            Tensor& mlow = m.params[step.mix.lower_p];
            Tensor& mup = m.params[step.mix.upper_p];
            Tensor& mlogs = m.params[step.mix.logs_p];
            std::vector<double> sign(cc);
            size_t li = 0, ui = 0;
            for (size_t i = 0; i < cc; ++i) {
                for (size_t j = 0; j < i; ++j) mlow[li++] = lu[i * cc + j];
                const double d = lu[i * cc + i];
                sign[i] = d >= 0.0 ? 1.0 : -1.0;
                mlogs[i] = std::log(std::abs(d));
                for (size_t j = i + 1; j < cc; ++j) mup[ui++] = lu[i * cc + j];
            }
            // perm maps a W row to its L*U' row: W[piv[i],:] = (LU)[i,:].
            std::vector<size_t> perm(cc);
            for (size_t i = 0; i < cc; ++i) perm[piv[i]] = i;
            step.mix.perm_b = m.perms.size();
            m.perms.push_back(std::move(perm));
            step.mix.sign_b = m.signs.size();
            m.signs.push_back(std::move(sign));

            // Coupling channel partition: contiguous halves after squeeze in
            // conv mode, alternating even/odd flattened indices in dense mode.
            step.coupling.flip = (k % 2 == 1);
            std::vector<uint32_t> first, second;
            if (dense) {
                for (uint32_t i = 0; i < cc; ++i)
                    (i % 2 == 0 ? first : second).push_back(i);
            } else {
                for (uint32_t i = 0; i < cc; ++i)
                    (i < cc / 2 ? first : second).push_back(i);
            }
            step.coupling.pass_idx = step.coupling.flip ? second : first;
            step.coupling.trans_idx = step.coupling.flip ? first : second;
            const size_t na = step.coupling.pass_idx.size();
            const size_t nb = step.coupling.trans_idx.size();
            check(na >= 1 && nb >= 1, ErrorKind::config, "coupling needs both halves non-empty");

            const size_t hid = cfg.hidden_channels;
            step.coupling.k1 = dense ? 1 : 3;
            step.coupling.k2 = 1;
            step.coupling.k3 = dense ? 1 : 3;
            const size_t k1 = step.coupling.k1, k2 = step.coupling.k2, k3 = step.coupling.k3;
            step.coupling.w1_p = add_param(prefix + "coupling.w1", {hid, na, k1, k1});
            step.coupling.b1_p = add_param(prefix + "coupling.b1", {hid});
            step.coupling.w2_p = add_param(prefix + "coupling.w2", {hid, hid, k2, k2});
            step.coupling.b2_p = add_param(prefix + "coupling.b2", {hid});
            step.coupling.w3_p = add_param(prefix + "coupling.w3", {2 * nb, hid, k3, k3});
            step.coupling.b3_p = add_param(prefix + "coupling.b3", {2 * nb});

            // Small random hidden weights, zero final layer: identity coupling
            // at initialization.
            Tensor& w1 = m.params[step.coupling.w1_p];
            const double std1 = 1.0 / std::sqrt(double(na * k1 * k1));
            for (double& v : w1.data) v = rng.normal() * std1;
            Tensor& w2 = m.params[step.coupling.w2_p];
            const double std2 = 1.0 / std::sqrt(double(hid * k2 * k2));
            for (double& v : w2.data) v = rng.normal() * std2;

            m.blocks.back().push_back(std::move(step));
        }
    }
    m.round_params_to_precision();
    return m;
}

size_t FlowModel::param_count() const {
    size_t total = 0;
    for (const auto& p : params) total += p.size();
    return total;
}

size_t FlowModel::latent_dims() const {
    const auto& s = block_shapes.back();
    return s.c * s.h * s.w;
}

void FlowModel::round_params_to_precision() {
    for (auto& p : params) p.round_to_precision();
}

std::vector<LayerGroup> FlowModel::layer_groups(LayerGrouping g) const {
    std::vector<LayerGroup> out;
    if (g == LayerGrouping::per_tensor) {
        for (const auto& l : layers) out.push_back({l.name, {l.index}});
        return out;
    }
    // per_sublayer: merge weight+bias (and the mix triple) of one sublayer.
    auto sublayer_key = [](const std::string& name) {
        const size_t dot = name.rfind('.');
        std::string head = name.substr(0, dot);
        std::string leaf = name.substr(dot + 1);
        if (leaf.size() == 2 && (leaf[0] == 'w' || leaf[0] == 'b'))
            return head + ".net" + leaf.substr(1);
        return head; // actnorm.{logs,bias}, mix.{lower,upper,logs}
    };
    for (const auto& l : layers) {
        const std::string key = sublayer_key(l.name);
        if (out.empty() || out.back().name != key) out.push_back({key, {}});
        out.back().layer_indices.push_back(l.index);
    }
    return out;
}

// ------------------------------------------------------------------
// Forward

namespace {

struct RunOutput {
    std::vector<double> log_prob; // per sample
    Act z;
    std::vector<std::vector<StepCache>> caches; // filled when wanted
};

void ensure_finite(const Act& a, const std::string& where) {
    if (!a.all_finite())
        fail(ErrorKind::numeric, where + " produced a non-finite value");
}

} // namespace

// Shared forward core; collects caches for the backward pass on demand and
// can record actnorm outputs for introspection.
static RunOutput run_forward(const FlowModel& m, const ImageBatch& batch, bool want_cache,
                             std::vector<Tensor>* actnorm_trace) {
    const FlowConfig& cfg = m.config;
    check(batch.channels == cfg.channels && batch.height == cfg.height &&
              batch.width == cfg.width,
          ErrorKind::shape,
          "batch shape " + shape_str({batch.n, batch.channels, batch.height, batch.width}) +
              " does not match model input " +
              shape_str({cfg.channels, cfg.height, cfg.width}));
    check(batch.levels == cfg.quantization_levels, ErrorKind::consistency,
          "batch quantization levels do not match the model config");
    check(batch.has_dequant(), ErrorKind::state,
          "batch has no dequantized view; call dequantize() first");
    check(m.actnorm_ready, ErrorKind::state, "model actnorm is uninitialized");

    const size_t n = batch.n;
    const size_t dims = batch.dims();

    Tensor x = Tensor::from({n, dims}, batch.dequant, cfg.precision);
    LogitResult pre = logit_preprocess(x, cfg.logit_alpha);

    RunOutput out;
    out.log_prob = pre.per_sample_logdet;

    Act act;
    const bool dense = cfg.coupling_kind == CouplingKind::dense;
    if (dense) {
        act = Act(n, dims, 1, 1);
    } else {
        act = Act(n, cfg.channels, cfg.height, cfg.width);
    }
    std::copy(pre.y.data.begin(), pre.y.data.end(), act.v.begin());
    ensure_finite(act, "logit-preprocess");

    if (want_cache) out.caches.resize(m.blocks.size());

    for (size_t b = 0; b < m.blocks.size(); ++b) {
        if (!dense) act = squeeze2(act);
        const size_t hw = act.hw();
        for (size_t k = 0; k < m.blocks[b].size(); ++k) {
            const FlowStep& step = m.blocks[b][k];
            const std::string where =
                "block" + std::to_string(b) + ".step" + std::to_string(k);

            // actnorm
            const Tensor& logs = m.params[step.actnorm.logs_p];
            const Tensor& bias = m.params[step.actnorm.bias_p];
            double logs_sum = 0.0;
            for (size_t c = 0; c < act.c; ++c) {
                const double e = std::exp(logs[c]);
                logs_sum += logs[c];
                for (size_t s = 0; s < n; ++s) {
                    double* p = act.plane(s, c);
                    const double bc = bias[c];
                    for (size_t q = 0; q < hw; ++q) p[q] = (p[q] + bc) * e;
                }
            }
            for (size_t s = 0; s < n; ++s) out.log_prob[s] += double(hw) * logs_sum;
            ensure_finite(act, where + ".actnorm");
            StepCache* cache = nullptr;
            if (want_cache) {
                out.caches[b].emplace_back();
                cache = &out.caches[b].back();
                cache->actnorm_out = act;
            }
            if (actnorm_trace) {
                Tensor t = Tensor::from({act.n, act.c, act.h, act.w}, act.v, cfg.precision);
                actnorm_trace->push_back(std::move(t));
            }

            // invertible mix
            const auto W = assemble_mix_matrix(
                m.params[step.mix.lower_p], m.params[step.mix.upper_p],
                m.params[step.mix.logs_p], m.signs[step.mix.sign_b], m.perms[step.mix.perm_b]);
            const size_t cc = act.c;
            {
                std::vector<double> tmp(cc);
                for (size_t s = 0; s < n; ++s) {
                    for (size_t q = 0; q < hw; ++q) {
                        for (size_t r = 0; r < cc; ++r) {
                            double acc = 0.0;
                            const double* wrow = W.data() + r * cc;
                            for (size_t c = 0; c < cc; ++c)
                                acc += wrow[c] * act.v[(s * cc + c) * hw + q];
                            tmp[r] = acc;
                        }
                        for (size_t r = 0; r < cc; ++r) act.v[(s * cc + r) * hw + q] = tmp[r];
                    }
                }
            }
            const Tensor& mlogs = m.params[step.mix.logs_p];
            double mix_logs_sum = 0.0;
            for (size_t c = 0; c < cc; ++c) mix_logs_sum += mlogs[c];
            for (size_t s = 0; s < n; ++s) out.log_prob[s] += double(hw) * mix_logs_sum;
            ensure_finite(act, where + ".mix");

            // affine coupling
            const CouplingStep& cp = step.coupling;
            Act xa = gather_channels(act, cp.pass_idx);
            Act xb = gather_channels(act, cp.trans_idx);
            Act z1, z2, o;
            conv_fwd(xa, m.params[cp.w1_p], m.params[cp.b1_p], cp.k1, z1);
            tanh_inplace(z1);
            conv_fwd(z1, m.params[cp.w2_p], m.params[cp.b2_p], cp.k2, z2);
            tanh_inplace(z2);
            conv_fwd(z2, m.params[cp.w3_p], m.params[cp.b3_p], cp.k3, o);

            const size_t nb = cp.trans_idx.size();
            const double smax = cfg.scale_clamp;
            Act sact(n, nb, act.h, act.w), esact(n, nb, act.h, act.w);
            Act yb(n, nb, act.h, act.w);
            for (size_t s = 0; s < n; ++s) {
                double ld = 0.0;
                for (size_t c = 0; c < nb; ++c) {
                    const double* sraw = o.plane(s, c);
                    const double* tsh = o.plane(s, nb + c);
                    const double* xbp = xb.plane(s, c);
                    double* sp = sact.plane(s, c);
                    double* esp = esact.plane(s, c);
                    double* yp = yb.plane(s, c);
                    for (size_t q = 0; q < hw; ++q) {
                        const double sv = smax * std::tanh(sraw[q] / smax);
                        const double ev = std::exp(sv);
                        sp[q] = sv;
                        esp[q] = ev;
                        yp[q] = xbp[q] * ev + tsh[q];
                        ld += sv;
                    }
                }
                out.log_prob[s] += ld;
            }
            scatter_channels(yb, cp.trans_idx, act);
            ensure_finite(act, where + ".coupling");

            if (cache) {
                cache->cp.xa = std::move(xa);
                cache->cp.xb = std::move(xb);
                cache->cp.z1 = std::move(z1);
                cache->cp.z2 = std::move(z2);
                cache->cp.s = std::move(sact);
                cache->cp.es = std::move(esact);
            }
        }
    }

    // standard-normal prior on the final latent
    const size_t dlat = act.c * act.hw();
    for (size_t s = 0; s < n; ++s) {
        double quad = 0.0;
        const double* p = act.v.data() + s * dlat;
        for (size_t i = 0; i < dlat; ++i) quad += p[i] * p[i];
        out.log_prob[s] += -0.5 * (quad + double(dlat) * kLn2Pi);
    }
    out.z = std::move(act);
    return out;
}

LogProbResult FlowModel::forward_log_prob(const ImageBatch& batch) const {
    RunOutput r = run_forward(*this, batch, false, nullptr);
    LogProbResult out;
    out.per_sample_log_prob = std::move(r.log_prob);
    out.total_log_prob = 0.0;
    for (double v : out.per_sample_log_prob) out.total_log_prob += v;
    out.latent = Tensor::from({batch.n, r.z.c * r.z.h * r.z.w}, std::move(r.z.v));
    return out;
}

std::vector<Tensor> FlowModel::trace_actnorm_outputs(const ImageBatch& batch) const {
    std::vector<Tensor> trace;
    run_forward(*this, batch, false, &trace);
    return trace;
}

// ------------------------------------------------------------------
// Reverse-mode gradients of the summed log-likelihood

LogProbResult FlowModel::log_prob_and_gradients(const ImageBatch& batch) const {
    RunOutput r = run_forward(*this, batch, true, nullptr);
    const size_t n = batch.n;

    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.push_back(Tensor::zeros(p.shape));

    // dL/dz from the prior
    Act g = r.z;
    for (double& v : g.v) v = -v;

    const bool dense = config.coupling_kind == CouplingKind::dense;
    for (size_t b = blocks.size(); b-- > 0;) {
        for (size_t k = blocks[b].size(); k-- > 0;) {
            const FlowStep& step = blocks[b][k];
            const StepCache& cache = r.caches[b][k];
            const size_t hw = g.hw();

            // coupling backward
            {
                const CouplingStep& cp = step.coupling;
                const CouplingCache& cc = cache.cp;
                Act ga = gather_channels(g, cp.pass_idx);
                Act gb = gather_channels(g, cp.trans_idx);
                const size_t nb = cp.trans_idx.size();
                const double smax = config.scale_clamp;

                Act dout(n, 2 * nb, g.h, g.w);
                Act dxb(n, nb, g.h, g.w);
                for (size_t s = 0; s < n; ++s)
                    for (size_t c = 0; c < nb; ++c) {
                        const double* gbp = gb.plane(s, c);
                        const double* xbp = cc.xb.plane(s, c);
                        const double* sp = cc.s.plane(s, c);
                        const double* esp = cc.es.plane(s, c);
                        double* dsr = dout.plane(s, c);
                        double* dtp = dout.plane(s, nb + c);
                        double* dxbp = dxb.plane(s, c);
                        for (size_t q = 0; q < hw; ++q) {
                            const double ds = gbp[q] * xbp[q] * esp[q] + 1.0;
                            const double u = sp[q] / smax;
                            dsr[q] = ds * (1.0 - u * u);
                            dtp[q] = gbp[q];
                            dxbp[q] = gbp[q] * esp[q];
                        }
                    }

                conv_bwd_params(cc.z2, dout, cp.k3, grads[cp.w3_p], grads[cp.b3_p]);
                Act dz2;
                conv_bwd_input(dout, params[cp.w3_p], cp.k3, dz2);
                for (size_t i = 0; i < dz2.v.size(); ++i)
                    dz2.v[i] *= 1.0 - cc.z2.v[i] * cc.z2.v[i];
                conv_bwd_params(cc.z1, dz2, cp.k2, grads[cp.w2_p], grads[cp.b2_p]);
                Act dz1;
                conv_bwd_input(dz2, params[cp.w2_p], cp.k2, dz1);
                for (size_t i = 0; i < dz1.v.size(); ++i)
                    dz1.v[i] *= 1.0 - cc.z1.v[i] * cc.z1.v[i];
                conv_bwd_params(cc.xa, dz1, cp.k1, grads[cp.w1_p], grads[cp.b1_p]);
                Act dxa;
                conv_bwd_input(dz1, params[cp.w1_p], cp.k1, dxa);
                for (size_t i = 0; i < dxa.v.size(); ++i) dxa.v[i] += ga.v[i];

                scatter_channels(dxa, cp.pass_idx, g);
                scatter_channels(dxb, cp.trans_idx, g);
            }

            // mix backward
            {
                const MixStep& mx = step.mix;
                const size_t cc = g.c;
                const Act& x = cache.actnorm_out; // mix input
                const auto W = assemble_mix_matrix(params[mx.lower_p], params[mx.upper_p],
                                                   params[mx.logs_p], signs[mx.sign_b],
                                                   perms[mx.perm_b]);
                // per-sample accumulation keeps duplicated samples bitwise additive
                std::vector<double> gw(cc * cc, 0.0), gws(cc * cc), tmp(cc);
                for (size_t s = 0; s < n; ++s) {
                    std::fill(gws.begin(), gws.end(), 0.0);
                    for (size_t q = 0; q < hw; ++q) {
                        for (size_t a = 0; a < cc; ++a) {
                            const double gv = g.v[(s * cc + a) * hw + q];
                            double* gwrow = gws.data() + a * cc;
                            for (size_t c2 = 0; c2 < cc; ++c2)
                                gwrow[c2] += gv * x.v[(s * cc + c2) * hw + q];
                        }
                        for (size_t c2 = 0; c2 < cc; ++c2) {
                            double acc = 0.0;
                            for (size_t a = 0; a < cc; ++a)
                                acc += W[a * cc + c2] * g.v[(s * cc + a) * hw + q];
                            tmp[c2] = acc;
                        }
                        for (size_t c2 = 0; c2 < cc; ++c2)
                            g.v[(s * cc + c2) * hw + q] = tmp[c2];
                    }
                    for (size_t k2 = 0; k2 < cc * cc; ++k2) gw[k2] += gws[k2];
                }

                // gW -> packed L, U, logs through W[r,:] = (L U')[perm[r],:]
                const auto& perm = perms[mx.perm_b];
                const auto& sign = signs[mx.sign_b];
                std::vector<double> gm(cc * cc, 0.0);
                for (size_t rrow = 0; rrow < cc; ++rrow)
                    for (size_t j = 0; j < cc; ++j)
                        gm[perm[rrow] * cc + j] = gw[rrow * cc + j];

                const Tensor& lowp = params[mx.lower_p];
                const Tensor& upp = params[mx.upper_p];
                const Tensor& mlogs = params[mx.logs_p];
                std::vector<double> L(cc * cc, 0.0), U(cc * cc, 0.0);
                {
                    size_t li = 0, ui = 0;
                    for (size_t i = 0; i < cc; ++i) {
                        L[i * cc + i] = 1.0;
                        for (size_t j = 0; j < i; ++j) L[i * cc + j] = lowp[li++];
                        U[i * cc + i] = sign[i] * std::exp(mlogs[i]);
                        for (size_t j = i + 1; j < cc; ++j) U[i * cc + j] = upp[ui++];
                    }
                }
                // gL = gM * U'^T (strict lower); gU' = L^T * gM (upper + diag)
                size_t li = 0, ui = 0;
                Tensor& glow = grads[mx.lower_p];
                Tensor& gup = grads[mx.upper_p];
                Tensor& glogs = grads[mx.logs_p];
                for (size_t i = 0; i < cc; ++i) {
                    for (size_t j = 0; j < i; ++j) {
                        double acc = 0.0;
                        for (size_t t = 0; t < cc; ++t) acc += gm[i * cc + t] * U[j * cc + t];
                        glow[li++] += acc;
                    }
                    double diag = 0.0;
                    for (size_t t = 0; t < cc; ++t) diag += L[t * cc + i] * gm[t * cc + i];
                    glogs[i] += diag * sign[i] * std::exp(mlogs[i]) +
                                double(n) * double(hw); // log-det term
                    for (size_t j = i + 1; j < cc; ++j) {
                        double acc = 0.0;
                        for (size_t t = 0; t < cc; ++t) acc += L[t * cc + i] * gm[t * cc + j];
                        gup[ui++] += acc;
                    }
                }
            }

            // actnorm backward
            {
                const ActNormStep& an = step.actnorm;
                const Act& y = cache.actnorm_out;
                const Tensor& logs = params[an.logs_p];
                Tensor& glogs = grads[an.logs_p];
                Tensor& gbias = grads[an.bias_p];
                for (size_t c = 0; c < g.c; ++c) {
                    const double e = std::exp(logs[c]);
                    for (size_t s = 0; s < n; ++s) {
                        double sum_gy = 0.0, sum_gyy = 0.0;
                        double* gp = g.plane(s, c);
                        const double* yp = y.plane(s, c);
                        for (size_t q = 0; q < hw; ++q) {
                            sum_gy += gp[q];
                            sum_gyy += gp[q] * yp[q];
                            gp[q] *= e;
                        }
                        gbias[c] += sum_gy * e;
                        glogs[c] += sum_gyy + double(hw); // per-sample log-det term
                    }
                }
            }
        }
        if (!dense) g = unsqueeze2(g);
    }

    LogProbResult out;
    out.per_sample_log_prob = std::move(r.log_prob);
    out.total_log_prob = 0.0;
    for (double v : out.per_sample_log_prob) out.total_log_prob += v;
    out.latent = Tensor::from({n, r.z.c * r.z.h * r.z.w}, std::move(r.z.v));
    out.per_layer_gradients = std::move(grads);
    return out;
}

// ------------------------------------------------------------------
// ActNorm data-dependent initialization

void FlowModel::actnorm_init(const ImageBatch& batch) {
    check(!actnorm_ready, ErrorKind::state, "actnorm already initialized");
    check(batch.n >= 2, ErrorKind::insufficient_data,
          "actnorm_init needs a batch of at least 2 images");
    check(batch.has_dequant(), ErrorKind::state,
          "batch has no dequantized view; call dequantize() first");
    check(batch.channels == config.channels && batch.height == config.height &&
              batch.width == config.width,
          ErrorKind::shape, "actnorm_init: batch shape does not match model input");

    const size_t n = batch.n;
    const size_t dims = batch.dims();
    Tensor x = Tensor::from({n, dims}, batch.dequant, config.precision);
    LogitResult pre = logit_preprocess(x, config.logit_alpha);

    const bool dense = config.coupling_kind == CouplingKind::dense;
    Act act = dense ? Act(n, dims, 1, 1) : Act(n, config.channels, config.height, config.width);
    std::copy(pre.y.data.begin(), pre.y.data.end(), act.v.begin());

    constexpr double kVarianceFloor = 1e-6;

    for (size_t b = 0; b < blocks.size(); ++b) {
        if (!dense) act = squeeze2(act);
        const size_t hw = act.hw();
        for (size_t k = 0; k < blocks[b].size(); ++k) {
            FlowStep& step = blocks[b][k];

            // set scale/bias from this batch's per-channel statistics
            Tensor& logs = params[step.actnorm.logs_p];
            Tensor& bias = params[step.actnorm.bias_p];
            const double count = double(n) * double(hw);
            for (size_t c = 0; c < act.c; ++c) {
                double mean = 0.0;
                for (size_t s = 0; s < n; ++s) {
                    const double* p = act.plane(s, c);
                    for (size_t q = 0; q < hw; ++q) mean += p[q];
                }
                mean /= count;
                double var = 0.0;
                for (size_t s = 0; s < n; ++s) {
                    const double* p = act.plane(s, c);
                    for (size_t q = 0; q < hw; ++q) var += (p[q] - mean) * (p[q] - mean);
                }
                var /= count;
                const double std_dev = std::sqrt(std::max(var, kVarianceFloor));
                logs[c] = -std::log(std_dev);
                bias[c] = -mean;
            }
            logs.round_to_precision();
            bias.round_to_precision();

            // apply actnorm, mix, coupling with the same math as run_forward
            for (size_t c = 0; c < act.c; ++c) {
                const double e = std::exp(logs[c]);
                const double bc = bias[c];
                for (size_t s = 0; s < n; ++s) {
                    double* p = act.plane(s, c);
                    for (size_t q = 0; q < hw; ++q) p[q] = (p[q] + bc) * e;
                }
            }
            const auto W = assemble_mix_matrix(
                params[step.mix.lower_p], params[step.mix.upper_p], params[step.mix.logs_p],
                signs[step.mix.sign_b], perms[step.mix.perm_b]);
            const size_t cc = act.c;
            std::vector<double> tmp(cc);
            for (size_t s = 0; s < n; ++s)
                for (size_t q = 0; q < hw; ++q) {
                    for (size_t r = 0; r < cc; ++r) {
                        double acc = 0.0;
                        for (size_t c2 = 0; c2 < cc; ++c2)
                            acc += W[r * cc + c2] * act.v[(s * cc + c2) * hw + q];
                        tmp[r] = acc;
                    }
                    for (size_t r = 0; r < cc; ++r) act.v[(s * cc + r) * hw + q] = tmp[r];
                }

            const CouplingStep& cp = step.coupling;
            Act xa = gather_channels(act, cp.pass_idx);
            Act xb = gather_channels(act, cp.trans_idx);
            Act z1, z2, o;
            conv_fwd(xa, params[cp.w1_p], params[cp.b1_p], cp.k1, z1);
            tanh_inplace(z1);
            conv_fwd(z1, params[cp.w2_p], params[cp.b2_p], cp.k2, z2);
            tanh_inplace(z2);
            conv_fwd(z2, params[cp.w3_p], params[cp.b3_p], cp.k3, o);
            const size_t nb = cp.trans_idx.size();
            const double smax = config.scale_clamp;
            Act yb(n, nb, act.h, act.w);
            for (size_t s = 0; s < n; ++s)
                for (size_t c = 0; c < nb; ++c) {
                    const double* sraw = o.plane(s, c);
                    const double* tsh = o.plane(s, nb + c);
                    const double* xbp = xb.plane(s, c);
                    double* yp = yb.plane(s, c);
                    for (size_t q = 0; q < hw; ++q) {
                        const double sv = smax * std::tanh(sraw[q] / smax);
                        yp[q] = xbp[q] * std::exp(sv) + tsh[q];
                    }
                }
            scatter_channels(yb, cp.trans_idx, act);
            ensure_finite(act, "actnorm_init block" + std::to_string(b));
        }
    }
    actnorm_ready = true;
}

// ------------------------------------------------------------------
// Inversion and sampling

ImageBatch FlowModel::inverse(const Tensor& latent, double temperature) const {
    check(temperature >= 0.0, ErrorKind::invalid_argument, "temperature must be >= 0");
    check(actnorm_ready, ErrorKind::state, "model actnorm is uninitialized");
    const size_t dlat = latent_dims();
    check(latent.shape.size() >= 1 && latent.size() % dlat == 0 &&
              (latent.shape.size() == 1 || latent.shape[0] * dlat == latent.size()),
          ErrorKind::shape,
          "latent shape " + shape_str(latent.shape) + " does not match latent dims " +
              std::to_string(dlat));
    const size_t n = latent.size() / dlat;

    const auto& ls = block_shapes.back();
    Act act(n, ls.c, ls.h, ls.w);
    for (size_t i = 0; i < latent.size(); ++i) act.v[i] = latent[i] * temperature;

    const bool dense = config.coupling_kind == CouplingKind::dense;
    for (size_t b = blocks.size(); b-- > 0;) {
        const size_t hw = act.hw();
        for (size_t k = blocks[b].size(); k-- > 0;) {
            const FlowStep& step = blocks[b][k];

            // coupling inverse
            {
                const CouplingStep& cp = step.coupling;
                Act xa = gather_channels(act, cp.pass_idx);
                Act yb = gather_channels(act, cp.trans_idx);
                Act z1, z2, o;
                conv_fwd(xa, params[cp.w1_p], params[cp.b1_p], cp.k1, z1);
                tanh_inplace(z1);
                conv_fwd(z1, params[cp.w2_p], params[cp.b2_p], cp.k2, z2);
                tanh_inplace(z2);
                conv_fwd(z2, params[cp.w3_p], params[cp.b3_p], cp.k3, o);
                const size_t nb = cp.trans_idx.size();
                const double smax = config.scale_clamp;
                for (size_t s = 0; s < n; ++s)
                    for (size_t c = 0; c < nb; ++c) {
                        const double* sraw = o.plane(s, c);
                        const double* tsh = o.plane(s, nb + c);
                        double* xbp = yb.plane(s, c);
                        for (size_t q = 0; q < hw; ++q) {
                            const double sv = smax * std::tanh(sraw[q] / smax);
                            xbp[q] = (xbp[q] - tsh[q]) * std::exp(-sv);
                        }
                    }
                scatter_channels(yb, cp.trans_idx, act);
            }

            // mix inverse: solve W x = y via the LU factors
            {
                const MixStep& mx = step.mix;
                const size_t cc = act.c;
                const auto& perm = perms[mx.perm_b];
                const auto& sign = signs[mx.sign_b];
                const Tensor& lowp = params[mx.lower_p];
                const Tensor& upp = params[mx.upper_p];
                const Tensor& mlogs = params[mx.logs_p];
                std::vector<double> L(cc * cc, 0.0), U(cc * cc, 0.0);
                size_t li = 0, ui = 0;
                for (size_t i = 0; i < cc; ++i) {
                    L[i * cc + i] = 1.0;
                    for (size_t j = 0; j < i; ++j) L[i * cc + j] = lowp[li++];
                    U[i * cc + i] = sign[i] * std::exp(mlogs[i]);
                    for (size_t j = i + 1; j < cc; ++j) U[i * cc + j] = upp[ui++];
                }
                std::vector<size_t> inv_perm(cc);
                for (size_t r = 0; r < cc; ++r) inv_perm[perm[r]] = r;
                std::vector<double> rhs(cc);
                for (size_t s = 0; s < n; ++s)
                    for (size_t q = 0; q < hw; ++q) {
                        for (size_t i = 0; i < cc; ++i)
                            rhs[i] = act.v[(s * cc + inv_perm[i]) * hw + q];
                        for (size_t i = 0; i < cc; ++i)
                            for (size_t j = 0; j < i; ++j) rhs[i] -= L[i * cc + j] * rhs[j];
                        for (size_t i = cc; i-- > 0;) {
                            for (size_t j = i + 1; j < cc; ++j) rhs[i] -= U[i * cc + j] * rhs[j];
                            rhs[i] /= U[i * cc + i];
                        }
                        for (size_t i = 0; i < cc; ++i) act.v[(s * cc + i) * hw + q] = rhs[i];
                    }
            }

            // actnorm inverse
            {
                const Tensor& logs = params[step.actnorm.logs_p];
                const Tensor& bias = params[step.actnorm.bias_p];
                for (size_t c = 0; c < act.c; ++c) {
                    const double e = std::exp(-logs[c]);
                    const double bc = bias[c];
                    for (size_t s = 0; s < n; ++s) {
                        double* p = act.plane(s, c);
                        for (size_t q = 0; q < hw; ++q) p[q] = p[q] * e - bc;
                    }
                }
            }
        }
        if (!dense) act = unsqueeze2(act);
    }
    ensure_finite(act, "inverse");

    Tensor y = Tensor::from({n, config.channels, config.height, config.width}, act.v);
    Tensor x = logit_inverse(y, config.logit_alpha);

    ImageBatch out;
    out.n = n;
    out.channels = config.channels;
    out.height = config.height;
    out.width = config.width;
    out.levels = config.quantization_levels;
    out.source_tag = "sampled";
    out.dequant = x.data;
    out.pixels.resize(out.pixel_count());
    for (size_t i = 0; i < x.size(); ++i) {
        long q = long(std::floor(x[i] * double(config.quantization_levels)));
        if (q < 0) q = 0;
        if (q > long(config.quantization_levels) - 1) q = long(config.quantization_levels) - 1;
        out.pixels[i] = uint8_t(q);
    }
    return out;
}

Tensor FlowModel::sample_latent(size_t n, SeededRng& rng) const {
    Tensor z = Tensor::zeros({n, latent_dims()});
    for (double& v : z.data) v = rng.normal();
    return z;
}

// ------------------------------------------------------------------

double bpd(double log_prob_nats, size_t dims, uint32_t levels) {
    check(dims >= 1, ErrorKind::invalid_argument, "bpd: dims must be >= 1");
    check(levels >= 2, ErrorKind::invalid_argument, "bpd: levels must be >= 2");
    constexpr double kLn2 = 0.69314718055994530942;
    return -log_prob_nats / (double(dims) * kLn2) + std::log2(double(levels));
}

void write_pgm_grid(const ImageBatch& batch, size_t cols, const std::string& path) {
    batch.validate();
    check(batch.channels == 1, ErrorKind::invalid_argument,
          "write_pgm_grid: only single-channel batches");
    check(cols >= 1, ErrorKind::invalid_argument, "write_pgm_grid: cols must be >= 1");
    const size_t rows = (batch.n + cols - 1) / cols;
    const size_t gw = cols * batch.width + (cols - 1);
    const size_t gh = rows * batch.height + (rows - 1);
    std::vector<uint8_t> canvas(gw * gh, 0);
    const double scale = 255.0 / double(batch.levels - 1);
    for (size_t i = 0; i < batch.n; ++i) {
        const size_t r = i / cols, c = i % cols;
        const size_t oy = r * (batch.height + 1), ox = c * (batch.width + 1);
        auto img = batch.sample(i);
        for (size_t y = 0; y < batch.height; ++y)
            for (size_t x = 0; x < batch.width; ++x)
                canvas[(oy + y) * gw + ox + x] =
                    uint8_t(std::lround(double(img[y * batch.width + x]) * scale));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), ErrorKind::io, "write_pgm_grid: cannot open " + path);
    f << "P5\n" << gw << " " << gh << "\n255\n";
    f.write(reinterpret_cast<const char*>(canvas.data()), std::streamsize(canvas.size()));
    check(f.good(), ErrorKind::io, "write_pgm_grid: write failed");
}

} // namespace gradflow
