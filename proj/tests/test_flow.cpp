#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "gradflow/flow.hpp"
#include "gradflow/stats.hpp"

using namespace gradflow;

namespace {

FlowConfig desk64() {
    FlowConfig c = flow_preset("glow-desk");
    c.precision = Precision::f64;
    return c;
}

FlowConfig tiny_conv() {
    FlowConfig c;
    c.blocks = 2;
    c.steps_per_block = 2;
    c.hidden_channels = 6;
    c.coupling_kind = CouplingKind::convolutional;
    c.channels = 1;
    c.height = 8;
    c.width = 8;
    c.precision = Precision::f64;
    return c;
}

// 12-dimensional dense configuration for brute-force Jacobian checks.
FlowConfig tiny_dense() {
    FlowConfig c;
    c.blocks = 1;
    c.steps_per_block = 3;
    c.hidden_channels = 8;
    c.coupling_kind = CouplingKind::dense;
    c.channels = 3;
    c.height = 2;
    c.width = 2;
    c.precision = Precision::f64;
    return c;
}

ImageBatch random_batch(const FlowConfig& cfg, size_t n, uint64_t seed) {
    SyntheticSpec spec;
    spec.family = SynthFamily::correlated_field;
    spec.corr_length = 1.0;
    spec.channels = cfg.channels;
    spec.height = cfg.height;
    spec.width = cfg.width;
    spec.levels = cfg.quantization_levels;
    ImageBatch b = synth_generate(spec, n, seed);
    dequantize(b, SeededRng(seed, 17), cfg.precision);
    return b;
}

// Perturbs every parameter so no coupling branch is dead, after a real
// data-dependent actnorm init.
FlowModel ready_model(const FlowConfig& cfg, uint64_t seed, double jitter = 0.05) {
    FlowModel m = FlowModel::build(cfg, SeededRng(seed, 1));
    ImageBatch init = random_batch(cfg, 16, seed + 1);
    m.actnorm_init(init);
    SeededRng noise(seed, 2);
    for (auto& p : m.params)
        for (double& v : p.data) v += noise.normal() * jitter;
    return m;
}

void make_identity_transforms(FlowModel& m) {
    for (auto& block : m.blocks)
        for (auto& step : block) {
            m.params[step.actnorm.logs_p].fill(0.0);
            m.params[step.actnorm.bias_p].fill(0.0);
            m.params[step.mix.lower_p].fill(0.0);
            m.params[step.mix.upper_p].fill(0.0);
            m.params[step.mix.logs_p].fill(0.0);
            auto& perm = m.perms[step.mix.perm_b];
            for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
            for (auto& s : m.signs[step.mix.sign_b]) s = 1.0;
        }
    m.actnorm_ready = true;
}

// LU determinant with partial pivoting (test-local oracle helper).
double log_abs_det(std::vector<double> a, size_t n) {
    double acc = 0.0;
    for (size_t k = 0; k < n; ++k) {
        size_t best = k;
        for (size_t i = k + 1; i < n; ++i)
            if (std::abs(a[i * n + k]) > std::abs(a[best * n + k])) best = i;
        if (best != k)
            for (size_t j = 0; j < n; ++j) std::swap(a[k * n + j], a[best * n + j]);
        REQUIRE(a[k * n + k] != 0.0);
        acc += std::log(std::abs(a[k * n + k]));
        for (size_t i = k + 1; i < n; ++i) {
            const double f = a[i * n + k] / a[k * n + k];
            for (size_t j = k + 1; j < n; ++j) a[i * n + j] -= f * a[k * n + j];
        }
    }
    return acc;
}

} // namespace

TEST_CASE("config validation rules") {
    CHECK_THROWS_AS(flow_preset("nope"), Error);
    FlowConfig c = flow_preset("glow-desk");
    c.height = 6; // not divisible by 2^blocks
    CHECK_THROWS_AS(c.validate(), Error);
    FlowConfig d = flow_preset("glow-1ch");
    d.blocks = 2; // dense requires one block
    CHECK_THROWS_AS(d.validate(), Error);
    CHECK(flow_preset("glow-3ch").hidden_channels == 512);
}

TEST_CASE("build determinism and layer registry") {
    const FlowConfig cfg = desk64();
    FlowModel a = FlowModel::build(cfg, SeededRng(7, 1));
    FlowModel b = FlowModel::build(cfg, SeededRng(7, 1));
    REQUIRE(a.layers.size() == b.layers.size());
    CHECK(a.layers.size() == cfg.blocks * cfg.steps_per_block * 11);
    for (size_t i = 0; i < a.params.size(); ++i) {
        CHECK(a.layers[i].index == i);
        CHECK(a.params[i].data == b.params[i].data); // bitwise
    }
    FlowModel c = FlowModel::build(cfg, SeededRng(8, 1));
    bool same = true;
    for (size_t i = 0; i < a.params.size(); ++i)
        if (a.params[i].data != c.params[i].data) same = false;
    CHECK_FALSE(same);
}

TEST_CASE("parameter groups cover every tensor exactly once") {
    FlowModel m = FlowModel::build(desk64(), SeededRng(3, 1));
    size_t total = 0;
    for (const auto& l : m.layers) total += numel(l.shape);
    CHECK(total == m.param_count());

    for (LayerGrouping g : {LayerGrouping::per_tensor, LayerGrouping::per_sublayer}) {
        const auto groups = m.layer_groups(g);
        std::vector<int> seen(m.params.size(), 0);
        for (const auto& grp : groups)
            for (size_t i : grp.layer_indices) seen[i] += 1;
        for (int s : seen) CHECK(s == 1);
    }
    CHECK(m.layer_groups(LayerGrouping::per_tensor).size() == m.layers.size());
    CHECK(m.layer_groups(LayerGrouping::per_sublayer).size() ==
          m.blocks.size() * m.blocks[0].size() * 5); // actnorm, mix, net1..net3
}

TEST_CASE("invertible mix initializes to a rotation") {
    FlowModel m = FlowModel::build(desk64(), SeededRng(11, 1));
    for (size_t b = 0; b < m.blocks.size(); ++b)
        for (const auto& step : m.blocks[b]) {
            const Tensor& logs = m.params[step.mix.logs_p];
            double sum = 0.0;
            for (double v : logs.data) sum += v;
            CHECK(std::abs(sum) < 1e-9); // |det| = 1 for a rotation
        }
}

TEST_CASE("identity model reduces to the preprocessed prior") {
    const FlowConfig cfg = tiny_conv();
    FlowModel m = FlowModel::build(cfg, SeededRng(5, 1));
    make_identity_transforms(m);

    ImageBatch batch = random_batch(cfg, 3, 21);
    const LogProbResult r = m.forward_log_prob(batch);

    Tensor x = Tensor::from({batch.n, batch.dims()}, batch.dequant);
    const LogitResult pre = logit_preprocess(x, cfg.logit_alpha);
    for (size_t s = 0; s < batch.n; ++s) {
        double expect = pre.per_sample_logdet[s];
        for (size_t i = 0; i < batch.dims(); ++i) {
            const double y = pre.y[s * batch.dims() + i];
            expect += -0.5 * (y * y + kLn2Pi);
        }
        CHECK(r.per_sample_log_prob[s] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("forward_log_prob is side-effect free and deterministic") {
    const FlowConfig cfg = tiny_conv();
    FlowModel m = ready_model(cfg, 31);
    ImageBatch batch = random_batch(cfg, 4, 33);
    const LogProbResult a = m.forward_log_prob(batch);
    const LogProbResult b = m.forward_log_prob(batch);
    CHECK(a.per_sample_log_prob == b.per_sample_log_prob);
    CHECK(a.latent.data == b.latent.data);
}

TEST_CASE("forward errors: shape mismatch, missing dequant, uninitialized") {
    const FlowConfig cfg = tiny_conv();
    FlowModel m = ready_model(cfg, 41);
    ImageBatch wrong = random_batch(tiny_dense(), 2, 1);
    CHECK_THROWS_AS(m.forward_log_prob(wrong), Error);

    ImageBatch nodq = random_batch(cfg, 2, 2);
    nodq.dequant.clear();
    CHECK_THROWS_AS(m.forward_log_prob(nodq), Error);

    FlowModel fresh = FlowModel::build(cfg, SeededRng(1, 1));
    ImageBatch ok = random_batch(cfg, 2, 3);
    CHECK_THROWS_AS(fresh.forward_log_prob(ok), Error);
}

TEST_CASE("numeric overflow error names the offending step") {
    const FlowConfig cfg = tiny_conv();
    FlowModel m = ready_model(cfg, 43);
    m.params[m.blocks[1][0].actnorm.logs_p].fill(1000.0); // exp overflows
    ImageBatch batch = random_batch(cfg, 2, 5);
    try {
        m.forward_log_prob(batch);
        FAIL("expected numeric error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::numeric);
        CHECK(std::string(e.what()).find("block1.step0") != std::string::npos);
    }
}

TEST_CASE("actnorm_init normalizes every actnorm output on the init batch") {
    const FlowConfig cfg = desk64();
    FlowModel m = FlowModel::build(cfg, SeededRng(13, 1));
    ImageBatch batch = random_batch(cfg, 64, 77);
    m.actnorm_init(batch);
    CHECK(m.actnorm_ready);

    const auto traces = m.trace_actnorm_outputs(batch);
    REQUIRE(traces.size() == cfg.blocks * cfg.steps_per_block);
    for (const auto& t : traces) {
        const size_t n = t.shape[0], c = t.shape[1], hw = t.shape[2] * t.shape[3];
        for (size_t ch = 0; ch < c; ++ch) {
            double mean = 0.0, var = 0.0;
            for (size_t s = 0; s < n; ++s)
                for (size_t q = 0; q < hw; ++q) mean += t.data[(s * c + ch) * hw + q];
            mean /= double(n * hw);
            for (size_t s = 0; s < n; ++s)
                for (size_t q = 0; q < hw; ++q) {
                    const double d = t.data[(s * c + ch) * hw + q] - mean;
                    var += d * d;
                }
            var /= double(n * hw);
            CHECK(std::abs(mean) <= 1e-4);
            CHECK(std::abs(var - 1.0) <= 1e-3);
        }
    }

    CHECK_THROWS_AS(m.actnorm_init(batch), Error); // state error: already done
}

TEST_CASE("actnorm_init variance floor survives a degenerate batch") {
    const FlowConfig cfg = tiny_conv();
    FlowModel m = FlowModel::build(cfg, SeededRng(2, 1));
    ImageBatch batch;
    batch.n = 4;
    batch.channels = cfg.channels;
    batch.height = cfg.height;
    batch.width = cfg.width;
    batch.levels = cfg.quantization_levels;
    batch.pixels.assign(batch.pixel_count(), 128);
    batch.dequant.assign(batch.pixel_count(), 0.5); // identical images, zero variance
    m.actnorm_init(batch);
    const double expected_logs = -0.5 * std::log(1e-6);
    for (const auto& step : m.blocks[0]) {
        const Tensor& logs = m.params[step.actnorm.logs_p];
        for (double v : logs.data) {
            CHECK(std::isfinite(v));
            CHECK(v == doctest::Approx(expected_logs).epsilon(1e-12));
        }
    }
}

TEST_CASE("bpd algebra") {
    CHECK(bpd(0.0, 1, 256) == doctest::Approx(8.0).epsilon(1e-15));
    const size_t D = 64;
    for (double k : {0.5, 3.0, 7.25})
        CHECK(bpd(-double(D) * std::log(2.0) * k, D, 256) ==
              doctest::Approx(k + 8.0).epsilon(1e-12));
    CHECK_THROWS_AS(bpd(0.0, 0, 256), Error);
    CHECK_THROWS_AS(bpd(0.0, 1, 1), Error);
}

TEST_CASE("12-dim Jacobian brute force matches the accumulated log-det") {
    const FlowConfig cfg = tiny_dense();
    FlowModel m = ready_model(cfg, 61, 0.1);
    const size_t D = 12;
    const double h = 1e-5;

    for (int trial = 0; trial < 10; ++trial) {
        ImageBatch batch = random_batch(cfg, 1, 100 + trial);
        const LogProbResult base = m.forward_log_prob(batch);
        double prior = 0.0;
        for (size_t i = 0; i < D; ++i) {
            const double z = base.latent[i];
            prior += -0.5 * (z * z + kLn2Pi);
        }
        const double model_logdet = base.per_sample_log_prob[0] - prior;

        std::vector<double> jac(D * D);
        for (size_t j = 0; j < D; ++j) {
            ImageBatch plus = batch, minus = batch;
            plus.dequant[j] += h;
            minus.dequant[j] -= h;
            const LogProbResult rp = m.forward_log_prob(plus);
            const LogProbResult rm = m.forward_log_prob(minus);
            for (size_t i = 0; i < D; ++i)
                jac[i * D + j] = (rp.latent[i] - rm.latent[i]) / (2.0 * h);
        }
        const double fd_logdet = log_abs_det(jac, D);
        CHECK(std::abs(model_logdet - fd_logdet) < 1e-3);
    }
}

TEST_CASE("gradients match central finite differences (small conv and dense models)") {
    for (const FlowConfig& cfg : {tiny_conv(), tiny_dense()}) {
        FlowModel m = ready_model(cfg, 71, 0.08);
        ImageBatch batch = random_batch(cfg, 2, 72);
        const LogProbResult res = m.log_prob_and_gradients(batch);
        REQUIRE(res.per_layer_gradients.size() == m.params.size());

        const double h = 1e-4;
        double max_rel = 0.0;
        for (size_t t = 0; t < m.params.size(); ++t) {
            for (size_t j = 0; j < m.params[t].size(); ++j) {
                const double keep = m.params[t][j];
                m.params[t][j] = keep + h;
                const double lp_plus = m.forward_log_prob(batch).total_log_prob;
                m.params[t][j] = keep - h;
                const double lp_minus = m.forward_log_prob(batch).total_log_prob;
                m.params[t][j] = keep;
                const double fd = (lp_plus - lp_minus) / (2.0 * h);
                const double an = res.per_layer_gradients[t][j];
                const double scale = std::max({std::abs(fd), std::abs(an), 1e-3});
                max_rel = std::max(max_rel, std::abs(fd - an) / scale);
            }
        }
        CHECK(max_rel < 1e-3);
    }
}

TEST_CASE("two identical samples double the gradient exactly") {
    const FlowConfig cfg = tiny_conv();
    FlowModel m = ready_model(cfg, 81);
    ImageBatch one = random_batch(cfg, 1, 82);
    ImageBatch two = one;
    two.n = 2;
    two.pixels.insert(two.pixels.end(), one.pixels.begin(), one.pixels.end());
    two.dequant.insert(two.dequant.end(), one.dequant.begin(), one.dequant.end());
    two.sample_ids = {0, 0};

    const LogProbResult g1 = m.log_prob_and_gradients(one);
    const LogProbResult g2 = m.log_prob_and_gradients(two);
    for (size_t t = 0; t < m.params.size(); ++t)
        for (size_t j = 0; j < m.params[t].size(); ++j)
            CHECK(g2.per_layer_gradients[t][j] == 2.0 * g1.per_layer_gradients[t][j]);
}

TEST_CASE("parameters behind a zeroed coupling branch get exactly zero gradient") {
    const FlowConfig cfg = tiny_conv();
    FlowModel m = FlowModel::build(cfg, SeededRng(9, 1)); // final coupling layers stay zero
    ImageBatch init = random_batch(cfg, 8, 90);
    m.actnorm_init(init);
    ImageBatch batch = random_batch(cfg, 2, 91);
    const LogProbResult res = m.log_prob_and_gradients(batch);
    for (const auto& block : m.blocks)
        for (const auto& step : block) {
            for (size_t p : {step.coupling.w1_p, step.coupling.b1_p, step.coupling.w2_p,
                             step.coupling.b2_p})
                for (double v : res.per_layer_gradients[p].data) CHECK(v == 0.0);
        }
}

TEST_CASE("inverse(forward(x)) reconstructs the input image") {
    for (const FlowConfig& cfg : {tiny_conv(), tiny_dense()}) {
        FlowModel m = ready_model(cfg, 95);
        ImageBatch batch = random_batch(cfg, 5, 96);
        const LogProbResult fwd = m.forward_log_prob(batch);
        const ImageBatch back = m.inverse(fwd.latent, 1.0);
        REQUIRE(back.dequant.size() == batch.dequant.size());
        for (size_t i = 0; i < batch.dequant.size(); ++i)
            CHECK(std::abs(back.dequant[i] - batch.dequant[i]) < 1e-8); // 64-bit tolerance
    }
}

TEST_CASE("temperature zero collapses to the mode image") {
    const FlowConfig cfg = tiny_conv();
    FlowModel m = ready_model(cfg, 97);
    SeededRng rng(1, 2);
    const Tensor za = m.sample_latent(3, rng);
    const Tensor zb = m.sample_latent(3, rng);
    const ImageBatch a = m.inverse(za, 0.0);
    const ImageBatch b = m.inverse(zb, 0.0);
    CHECK(a.dequant == b.dequant); // latent scaled to zero
    CHECK_THROWS_AS(m.inverse(za, -1.0), Error);
}

TEST_CASE("f32 precision flag keeps parameters float-representable") {
    FlowConfig cfg = flow_preset("glow-desk");
    REQUIRE(cfg.precision == Precision::f32);
    FlowModel m = FlowModel::build(cfg, SeededRng(15, 1));
    for (const auto& p : m.params)
        for (double v : p.data) CHECK(double(float(v)) == v);
}

TEST_CASE("pgm grid writer emits a well-formed P5 file") {
    SyntheticSpec spec;
    ImageBatch b = synth_generate(spec, 4, 3);
    const std::string path = "/tmp/gradflow-test-grid.pgm";
    write_pgm_grid(b, 2, path);
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::string magic;
    f >> magic;
    size_t w, h, maxv;
    f >> w >> h >> maxv;
    CHECK(magic == "P5");
    CHECK(w == 2 * 8 + 1);
    CHECK(h == 2 * 8 + 1);
    CHECK(maxv == 255);
    f.get();
    std::string rest((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    CHECK(rest.size() == w * h);
    std::remove(path.c_str());
}
