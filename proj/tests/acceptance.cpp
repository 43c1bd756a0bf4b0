// Acceptance suite: one pass/fail line per criterion. Criteria 4-7 share
// trained desk-scale runs cached under the work directory, so running the
// criteria in order avoids retraining.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "gradflow/cli.hpp"
#include "gradflow/evaluation.hpp"
#include "gradflow/flow.hpp"
#include "gradflow/scoring.hpp"
#include "gradflow/stats.hpp"
#include "gradflow/train.hpp"

using namespace gradflow;
namespace fs = std::filesystem;

namespace {

struct Failure {
    std::string what;
};

void expect(bool cond, const std::string& what) {
    if (!cond) throw Failure{what};
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    expect(f.good(), "cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(text.data(), std::streamsize(text.size()));
}

// ------------------------------------------------------------------
// Shared desk-scale experiment fixtures

constexpr uint64_t kSeedTrainW = 1001; // white-noise ID run
constexpr uint64_t kSeedTrainF = 1002; // flat-blob ID run
constexpr uint64_t kSeedEval = 2001;
constexpr size_t kSourceN = 12000;

std::array<double, 3> fractions() { return {1.0 / 6.0, 0.5, 1.0 / 3.0}; }

SplitSet splits_for(SynthFamily fam, uint64_t seed) {
    SyntheticSpec spec;
    spec.family = fam;
    if (fam == SynthFamily::correlated_field) spec.corr_length = 1.5;
    auto src = DataSource::from_synth(spec, kSourceN, seed);
    return make_splits(src, fractions(), seed);
}

SplitSet white_splits() { return splits_for(SynthFamily::white_noise, 301); }
SplitSet flat_splits() { return splits_for(SynthFamily::flat_blob, 302); }
SplitSet corr_splits() { return splits_for(SynthFamily::correlated_field, 303); }

// Trains (or reuses) a glow-desk run; returns the run directory.
std::string ensure_run(const std::string& workdir, const std::string& name,
                       const SplitSet& data, uint64_t seed, size_t epochs,
                       const std::vector<size_t>& ckpt_epochs) {
    const std::string run_dir = workdir + "/" + name;
    const std::string marker = run_dir + "/.complete";
    if (fs::exists(marker)) return run_dir;
    fs::remove_all(run_dir);
    fs::create_directories(run_dir + "/checkpoints");

    FlowConfig fc = flow_preset("glow-desk");
    TrainConfig tc = train_preset("glow-desk");
    tc.epochs = epochs;
    tc.checkpoint_epochs = ckpt_epochs;
    tc.seed = seed;

    FlowModel model = FlowModel::build(fc, SeededRng(seed, fnv1a64("model-init")));
    const TrainResult result =
        train(std::move(model), data.train, tc, [&](const Checkpoint& c) {
            save_checkpoint(c, run_dir + "/checkpoints/" + checkpoint_filename(c.epoch));
        });
    expect(result.status == TrainStatus::ok, name + ": training failed numerically");

    std::string loss_csv = "epoch;mean_bpd\n";
    char buf[64];
    for (size_t e = 0; e < result.bpd_history.size(); ++e) {
        std::snprintf(buf, sizeof buf, "%zu;%.17g\n", e + 1, result.bpd_history[e]);
        loss_csv += buf;
    }
    write_file(run_dir + "/loss.csv", loss_csv);
    write_file(marker, "ok\n");
    return run_dir;
}

std::string ensure_runW(const std::string& workdir, const std::string& name = "runW") {
    return ensure_run(workdir, name, white_splits(), kSeedTrainW, 10, {1, 3, 10});
}

std::string ensure_runF(const std::string& workdir, const std::string& name = "runF") {
    return ensure_run(workdir, name, flat_splits(), kSeedTrainF, 50, {1, 3, 5, 10, 25, 50});
}

SweepOptions base_sweep_opts() {
    SweepOptions o;
    o.n_eval = 1000;
    o.n_fit_obs = 1000;
    o.seed = kSeedEval;
    return o;
}

const SweepRow& find_row(const SweepResult& res, size_t epoch, size_t b, ScoreKind kind) {
    for (const auto& r : res.rows)
        if (r.epoch == epoch && r.b == b && r.kind == kind) return r;
    throw Failure{"sweep row not found for epoch " + std::to_string(epoch)};
}

// Criterion 4's scoring pipeline, reused by criterion 7's determinism rerun.
SweepResult run_eval_c4(const std::string& run_dir, const std::string& out_dir) {
    SweepOptions opts = base_sweep_opts();
    opts.epochs = {10};
    opts.b_list = {5};
    opts.kinds = {ScoreKind::gradient_aggregate, ScoreKind::negative_bpd_baseline};
    opts.out_dir = out_dir;
    const SweepResult res = sweep_report(run_dir, white_splits(), {flat_splits()}, opts);
    expect(res.missing_checkpoints.empty(), "criterion 4: missing checkpoints");

    // also emit raw per-group score CSVs for the determinism criterion
    const Checkpoint ckpt = load_checkpoint(run_dir + "/checkpoints/" + checkpoint_filename(10));
    SeededRng base(kSeedEval, 0);
    ImageBatch id_eval = sample_eval_set(white_splits().test, 1000, kSeedEval);
    dequantize(id_eval, base.derive("score-dequant"));
    ImageBatch ood_eval = sample_eval_set(flat_splits().test, 1000, kSeedEval);
    dequantize(ood_eval, base.derive("score-dequant"));

    const size_t n_groups = std::min<size_t>(1000, white_splits().fit.size() / 5);
    ImageBatch fit_sample = sample_eval_set(white_splits().fit, n_groups * 5, kSeedEval);
    dequantize(fit_sample, base.derive("fit-dequant"));
    const ScoreBatchSpec spec{5, kSeedEval};
    const GaussianLayerStats stats = fit_stats_for_checkpoint(ckpt, fit_sample, spec, 1000);

    ScoreDatasetOptions so;
    so.spec = spec;
    so.kind = ScoreKind::gradient_aggregate;
    write_file(out_dir + "/scores-id.csv", score_table_csv(score_dataset(ckpt, &stats, id_eval, so)));
    write_file(out_dir + "/scores-ood.csv",
               score_table_csv(score_dataset(ckpt, &stats, ood_eval, so)));
    return res;
}

SweepResult run_eval_c5(const std::string& run_dir, const std::string& out_dir) {
    SweepOptions opts = base_sweep_opts();
    opts.epochs = {1, 5, 10, 25, 50};
    opts.b_list = {1};
    opts.kinds = {ScoreKind::gradient_aggregate};
    opts.out_dir = out_dir;
    const SweepResult res = sweep_report(run_dir, flat_splits(), {corr_splits()}, opts);
    expect(res.missing_checkpoints.empty(), "criterion 5: missing checkpoints");
    return res;
}

SweepResult run_eval_c6(const std::string& run_dir, const std::string& out_dir) {
    SweepOptions opts = base_sweep_opts();
    opts.epochs = {3, 5, 10, 25, 50};
    opts.b_list = {5};
    opts.kinds = {ScoreKind::gradient_aggregate};
    opts.out_dir = out_dir;
    const SweepResult res = sweep_report(run_dir, flat_splits(), {white_splits()}, opts);
    expect(res.missing_checkpoints.empty(), "criterion 6: missing checkpoints");
    return res;
}

// ------------------------------------------------------------------
// Criterion 1: flow correctness

void criterion_1(const std::string&) {
    // invertibility at 32-bit storage precision
    {
        FlowConfig fc = flow_preset("glow-desk"); // f32
        FlowModel m = FlowModel::build(fc, SeededRng(11, 1));
        SyntheticSpec spec;
        spec.family = SynthFamily::correlated_field;
        spec.corr_length = 1.5;
        ImageBatch init = synth_generate(spec, 64, 12);
        dequantize(init, SeededRng(12, 1), fc.precision);
        m.actnorm_init(init);
        SeededRng noise(13, 1);
        for (auto& p : m.params)
            for (double& v : p.data) v += noise.normal() * 0.05;
        m.round_params_to_precision();

        ImageBatch batch = synth_generate(spec, 100, 14);
        dequantize(batch, SeededRng(14, 1), fc.precision);
        const LogProbResult fwd = m.forward_log_prob(batch);
        const ImageBatch back = m.inverse(fwd.latent, 1.0);
        double max_err = 0.0;
        for (size_t i = 0; i < batch.dequant.size(); ++i)
            max_err = std::max(max_err, std::abs(back.dequant[i] - batch.dequant[i]));
        expect(max_err < 1e-4, "invertibility round-trip error " + std::to_string(max_err));
        std::printf("  invertibility: max round-trip error %.3g on 100 inputs\n", max_err);
    }

    // 12x12 brute-force Jacobian vs accumulated log-det
    {
        FlowConfig fc;
        fc.blocks = 1;
        fc.steps_per_block = 3;
        fc.hidden_channels = 8;
        fc.coupling_kind = CouplingKind::dense;
        fc.channels = 3;
        fc.height = 2;
        fc.width = 2;
        fc.precision = Precision::f64;
        FlowModel m = FlowModel::build(fc, SeededRng(21, 1));
        SyntheticSpec spec;
        spec.family = SynthFamily::correlated_field;
        spec.corr_length = 1.0;
        spec.channels = 3;
        spec.height = 2;
        spec.width = 2;
        ImageBatch init = synth_generate(spec, 16, 22);
        dequantize(init, SeededRng(22, 1), Precision::f64);
        m.actnorm_init(init);
        SeededRng noise(23, 1);
        for (auto& p : m.params)
            for (double& v : p.data) v += noise.normal() * 0.1;

        const size_t D = 12;
        const double h = 1e-5;
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            ImageBatch batch = synth_generate(spec, 1, 100 + uint64_t(trial));
            dequantize(batch, SeededRng(100 + uint64_t(trial), 1), Precision::f64);
            const LogProbResult base_r = m.forward_log_prob(batch);
            double prior = 0.0;
            for (size_t i = 0; i < D; ++i)
                prior += -0.5 * (base_r.latent[i] * base_r.latent[i] + kLn2Pi);
            const double model_logdet = base_r.per_sample_log_prob[0] - prior;

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
            // LU determinant
            double logdet = 0.0;
            {
                std::vector<double> a = jac;
                for (size_t k = 0; k < D; ++k) {
                    size_t best = k;
                    for (size_t i = k + 1; i < D; ++i)
                        if (std::abs(a[i * D + k]) > std::abs(a[best * D + k])) best = i;
                    if (best != k)
                        for (size_t j = 0; j < D; ++j) std::swap(a[k * D + j], a[best * D + j]);
                    logdet += std::log(std::abs(a[k * D + k]));
                    for (size_t i = k + 1; i < D; ++i) {
                        const double f = a[i * D + k] / a[k * D + k];
                        for (size_t j = k + 1; j < D; ++j) a[i * D + j] -= f * a[k * D + j];
                    }
                }
            }
            worst = std::max(worst, std::abs(model_logdet - logdet));
        }
        expect(worst < 1e-3, "log-det vs Jacobian error " + std::to_string(worst));
        std::printf("  log-det: max |model - brute-force Jacobian| = %.3g over 10 inputs\n",
                    worst);
    }

    // full glow-desk gradient check in 64-bit, all parameters
    {
        FlowConfig fc = flow_preset("glow-desk");
        fc.precision = Precision::f64;
        FlowModel m = FlowModel::build(fc, SeededRng(31, 1));
        SyntheticSpec spec;
        spec.family = SynthFamily::correlated_field;
        spec.corr_length = 1.5;
        ImageBatch init = synth_generate(spec, 16, 32);
        dequantize(init, SeededRng(32, 1), Precision::f64);
        m.actnorm_init(init);
        SeededRng noise(33, 1);
        for (auto& p : m.params)
            for (double& v : p.data) v += noise.normal() * 0.05;

        ImageBatch batch = synth_generate(spec, 1, 34);
        dequantize(batch, SeededRng(34, 1), Precision::f64);
        const LogProbResult res = m.log_prob_and_gradients(batch);

        const double h = 1e-4;
        const size_t n_threads = resolve_thread_count(0);
        const size_t T = m.params.size();
        std::vector<double> worst_per_tensor(T, 0.0);
        std::vector<std::thread> pool;
        for (size_t w = 0; w < n_threads; ++w) {
            pool.emplace_back([&, w] {
                FlowModel local = m; // private copy to perturb
                for (size_t t = w; t < T; t += n_threads) {
                    double worst = 0.0;
                    for (size_t j = 0; j < local.params[t].size(); ++j) {
                        const double keep = local.params[t][j];
                        local.params[t][j] = keep + h;
                        const double lp = local.forward_log_prob(batch).total_log_prob;
                        local.params[t][j] = keep - h;
                        const double lm = local.forward_log_prob(batch).total_log_prob;
                        local.params[t][j] = keep;
                        const double fd = (lp - lm) / (2.0 * h);
                        const double an = res.per_layer_gradients[t][j];
                        const double scale = std::max({std::abs(fd), std::abs(an), 1e-3});
                        worst = std::max(worst, std::abs(fd - an) / scale);
                    }
                    worst_per_tensor[t] = worst;
                }
            });
        }
        for (auto& th : pool) th.join();
        const double worst =
            *std::max_element(worst_per_tensor.begin(), worst_per_tensor.end());
        expect(worst < 1e-3,
               "gradient max relative error " + std::to_string(worst) + " vs finite differences");
        std::printf(
            "  gradients: max relative error %.3g vs central differences over %zu parameters\n",
            worst, m.param_count());
    }
}

// ------------------------------------------------------------------
// Criterion 2: metric oracles

void criterion_2(const std::string&) {
    SeededRng rng(201, 1);
    for (int trial = 0; trial < 200; ++trial) {
        const size_t ni = 1 + size_t(rng.uniform_below(50));
        const size_t no = 1 + size_t(rng.uniform_below(50));
        std::vector<double> id(ni), ood(no);
        const bool tied = trial % 2 == 0;
        for (double& v : id) v = tied ? double(rng.uniform_below(6)) : rng.normal();
        for (double& v : ood) v = tied ? double(rng.uniform_below(6)) : rng.normal() + 0.3;
        uint64_t acc = 0;
        for (double o : ood)
            for (double i : id) acc += o > i ? 2 : (o == i ? 1 : 0);
        const double brute = double(acc) / (2.0 * double(ni) * double(no));
        expect(auroc(id, ood) == brute, "auroc differs from brute force");
    }
    std::printf("  auroc == brute force on 200 random instances (exact)\n");

    const std::vector<double> a{1.0, 2.0, 3.0};
    expect(ovl(a, a) == 1.0, "ovl identity");
    const std::vector<double> lo{0.0, 0.1}, hi{9.0, 9.1};
    expect(ovl(lo, hi) == 0.0, "ovl disjoint");
    const std::vector<double> u{0.1, 0.1, 1.1, 1.1}, v{1.1, 1.1, 2.1, 2.1};
    expect(std::abs(ovl(u, v, 3) - 0.5) < 1e-12, "ovl shared-bin value");
    expect(ovl(u, v, 3) == ovl(v, u, 3), "ovl symmetry");
    std::printf("  ovl identity/disjoint/symmetry cases hold\n");

    GaussianLayerStats st;
    st.mu = {3.0, -1.0};
    st.sigma2 = {1.0, 1.0};
    st.eps = 0.0;
    st.b = 1;
    st.checkpoint_id = "ck";
    LayerScoreVector at_mean;
    at_mean.values = {3.0, -1.0};
    at_mean.checkpoint_id = "ck";
    at_mean.b = 1;
    expect(std::abs(aggregate_score(at_mean, st).value - 1.8378770664093455) < 1e-12,
           "aggregate ln(2pi) case");
    GaussianLayerStats st1;
    st1.mu = {0.0};
    st1.sigma2 = {1.0};
    st1.eps = 0.0;
    st1.b = 1;
    st1.checkpoint_id = "ck";
    LayerScoreVector two;
    two.values = {2.0};
    two.checkpoint_id = "ck";
    two.b = 1;
    expect(std::abs(aggregate_score(two, st1).value - 2.9189385332046727) < 1e-12,
           "aggregate half(4+ln2pi) case");
    std::printf("  aggregate score closed forms match to 1e-12\n");
}

// ------------------------------------------------------------------
// Criterion 3: Neyman-Pearson ratio dominance

void criterion_3(const std::string&) {
    SeededRng rng(301, 1);
    size_t checked = 0;
    while (checked < 1000) {
        const size_t k = 2 + size_t(rng.uniform_below(5));
        DiscreteDistributionPair pair;
        pair.p.resize(k);
        pair.q.resize(k);
        double sp = 0, sq = 0;
        for (size_t i = 0; i < k; ++i) {
            pair.p[i] = rng.uniform01() < 0.15 ? 0.0 : -std::log(1.0 - rng.uniform01());
            pair.q[i] = rng.uniform01() < 0.15 ? 0.0 : -std::log(1.0 - rng.uniform01());
            sp += pair.p[i];
            sq += pair.q[i];
        }
        if (sp <= 0 || sq <= 0) continue;
        bool overlap = false;
        for (size_t i = 0; i < k; ++i) {
            pair.p[i] /= sp;
            pair.q[i] /= sq;
            if (pair.p[i] > 0 && pair.q[i] > 0) overlap = true;
        }
        if (!overlap) continue;
        const NpDemoResult r = np_lemma_demo(pair);
        expect(r.auc_ratio >= r.auc_true - 1e-12,
               "ratio statistic lost on a pair at trial " + std::to_string(checked));
        ++checked;
    }
    std::printf("  auc_ratio >= auc_true on 1000 seeded overlapping pairs\n");
}

// ------------------------------------------------------------------
// Criteria 4-6: desk-scale reproductions

void criterion_4(const std::string& workdir) {
    const std::string run = ensure_runW(workdir);
    const SweepResult res = run_eval_c4(run, workdir + "/evalW");
    const SweepRow& baseline = find_row(res, 10, 1, ScoreKind::negative_bpd_baseline);
    const SweepRow& gradient = find_row(res, 10, 5, ScoreKind::gradient_aggregate);
    std::printf("  white-noise ID vs flat-blob OOD @ epoch 10: baseline AUROC %.4f, "
                "gradient b=5 AUROC %.4f\n",
                baseline.auroc, gradient.auroc);
    expect(baseline.auroc < 0.5,
           "negative-BPD baseline AUROC " + std::to_string(baseline.auroc) +
               " is not inverted (< 0.5 required)");
    expect(gradient.auroc >= 0.90, "gradient-aggregate AUROC " +
                                       std::to_string(gradient.auroc) + " below 0.90");
}

void criterion_5(const std::string& workdir) {
    const std::string run = ensure_runF(workdir);
    const SweepResult res = run_eval_c5(run, workdir + "/evalF5");

    double best_early = -1.0, best_early_ovl = 0.0;
    for (size_t e : {size_t(1), size_t(5), size_t(10)}) {
        const SweepRow& r = find_row(res, e, 1, ScoreKind::gradient_aggregate);
        if (r.auroc > best_early) {
            best_early = r.auroc;
            best_early_ovl = r.ovl;
        }
    }
    const SweepRow& final_row = find_row(res, 50, 1, ScoreKind::gradient_aggregate);
    for (const auto& r : res.rows)
        std::printf("  flat-blob ID vs correlated-field OOD b=1 epoch %zu: AUROC %.4f OVL %.4f%s\n",
                    r.epoch, r.auroc, r.ovl, r.is_max ? " (max)" : "");
    expect(best_early >= final_row.auroc - 0.01,
           "best early AUROC " + std::to_string(best_early) + " trails final " +
               std::to_string(final_row.auroc) + " by more than 0.01");
    expect(best_early_ovl <= final_row.ovl + 0.02,
           "best-early OVL " + std::to_string(best_early_ovl) + " exceeds final " +
               std::to_string(final_row.ovl) + " + 0.02");
}

void criterion_6(const std::string& workdir) {
    const std::string run = ensure_runF(workdir);
    const SweepResult res = run_eval_c6(run, workdir + "/evalF6");
    for (const auto& r : res.rows) {
        std::printf("  flat-blob ID vs white-noise OOD b=5 epoch %zu: AUROC %.4f\n", r.epoch,
                    r.auroc);
        expect(r.auroc >= 0.99, "epoch " + std::to_string(r.epoch) + " AUROC " +
                                    std::to_string(r.auroc) + " below 0.99");
    }
}

// ------------------------------------------------------------------
// Criterion 7: determinism of criteria 4-6 under identical seeds

void criterion_7(const std::string& workdir) {
    const std::string runW = ensure_runW(workdir);
    const std::string runF = ensure_runF(workdir);
    run_eval_c4(runW, workdir + "/evalW");
    run_eval_c5(runF, workdir + "/evalF5");
    run_eval_c6(runF, workdir + "/evalF6");

    const std::string redo = workdir + "/rerun";
    fs::remove_all(redo);
    fs::create_directories(redo);
    const std::string runW2 = ensure_runW(workdir, "rerun/runW");
    const std::string runF2 = ensure_runF(workdir, "rerun/runF");
    run_eval_c4(runW2, redo + "/evalW");
    run_eval_c5(runF2, redo + "/evalF5");
    run_eval_c6(runF2, redo + "/evalF6");

    const std::vector<std::pair<std::string, std::string>> pairs = {
        {runW + "/loss.csv", runW2 + "/loss.csv"},
        {runF + "/loss.csv", runF2 + "/loss.csv"},
        {runW + "/checkpoints/epoch-0010.gfck", runW2 + "/checkpoints/epoch-0010.gfck"},
        {runF + "/checkpoints/epoch-0050.gfck", runF2 + "/checkpoints/epoch-0050.gfck"},
        {workdir + "/evalW/reports/sweep.csv", redo + "/evalW/reports/sweep.csv"},
        {workdir + "/evalF5/reports/sweep.csv", redo + "/evalF5/reports/sweep.csv"},
        {workdir + "/evalF6/reports/sweep.csv", redo + "/evalF6/reports/sweep.csv"},
        {workdir + "/evalW/scores-id.csv", redo + "/evalW/scores-id.csv"},
        {workdir + "/evalW/scores-ood.csv", redo + "/evalW/scores-ood.csv"},
    };
    for (const auto& [a, b] : pairs)
        expect(slurp(a) == slurp(b), "byte mismatch between " + a + " and " + b);
    std::printf("  %zu artifact pairs byte-identical across independent reruns\n",
                pairs.size());
}

// ------------------------------------------------------------------
// Criterion 8: protocol conformance

void criterion_8(const std::string& workdir) {
    const SweepOptions defaults;
    expect(defaults.n_eval == 1000, "default evaluation size is not 1000");
    expect(defaults.n_fit_obs == 1000, "default fit observation count is not 1000");

    // the criterion-4 sweep used exactly 1000 seeded samples per dataset
    const std::string run = ensure_runW(workdir);
    const SweepResult res = run_eval_c4(run, workdir + "/evalW");
    const SweepRow& g = find_row(res, 10, 5, ScoreKind::gradient_aggregate);
    expect(g.n_id == 200 && g.n_ood == 200,
           "b=5 grouping of 1000 samples should give 200 groups per dataset");
    const SweepRow& bl = find_row(res, 10, 1, ScoreKind::negative_bpd_baseline);
    expect(bl.n_id == 1000 && bl.n_ood == 1000, "baseline must score all 1000 samples");

    // remainders are dropped and reported
    const Checkpoint ckpt =
        load_checkpoint(run + "/checkpoints/" + checkpoint_filename(10));
    SplitSet ws = white_splits();
    ImageBatch odd_eval = sample_eval_set(ws.test, 1003, kSeedEval);
    dequantize(odd_eval, SeededRng(kSeedEval, 0).derive("score-dequant"));
    const size_t n_groups = std::min<size_t>(1000, ws.fit.size() / 5);
    ImageBatch fit_sample = sample_eval_set(ws.fit, n_groups * 5, kSeedEval);
    dequantize(fit_sample, SeededRng(kSeedEval, 0).derive("fit-dequant"));
    const ScoreBatchSpec spec{5, kSeedEval};
    const GaussianLayerStats stats = fit_stats_for_checkpoint(ckpt, fit_sample, spec, 1000);
    ScoreDatasetOptions so;
    so.spec = spec;
    ScoreTable t = score_dataset(ckpt, &stats, odd_eval, so);
    expect(t.rows.size() == 200, "1003 samples at b=5 should give 200 rows");
    expect(t.dropped == 3, "1003 samples at b=5 should drop and report 3");
    std::printf("  n_eval defaults to 1000; 1003 samples at b=5 -> 200 rows, 3 dropped\n");
}

} // namespace

int main(int argc, char** argv) {
    std::string workdir = "acceptance-work";
    int only = 0;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc)
            only = std::atoi(argv[++i]);
        else if (std::strcmp(argv[i], "--workdir") == 0 && i + 1 < argc)
            workdir = argv[++i];
        else {
            std::fprintf(stderr, "usage: acceptance [--criterion N] [--workdir DIR]\n");
            return 2;
        }
    }
    fs::create_directories(workdir);

    struct Entry {
        int number;
        const char* title;
        void (*fn)(const std::string&);
    };
    const Entry entries[] = {
        {1, "flow correctness (invertibility, Jacobian log-det, gradient oracle)", criterion_1},
        {2, "metric oracles (auroc brute force, ovl cases, aggregate closed forms)", criterion_2},
        {3, "Neyman-Pearson ratio dominance on 1000 discrete pairs", criterion_3},
        {4, "likelihood inversion and gradient rescue on white-noise ID", criterion_4},
        {5, "early checkpoints match or beat the converged model (b=1)", criterion_5},
        {6, "near-perfect GoF separation at b=5 from epoch 3 on", criterion_6},
        {7, "byte-identical reruns of criteria 4-6", criterion_7},
        {8, "protocol conformance (1000 eval samples, remainder reporting)", criterion_8},
    };

    int failures = 0;
    for (const Entry& e : entries) {
        if (only != 0 && e.number != only) continue;
        try {
            e.fn(workdir);
            std::printf("[PASS] criterion %d: %s\n", e.number, e.title);
        } catch (const Failure& f) {
            std::printf("[FAIL] criterion %d: %s -- %s\n", e.number, e.title, f.what.c_str());
            ++failures;
        } catch (const std::exception& ex) {
            std::printf("[FAIL] criterion %d: %s -- unexpected error: %s\n", e.number, e.title,
                        ex.what());
            ++failures;
        }
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
