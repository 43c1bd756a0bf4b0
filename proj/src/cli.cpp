#include "gradflow/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "gradflow/error.hpp"
#include "gradflow/evaluation.hpp"
#include "gradflow/flow.hpp"
#include "gradflow/scoring.hpp"
#include "gradflow/train.hpp"

namespace gradflow::cli {

namespace fs = std::filesystem;

namespace {

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), ErrorKind::io, "cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), ErrorKind::io, "cannot open " + path);
    f.write(text.data(), std::streamsize(text.size()));
    check(f.good(), ErrorKind::io, "write failed for " + path);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    size_t pos = 0;
    while (pos <= s.size()) {
        size_t next = s.find(sep, pos);
        if (next == std::string::npos) next = s.size();
        out.push_back(s.substr(pos, next - pos));
        pos = next + 1;
    }
    return out;
}

std::vector<size_t> parse_size_list(const std::string& s) {
    std::vector<size_t> out;
    for (const auto& part : split_on(s, ','))
        if (!part.empty()) out.push_back(std::stoull(part));
    return out;
}

} // namespace

std::shared_ptr<const DataSource> parse_data_spec(const std::string& spec,
                                                  uint64_t global_seed) {
    if (spec.rfind("idx:", 0) == 0) {
        const std::string path = spec.substr(4);
        check(!path.empty(), ErrorKind::config, "data spec: idx: needs a path");
        return DataSource::from_idx(path);
    }
    check(spec.rfind("synthetic:", 0) == 0, ErrorKind::config,
          "data spec must start with synthetic: or idx:, got " + spec);
    const auto parts = split_on(spec, ':');
    check(parts.size() >= 2 && !parts[1].empty(), ErrorKind::config,
          "data spec: missing synthetic family in " + spec);
    SyntheticSpec sy;
    if (parts[1] == "flat-blob")
        sy.family = SynthFamily::flat_blob;
    else if (parts[1] == "correlated-field")
        sy.family = SynthFamily::correlated_field;
    else if (parts[1] == "white-noise")
        sy.family = SynthFamily::white_noise;
    else
        fail(ErrorKind::config, "data spec: unknown synthetic family " + parts[1]);

    size_t n = 12000;
    bool have_seed = false;
    uint64_t seed = 0;
    for (size_t i = 2; i < parts.size(); ++i) {
        const auto kv = split_on(parts[i], '=');
        check(kv.size() == 2, ErrorKind::config, "data spec: bad key=value " + parts[i]);
        const std::string& k = kv[0];
        const std::string& v = kv[1];
        if (k == "n")
            n = std::stoull(v);
        else if (k == "levels")
            sy.levels = uint32_t(std::stoul(v));
        else if (k == "c")
            sy.channels = std::stoull(v);
        else if (k == "h")
            sy.height = std::stoull(v);
        else if (k == "w")
            sy.width = std::stoull(v);
        else if (k == "l")
            sy.corr_length = std::stod(v);
        else if (k == "sigma")
            sy.blob_noise_sigma = std::stod(v);
        else if (k == "seed") {
            seed = std::stoull(v);
            have_seed = true;
        } else {
            fail(ErrorKind::config, "data spec: unknown key " + k);
        }
    }
    if (!have_seed) seed = fnv1a64(sy.tag()) ^ global_seed;
    return DataSource::from_synth(sy, n, seed);
}

namespace {

// ------------------------------------------------------------------
// train

struct TrainCmd {
    std::string preset = "glow-desk";
    std::string data;
    std::string out_dir = "out";
    size_t epochs = 0; // 0 -> preset default
    uint64_t seed = 0;
    size_t batch_size = 0;   // 0 -> preset default
    double lr = -1.0;        // <0 -> preset default
    double weight_decay = -1.0;
    std::string checkpoint_epochs; // comma list; empty -> default sweep list
    std::string precision = "f32";
    double grad_clip = 50.0;
    size_t flow_blocks = 0, flow_steps = 0, flow_hidden = 0;
    std::string coupling; // empty -> preset
};

int do_train(const TrainCmd& cmd, const std::string& resolved) {
    check(!cmd.data.empty(), ErrorKind::config, "train: --data is required");
    auto source = parse_data_spec(cmd.data, cmd.seed);
    SplitSet splits = make_splits(source, default_split_fractions(), cmd.seed);

    FlowConfig fc = flow_preset(cmd.preset);
    if (source->synth) {
        fc.channels = source->synth->channels;
        fc.height = source->synth->height;
        fc.width = source->synth->width;
        fc.quantization_levels = source->synth->levels;
    } else {
        fc.channels = source->loaded.channels;
        fc.height = source->loaded.height;
        fc.width = source->loaded.width;
        fc.quantization_levels = source->loaded.levels;
    }
    if (cmd.flow_blocks) fc.blocks = cmd.flow_blocks;
    if (cmd.flow_steps) fc.steps_per_block = cmd.flow_steps;
    if (cmd.flow_hidden) fc.hidden_channels = cmd.flow_hidden;
    if (!cmd.coupling.empty())
        fc.coupling_kind =
            cmd.coupling == "dense" ? CouplingKind::dense : CouplingKind::convolutional;
    fc.precision = precision_from_name(cmd.precision);
    fc.validate();

    TrainConfig tc = train_preset(cmd.preset);
    if (cmd.epochs) tc.epochs = cmd.epochs;
    if (cmd.batch_size) tc.batch_size = cmd.batch_size;
    if (cmd.lr >= 0.0) tc.learning_rate = cmd.lr;
    if (cmd.weight_decay >= 0.0) tc.weight_decay = cmd.weight_decay;
    if (!cmd.checkpoint_epochs.empty()) tc.checkpoint_epochs = parse_size_list(cmd.checkpoint_epochs);
    tc.seed = cmd.seed;
    tc.grad_clip_norm = cmd.grad_clip > 0.0 ? std::optional<double>(cmd.grad_clip) : std::nullopt;
    tc.validate();

    fs::create_directories(cmd.out_dir + "/checkpoints");
    write_text_file(cmd.out_dir + "/resolved-config", resolved);

    FlowModel model = FlowModel::build(fc, SeededRng(cmd.seed, fnv1a64("model-init")));
    TrainResult result = train(std::move(model), splits.train, tc, [&](const Checkpoint& c) {
        save_checkpoint(c, cmd.out_dir + "/checkpoints/" + checkpoint_filename(c.epoch));
    });

    std::string loss_csv = "epoch;mean_bpd\n";
    char buf[64];
    for (size_t e = 0; e < result.bpd_history.size(); ++e) {
        std::snprintf(buf, sizeof buf, "%zu;%.17g\n", e + 1, result.bpd_history[e]);
        loss_csv += buf;
    }
    write_text_file(cmd.out_dir + "/loss.csv", loss_csv);

    if (result.status == TrainStatus::numeric_failure) {
        write_text_file(cmd.out_dir + "/numeric-failure.txt", result.failure_report + "\n");
        std::cerr << "gradflow train: " << result.failure_report << "\n";
        return kExitNumeric;
    }
    std::cout << "trained " << tc.epochs << " epochs; " << result.checkpoints.size()
              << " checkpoints in " << cmd.out_dir << "/checkpoints\n";
    return kExitOk;
}

// ------------------------------------------------------------------
// score

struct ScoreCmd {
    std::string checkpoint;
    std::string fit_data, test_data;
    std::string out_dir = "out";
    size_t b = 1;
    std::string kind = "gradient-aggregate";
    uint64_t seed = 0;
    size_t n_eval = 1000;
    size_t n_fit = 1000;
    double eps = kDefaultStatsEps;
    bool fit_equals_test = false;
    bool with_layer_scores = false;
    std::string sigma_convention = "direct";
    std::string grouping = "tensor";
    std::string stats_in;
    size_t threads = 0;
};

int do_score(const ScoreCmd& cmd, const std::string& resolved) {
    check(!cmd.checkpoint.empty(), ErrorKind::config, "score: --checkpoint is required");
    check(!cmd.fit_data.empty() && !cmd.test_data.empty(), ErrorKind::config,
          "score: --fit-data and --test-data are required");
    const ScoreKind kind = score_kind_from_name(cmd.kind);
    const SigmaConvention conv = cmd.sigma_convention == "squared"
                                     ? SigmaConvention::variance_squared
                                     : SigmaConvention::variance_direct;
    const LayerGrouping grouping =
        cmd.grouping == "sublayer" ? LayerGrouping::per_sublayer : LayerGrouping::per_tensor;

    Checkpoint ckpt = load_checkpoint(cmd.checkpoint);
    SeededRng base(cmd.seed, 0);

    auto fit_source = parse_data_spec(cmd.fit_data, cmd.seed);
    SplitSet fit_splits = make_splits(fit_source, default_split_fractions(), cmd.seed);
    const DatasetHandle& fit_split = cmd.fit_equals_test ? fit_splits.test : fit_splits.fit;

    auto test_source = parse_data_spec(cmd.test_data, cmd.seed);
    SplitSet test_splits = make_splits(test_source, default_split_fractions(), cmd.seed);

    ImageBatch eval_set = sample_eval_set(test_splits.test, cmd.n_eval, cmd.seed);
    dequantize(eval_set, base.derive("score-dequant"));

    fs::create_directories(cmd.out_dir + "/scores");
    write_text_file(cmd.out_dir + "/resolved-config", resolved);

    char tag[160];
    std::snprintf(tag, sizeof tag, "epoch%04zu-b%zu-%s", ckpt.epoch, cmd.b,
                  score_kind_name(kind));

    const bool needs_stats =
        kind == ScoreKind::gradient_aggregate || kind == ScoreKind::diagonal_preconditioned;
    ScoreBatchSpec spec{cmd.b, cmd.seed};

    std::vector<Tensor> fisher;
    GaussianLayerStats stats;
    if (needs_stats) {
        if (kind == ScoreKind::diagonal_preconditioned) {
            const size_t n_fisher = std::min(fit_split.size(), cmd.n_fit);
            ImageBatch fset = sample_eval_set(fit_split, n_fisher, cmd.seed);
            dequantize(fset, base.derive("fisher-dequant"));
            fisher = estimate_fisher_diag(ckpt.model, fset);
        }
        if (!cmd.stats_in.empty()) {
            stats = stats_from_json(read_text_file(cmd.stats_in));
        } else {
            const size_t groups_avail = fit_split.size() / cmd.b;
            const size_t n_groups = std::min(cmd.n_fit, groups_avail);
            check(n_groups >= 2, ErrorKind::insufficient_data,
                  "score: fit split too small for b=" + std::to_string(cmd.b));
            ImageBatch fit_sample = sample_eval_set(fit_split, n_groups * cmd.b, cmd.seed);
            dequantize(fit_sample, base.derive("fit-dequant"));
            stats = fit_stats_for_checkpoint(ckpt, fit_sample, spec, cmd.n_fit, cmd.eps,
                                             grouping, cmd.threads,
                                             fisher.empty() ? nullptr : &fisher);
            write_text_file(cmd.out_dir + "/scores/stats-" + tag + ".json",
                            stats_to_json(stats));
        }
    }

    ScoreDatasetOptions so;
    so.spec = spec;
    so.kind = kind;
    so.convention = conv;
    so.keep_layer_scores = cmd.with_layer_scores;
    so.threads = cmd.threads;
    ScoreTable table = score_dataset(ckpt, needs_stats ? &stats : nullptr, eval_set, so,
                                     fisher.empty() ? nullptr : &fisher, grouping);

    const std::string csv_path = cmd.out_dir + "/scores/scores-" +
                                 sanitize_name(test_source->name) + "-" + tag + ".csv";
    write_text_file(csv_path, score_table_csv(table));
    std::cout << "scored " << table.rows.size() << " groups (b=" << cmd.b << ", "
              << table.dropped << " samples dropped) -> " << csv_path << "\n";
    return kExitOk;
}

// ------------------------------------------------------------------
// eval / hist

EvalPairReport make_pair_report(const std::string& id_csv, const std::string& ood_csv,
                                size_t bins) {
    ScoreTable idt = score_table_from_csv(read_text_file(id_csv));
    ScoreTable oodt = score_table_from_csv(read_text_file(ood_csv));
    check(!idt.rows.empty() && !oodt.rows.empty(), ErrorKind::insufficient_data,
          "eval: empty score tables");
    std::vector<double> id_s, ood_s;
    for (const auto& r : idt.rows) id_s.push_back(r.score);
    for (const auto& r : oodt.rows) ood_s.push_back(r.score);

    EvalPairReport rep;
    rep.id_dataset = fs::path(id_csv).stem().string();
    rep.ood_dataset = fs::path(ood_csv).stem().string();
    rep.checkpoint_epoch = idt.rows.front().checkpoint_epoch;
    rep.b = idt.rows.front().b;
    rep.kind = idt.rows.front().kind;
    rep.auroc = auroc(id_s, ood_s);
    rep.ovl = ovl(id_s, ood_s, bins);
    rep.n_id = id_s.size();
    rep.n_ood = ood_s.size();
    double lo = std::min(*std::min_element(id_s.begin(), id_s.end()),
                         *std::min_element(ood_s.begin(), ood_s.end()));
    double hi = std::max(*std::max_element(id_s.begin(), id_s.end()),
                         *std::max_element(ood_s.begin(), ood_s.end()));
    if (lo == hi) {
        std::cerr << "gradflow: warning: all scores identical; degenerate histogram\n";
        hi = lo + 1.0;
    }
    Histogram hid = histogram(id_s, bins, {lo, hi});
    Histogram hood = histogram(ood_s, bins, {lo, hi});
    rep.hist_edges = hid.edges;
    rep.id_counts = hid.counts;
    rep.ood_counts = hood.counts;
    return rep;
}

// ------------------------------------------------------------------
// npdemo

std::vector<double> read_number_column(const std::string& path, size_t column) {
    std::istringstream in(read_text_file(path));
    std::vector<double> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        double v = 0.0;
        for (size_t c = 0; c <= column; ++c)
            check(bool(ls >> v), ErrorKind::format,
                  "expected numeric column " + std::to_string(column) + " in " + path);
        out.push_back(v);
    }
    check(!out.empty(), ErrorKind::format, "no values found in " + path);
    return out;
}

} // namespace

// ------------------------------------------------------------------

int run(int argc, const char* const* argv) {
    CLI::App app{"GLOW-style flow training and layer-wise gradient OOD scoring"};
    app.require_subcommand(1);
    app.set_config("--config", "",
                   "Flat key-value config file (dotted keys, e.g. train.data=...)");

    // train
    TrainCmd tc;
    auto* train_cmd = app.add_subcommand("train", "Train a flow and write epoch checkpoints");
    train_cmd->add_option("--preset", tc.preset, "Flow preset: glow-desk | glow-1ch | glow-3ch");
    train_cmd->add_option("--data", tc.data, "Dataset spec (synthetic:... | idx:path)");
    train_cmd->add_option("--out", tc.out_dir, "Output directory");
    train_cmd->add_option("--epochs", tc.epochs, "Total epochs (0 = preset default)");
    train_cmd->add_option("--seed", tc.seed, "Master seed");
    train_cmd->add_option("--batch-size", tc.batch_size, "Batch size (0 = preset default)");
    train_cmd->add_option("--lr", tc.lr, "Learning rate (<0 = preset default)");
    train_cmd->add_option("--weight-decay", tc.weight_decay, "Decoupled weight decay");
    train_cmd->add_option("--checkpoint-epochs", tc.checkpoint_epochs,
                          "Comma list; empty = default sweep list");
    train_cmd->add_option("--precision", tc.precision, "f32 | f64");
    train_cmd->add_option("--grad-clip", tc.grad_clip, "Global grad-norm clip (<=0 disables)");
    train_cmd->add_option("--flow-blocks", tc.flow_blocks, "Override preset blocks");
    train_cmd->add_option("--flow-steps", tc.flow_steps, "Override preset steps per block");
    train_cmd->add_option("--flow-hidden", tc.flow_hidden, "Override preset hidden channels");
    train_cmd->add_option("--coupling", tc.coupling, "convolutional | dense");

    // score
    ScoreCmd sc;
    auto* score_cmd = app.add_subcommand("score", "Fit layer statistics and score a dataset");
    score_cmd->add_option("--checkpoint", sc.checkpoint, "Checkpoint file");
    score_cmd->add_option("--fit-data", sc.fit_data, "ID dataset spec (stats come from its fit split)");
    score_cmd->add_option("--test-data", sc.test_data, "Dataset to score (its test split)");
    score_cmd->add_option("--out", sc.out_dir, "Output directory");
    score_cmd->add_option("--b", sc.b, "Group size (1 or 5 in the reference protocol)");
    score_cmd->add_option("--kind", sc.kind,
                          "gradient-aggregate | nll-baseline | diagonal-preconditioned");
    score_cmd->add_option("--seed", sc.seed, "Master seed");
    score_cmd->add_option("--n-eval", sc.n_eval, "Evaluation samples per dataset");
    score_cmd->add_option("--n-fit", sc.n_fit, "Fit score observations");
    score_cmd->add_option("--eps", sc.eps, "Stats stability constant");
    score_cmd->add_flag("--fit-equals-test", sc.fit_equals_test,
                        "Fit stats on the test split (reference protocol)");
    score_cmd->add_flag("--with-layer-scores", sc.with_layer_scores,
                        "Keep per-layer scores in the CSV");
    score_cmd->add_option("--sigma-convention", sc.sigma_convention, "direct | squared");
    score_cmd->add_option("--grouping", sc.grouping, "tensor | sublayer");
    score_cmd->add_option("--stats-in", sc.stats_in, "Reuse a stats file instead of fitting");
    score_cmd->add_option("--threads", sc.threads, "Worker threads (0 = auto)");

    // eval
    std::string ev_id, ev_ood, ev_out = "out";
    size_t ev_bins = 100;
    auto* eval_cmd = app.add_subcommand("eval", "AUROC/OVL report from two score CSVs");
    eval_cmd->add_option("--id-scores", ev_id, "ID score CSV")->required();
    eval_cmd->add_option("--ood-scores", ev_ood, "OOD score CSV")->required();
    eval_cmd->add_option("--out", ev_out, "Output directory");
    eval_cmd->add_option("--bins", ev_bins, "Histogram bins");

    // sweep
    std::string sw_run_dir, sw_id, sw_out = "out";
    std::vector<std::string> sw_oods;
    std::string sw_epochs, sw_bs = "1,5", sw_kinds = "gradient-aggregate";
    size_t sw_neval = 1000, sw_nfit = 1000, sw_bins = 100, sw_threads = 0;
    double sw_eps = kDefaultStatsEps;
    uint64_t sw_seed = 0;
    bool sw_fet = false;
    std::string sw_sigma = "direct", sw_grouping = "tensor";
    auto* sweep_cmd = app.add_subcommand("sweep", "Evaluate checkpoints across epochs and OOD sets");
    sweep_cmd->add_option("--run-dir", sw_run_dir, "Training output directory")->required();
    sweep_cmd->add_option("--id-data", sw_id, "ID dataset spec")->required();
    sweep_cmd->add_option("--ood-data", sw_oods, "OOD dataset spec (repeatable)")->required();
    sweep_cmd->add_option("--epochs", sw_epochs,
                          "Comma list; default 1,10,20,30,40,50,70,80,100,150");
    sweep_cmd->add_option("--b", sw_bs, "Comma list of group sizes");
    sweep_cmd->add_option("--kinds", sw_kinds, "Comma list of score kinds");
    sweep_cmd->add_option("--out", sw_out, "Output directory");
    sweep_cmd->add_option("--n-eval", sw_neval, "Evaluation samples per dataset");
    sweep_cmd->add_option("--n-fit", sw_nfit, "Fit score observations");
    sweep_cmd->add_option("--eps", sw_eps, "Stats stability constant");
    sweep_cmd->add_option("--bins", sw_bins, "Histogram bins");
    sweep_cmd->add_option("--seed", sw_seed, "Master seed");
    sweep_cmd->add_flag("--fit-equals-test", sw_fet, "Fit stats on the ID test split");
    sweep_cmd->add_option("--sigma-convention", sw_sigma, "direct | squared");
    sweep_cmd->add_option("--grouping", sw_grouping, "tensor | sublayer");
    sweep_cmd->add_option("--threads", sw_threads, "Worker threads (0 = auto)");

    // hist
    std::string h_id, h_ood, h_out = "hist.svg";
    size_t h_bins = 100;
    auto* hist_cmd = app.add_subcommand("hist", "Overlaid score histogram SVG");
    hist_cmd->add_option("--id-scores", h_id, "ID score CSV")->required();
    hist_cmd->add_option("--ood-scores", h_ood, "OOD score CSV")->required();
    hist_cmd->add_option("--out", h_out, "Output SVG path");
    hist_cmd->add_option("--bins", h_bins, "Histogram bins");

    // sample
    std::string sm_ckpt, sm_out = "samples.pgm";
    size_t sm_n = 16, sm_cols = 0;
    double sm_temp = 1.0;
    uint64_t sm_seed = 0;
    auto* sample_cmd = app.add_subcommand("sample", "Draw samples into a PGM grid");
    sample_cmd->add_option("--checkpoint", sm_ckpt, "Checkpoint file")->required();
    sample_cmd->add_option("--n", sm_n, "Number of samples");
    sample_cmd->add_option("--temperature", sm_temp, "Prior temperature");
    sample_cmd->add_option("--seed", sm_seed, "Sampling seed");
    sample_cmd->add_option("--cols", sm_cols, "Grid columns (0 = square-ish)");
    sample_cmd->add_option("--out", sm_out, "Output PGM path");

    // npdemo
    std::string np_p, np_q, np_pq;
    auto* np_cmd = app.add_subcommand("npdemo", "Neyman-Pearson ratio AUC demonstration");
    np_cmd->add_option("--p", np_p, "P probabilities (one per line)");
    np_cmd->add_option("--q", np_q, "Q probabilities (one per line)");
    np_cmd->add_option("--pq", np_pq, "Two-column file: P and Q");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*train_cmd) return do_train(tc, app.config_to_str(true, false));
        if (*score_cmd) return do_score(sc, app.config_to_str(true, false));
        if (*eval_cmd) {
            EvalPairReport rep = make_pair_report(ev_id, ev_ood, ev_bins);
            fs::create_directories(ev_out + "/reports");
            write_text_file(ev_out + "/reports/eval-" + sanitize_name(rep.id_dataset) + "-vs-" +
                                sanitize_name(rep.ood_dataset) + ".json",
                            report_to_json(rep));
            std::printf("auroc=%.6f ovl=%.6f n_id=%zu n_ood=%zu\n", rep.auroc, rep.ovl,
                        rep.n_id, rep.n_ood);
            return kExitOk;
        }
        if (*sweep_cmd) {
            SweepOptions opts;
            opts.epochs = sw_epochs.empty()
                              ? std::vector<size_t>{1, 10, 20, 30, 40, 50, 70, 80, 100, 150}
                              : parse_size_list(sw_epochs);
            opts.b_list = parse_size_list(sw_bs);
            opts.kinds.clear();
            for (const auto& k : split_on(sw_kinds, ','))
                if (!k.empty()) opts.kinds.push_back(score_kind_from_name(k));
            check(!opts.kinds.empty(), ErrorKind::config, "sweep: no kinds given");
            opts.n_eval = sw_neval;
            opts.n_fit_obs = sw_nfit;
            opts.stats_eps = sw_eps;
            opts.bins = sw_bins;
            opts.seed = sw_seed;
            opts.fit_equals_test = sw_fet;
            opts.convention = sw_sigma == "squared" ? SigmaConvention::variance_squared
                                                    : SigmaConvention::variance_direct;
            opts.grouping = sw_grouping == "sublayer" ? LayerGrouping::per_sublayer
                                                      : LayerGrouping::per_tensor;
            opts.threads = sw_threads;
            opts.out_dir = sw_out;

            auto id_source = parse_data_spec(sw_id, sw_seed);
            SplitSet id_splits = make_splits(id_source, default_split_fractions(), sw_seed);
            std::vector<SplitSet> ood_splits;
            for (const auto& spec : sw_oods) {
                auto src = parse_data_spec(spec, sw_seed);
                ood_splits.push_back(make_splits(src, default_split_fractions(), sw_seed));
            }
            fs::create_directories(sw_out);
            write_text_file(sw_out + "/resolved-config", app.config_to_str(true, false));
            SweepResult res = sweep_report(sw_run_dir, id_splits, ood_splits, opts);
            std::printf("sweep: %zu rows -> %s/reports/sweep.csv\n", res.rows.size(),
                        sw_out.c_str());
            if (!res.missing_checkpoints.empty()) {
                for (const auto& m : res.missing_checkpoints)
                    std::cerr << "sweep: missing checkpoint skipped: " << m << "\n";
                return kExitUsage;
            }
            return kExitOk;
        }
        if (*hist_cmd) {
            EvalPairReport rep = make_pair_report(h_id, h_ood, h_bins);
            if (fs::path(h_out).has_parent_path())
                fs::create_directories(fs::path(h_out).parent_path());
            write_text_file(h_out, histogram_svg(rep));
            std::printf("wrote %s\n", h_out.c_str());
            return kExitOk;
        }
        if (*sample_cmd) {
            Checkpoint ckpt = load_checkpoint(sm_ckpt);
            SeededRng rng(sm_seed, fnv1a64("sample"));
            Tensor z = ckpt.model.sample_latent(sm_n, rng);
            ImageBatch imgs = ckpt.model.inverse(z, sm_temp);
            const size_t cols = sm_cols ? sm_cols : size_t(std::ceil(std::sqrt(double(sm_n))));
            if (fs::path(sm_out).has_parent_path())
                fs::create_directories(fs::path(sm_out).parent_path());
            write_pgm_grid(imgs, cols, sm_out);
            std::printf("wrote %s (%zu samples, temperature %g)\n", sm_out.c_str(), sm_n,
                        sm_temp);
            return kExitOk;
        }
        if (*np_cmd) {
            DiscreteDistributionPair pair;
            if (!np_pq.empty()) {
                pair.p = read_number_column(np_pq, 0);
                pair.q = read_number_column(np_pq, 1);
            } else {
                check(!np_p.empty() && !np_q.empty(), ErrorKind::config,
                      "npdemo: give --p and --q, or --pq");
                pair.p = read_number_column(np_p, 0);
                pair.q = read_number_column(np_q, 0);
            }
            NpDemoResult r = np_lemma_demo(pair);
            std::printf("auc_true=%.10g auc_ratio=%.10g C=%.10g\n", r.auc_true, r.auc_ratio,
                        r.C);
            std::printf("ratio statistic %s the true-density statistic\n",
                        r.auc_ratio > r.auc_true
                            ? "beats"
                            : (r.auc_ratio == r.auc_true ? "ties" : "trails"));
            return kExitOk;
        }
    } catch (const Error& e) {
        std::cerr << "gradflow: " << error_kind_name(e.kind()) << " error: " << e.what()
                  << "\n";
        return e.kind() == ErrorKind::numeric ? kExitNumeric : kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "gradflow: error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

} // namespace gradflow::cli
