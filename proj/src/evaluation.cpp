#include "gradflow/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>

#include <nlohmann/json.hpp>

#include "gradflow/error.hpp"
#include "gradflow/train.hpp"

namespace gradflow {

using json = nlohmann::json;

double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
    check(!id_scores.empty() && !ood_scores.empty(), ErrorKind::insufficient_data,
          "auroc: both score sets must be non-empty");
    std::vector<double> id(id_scores.begin(), id_scores.end());
    std::vector<double> ood(ood_scores.begin(), ood_scores.end());
    std::sort(id.begin(), id.end());
    std::sort(ood.begin(), ood.end());
    // 2*(#id below) + (#id tied) per OOD score keeps the arithmetic integral,
    // so the result matches brute-force pair counting exactly.
    uint64_t acc = 0;
    size_t lt = 0, le = 0;
    for (double v : ood) {
        while (lt < id.size() && id[lt] < v) ++lt;
        if (le < lt) le = lt;
        while (le < id.size() && id[le] <= v) ++le;
        acc += 2 * uint64_t(lt) + uint64_t(le - lt);
    }
    return double(acc) / (2.0 * double(id.size()) * double(ood.size()));
}

Histogram histogram(std::span<const double> scores, size_t bins,
                    std::pair<double, double> range) {
    check(!scores.empty(), ErrorKind::insufficient_data, "histogram: empty scores");
    check(bins >= 1, ErrorKind::invalid_argument, "histogram: bins must be >= 1");
    check(range.second >= range.first, ErrorKind::invalid_argument,
          "histogram: range upper bound below lower bound");
    Histogram h;
    h.counts.assign(bins, 0);
    h.edges.resize(bins + 1);
    const double span = range.second - range.first;
    for (size_t i = 0; i <= bins; ++i)
        h.edges[i] = range.first + span * double(i) / double(bins);
    for (double v : scores) {
        long b = span > 0.0 ? long(std::floor((v - range.first) / span * double(bins))) : 0;
        if (b < 0) b = 0;
        if (b >= long(bins)) b = long(bins) - 1;
        h.counts[size_t(b)] += 1;
    }
    return h;
}

double ovl(std::span<const double> id_scores, std::span<const double> ood_scores, size_t bins) {
    check(!id_scores.empty() && !ood_scores.empty(), ErrorKind::insufficient_data,
          "ovl: both score sets must be non-empty");
    check(bins >= 1, ErrorKind::invalid_argument, "ovl: bins must be >= 1");
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (double v : id_scores) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : ood_scores) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (lo == hi) return 1.0; // all scores identical: single degenerate bin
    const Histogram hid = histogram(id_scores, bins, {lo, hi});
    const Histogram hood = histogram(ood_scores, bins, {lo, hi});
    double acc = 0.0;
    for (size_t i = 0; i < bins; ++i) {
        const double p = double(hid.counts[i]) / double(id_scores.size());
        const double q = double(hood.counts[i]) / double(ood_scores.size());
        acc += std::min(p, q);
    }
    return acc;
}

// ------------------------------------------------------------------

void DiscreteDistributionPair::validate() const {
    check(p.size() == q.size() && !p.empty(), ErrorKind::domain,
          "distribution pair: supports must be non-empty and equal-sized");
    double sp = 0.0, sq = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        check(p[i] >= 0.0 && q[i] >= 0.0, ErrorKind::domain,
              "distribution pair: negative probability");
        sp += p[i];
        sq += q[i];
    }
    check(std::abs(sp - 1.0) <= 1e-12 && std::abs(sq - 1.0) <= 1e-12, ErrorKind::domain,
          "distribution pair: probabilities must sum to 1");
    // disjoint supports are allowed: the ratio statistic is +inf on P's side
    // and both AUCs collapse to 1
}

NpDemoResult np_lemma_demo(const DiscreteDistributionPair& pair) {
    pair.validate();
    const size_t k = pair.p.size();
    std::vector<double> phi_ratio(k, 0.0);
    double C = 0.0;
    for (size_t i = 0; i < k; ++i) {
        if (pair.q[i] > 0.0) {
            phi_ratio[i] = pair.p[i] / pair.q[i];
            if (pair.p[i] > 0.0) C += pair.p[i] / pair.q[i];
        } else if (pair.p[i] > 0.0) {
            phi_ratio[i] = std::numeric_limits<double>::infinity();
        }
    }
    auto auc_of = [&](auto phi) {
        double acc = 0.0;
        for (size_t i = 0; i < k; ++i) {
            if (pair.p[i] <= 0.0) continue;
            for (size_t j = 0; j < k; ++j) {
                if (pair.q[j] <= 0.0) continue;
                const double w = pair.p[i] * pair.q[j];
                if (phi(i) > phi(j))
                    acc += w;
                else if (phi(i) == phi(j))
                    acc += 0.5 * w;
            }
        }
        return acc;
    };
    NpDemoResult r;
    r.auc_true = auc_of([&](size_t i) { return pair.p[i]; });
    r.auc_ratio = auc_of([&](size_t i) { return phi_ratio[i]; });
    r.C = C;
    return r;
}

// ------------------------------------------------------------------
// Reports and figures

std::string sanitize_name(const std::string& name) {
    std::string out;
    for (char c : name) {
        if (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_')
            out += c;
        else if (!out.empty() && out.back() != '-')
            out += '-';
    }
    while (!out.empty() && out.back() == '-') out.pop_back();
    return out.empty() ? "unnamed" : out;
}

std::string checkpoint_filename(size_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch-%04zu.gfck", epoch);
    return buf;
}

std::string report_to_json(const EvalPairReport& r) {
    json j;
    j["schema_version"] = 1;
    j["id"] = r.id_dataset;
    j["ood"] = r.ood_dataset;
    j["epoch"] = r.checkpoint_epoch;
    j["b"] = r.b;
    j["kind"] = score_kind_name(r.kind);
    j["auroc"] = r.auroc;
    j["ovl"] = r.ovl;
    j["n_id"] = r.n_id;
    j["n_ood"] = r.n_ood;
    j["histogram"] = {{"edges", r.hist_edges},
                      {"id_counts", r.id_counts},
                      {"ood_counts", r.ood_counts}};
    return j.dump(2) + "\n";
}

std::string histogram_svg(const EvalPairReport& r) {
    const double W = 640, H = 420;
    const double x0 = 60, x1 = 620, y0 = 370, y1 = 40;
    const size_t bins = r.id_counts.size();
    uint64_t cmax = 1;
    for (uint64_t c : r.id_counts) cmax = std::max(cmax, c);
    for (uint64_t c : r.ood_counts) cmax = std::max(cmax, c);

    std::string svg;
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" "
                  "viewBox=\"0 0 %g %g\">\n<rect width=\"%g\" height=\"%g\" fill=\"white\"/>\n",
                  W, H, W, H, W, H);
    svg += buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%g\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">%s vs %s "
                  "| epoch %zu | b=%zu | %s | AUROC=%.4f OVL=%.4f</text>\n",
                  x0, r.id_dataset.c_str(), r.ood_dataset.c_str(), r.checkpoint_epoch, r.b,
                  score_kind_name(r.kind), r.auroc, r.ovl);
    svg += buf;

    auto bars = [&](const std::vector<uint64_t>& counts, const char* color) {
        for (size_t i = 0; i < bins; ++i) {
            if (counts[i] == 0) continue;
            const double bx = x0 + (x1 - x0) * double(i) / double(bins);
            const double bw = (x1 - x0) / double(bins);
            const double bh = (y0 - y1) * double(counts[i]) / double(cmax);
            std::snprintf(buf, sizeof buf,
                          "<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" "
                          "fill=\"%s\" fill-opacity=\"0.55\"/>\n",
                          bx, y0 - bh, bw, bh, color);
            svg += buf;
        }
    };
    bars(r.id_counts, "#4878a8");
    bars(r.ood_counts, "#d2691e");

    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n"
                  "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n",
                  x0, y0, x1, y0, x0, y0, x0, y1);
    svg += buf;
    const double lo = r.hist_edges.empty() ? 0.0 : r.hist_edges.front();
    const double hi = r.hist_edges.empty() ? 0.0 : r.hist_edges.back();
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"12\">%.6g</text>\n"
                  "<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"12\" "
                  "text-anchor=\"end\">%.6g</text>\n"
                  "<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"12\">max %llu</text>\n",
                  x0, y0 + 18, lo, x1, y0 + 18, hi, x0 + 4, y1 + 12,
                  static_cast<unsigned long long>(cmax));
    svg += buf;
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%g\" y=\"%g\" width=\"12\" height=\"12\" fill=\"#4878a8\" "
                  "fill-opacity=\"0.55\"/><text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" "
                  "font-size=\"12\">ID</text>\n"
                  "<rect x=\"%g\" y=\"%g\" width=\"12\" height=\"12\" fill=\"#d2691e\" "
                  "fill-opacity=\"0.55\"/><text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" "
                  "font-size=\"12\">OOD</text>\n",
                  x1 - 120.0, y1, x1 - 104.0, y1 + 11.0, x1 - 60.0, y1, x1 - 44.0, y1 + 11.0);
    svg += buf;
    svg += "</svg>\n";
    return svg;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "id;ood;epoch;b;kind;auroc;ovl;n_id;n_ood;is_max\n";
    char buf[64];
    for (const auto& r : rows) {
        out += r.id + ";" + r.ood + ";" + std::to_string(r.epoch) + ";" + std::to_string(r.b) +
               ";" + score_kind_name(r.kind) + ";";
        std::snprintf(buf, sizeof buf, "%.17g", r.auroc);
        out += buf;
        out += ';';
        std::snprintf(buf, sizeof buf, "%.17g", r.ovl);
        out += buf;
        out += ';' + std::to_string(r.n_id) + ';' + std::to_string(r.n_ood) + ';' +
               (r.is_max ? "1" : "0") + '\n';
    }
    return out;
}

// ------------------------------------------------------------------

namespace {

std::vector<double> row_scores(const ScoreTable& t) {
    std::vector<double> out;
    out.reserve(t.rows.size());
    for (const auto& r : t.rows) out.push_back(r.score);
    return out;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), ErrorKind::io, "cannot open " + path);
    f.write(text.data(), std::streamsize(text.size()));
    check(f.good(), ErrorKind::io, "write failed for " + path);
}

} // namespace

SweepResult sweep_report(const std::string& run_dir, const SplitSet& id_splits,
                         const std::vector<SplitSet>& ood_splits, const SweepOptions& opts) {
    check(!opts.epochs.empty(), ErrorKind::config, "sweep: no epochs requested");
    check(!opts.b_list.empty(), ErrorKind::config, "sweep: no group sizes requested");
    check(!opts.kinds.empty(), ErrorKind::config, "sweep: no score kinds requested");
    check(!ood_splits.empty(), ErrorKind::config, "sweep: no OOD datasets given");

    SeededRng base(opts.seed, 0);
    const uint64_t eval_seed = opts.seed;
    const uint64_t fit_seed = opts.seed;

    const DatasetHandle& fit_split = opts.fit_equals_test ? id_splits.test : id_splits.fit;
    const std::string id_name = id_splits.test.source->name;

    // One eval set per dataset (n_eval seeded samples), one shared noise
    // stream so ID/OOD comparisons are not noise-confounded.
    ImageBatch id_eval = sample_eval_set(id_splits.test, opts.n_eval, eval_seed);
    dequantize(id_eval, base.derive("score-dequant"));
    std::vector<ImageBatch> ood_evals;
    std::vector<std::string> ood_names;
    for (const auto& ood : ood_splits) {
        ImageBatch e = sample_eval_set(ood.test, opts.n_eval, eval_seed);
        dequantize(e, base.derive("score-dequant"));
        ood_evals.push_back(std::move(e));
        ood_names.push_back(ood.test.source->name);
    }

    SweepResult result;
    const std::string ckpt_dir = run_dir + "/checkpoints/";

    const bool wants_diagonal =
        std::count(opts.kinds.begin(), opts.kinds.end(), ScoreKind::diagonal_preconditioned) > 0;
    const bool wants_baseline =
        std::count(opts.kinds.begin(), opts.kinds.end(), ScoreKind::negative_bpd_baseline) > 0;

    std::vector<size_t> epochs = opts.epochs;
    std::sort(epochs.begin(), epochs.end());
    epochs.erase(std::unique(epochs.begin(), epochs.end()), epochs.end());

    for (size_t epoch : epochs) {
        const std::string path = ckpt_dir + checkpoint_filename(epoch);
        if (!std::filesystem::exists(path)) {
            result.missing_checkpoints.push_back(path);
            continue;
        }
        const Checkpoint ckpt = load_checkpoint(path);

        std::vector<Tensor> fisher;
        if (wants_diagonal) {
            const size_t n_fisher = std::min(fit_split.size(), opts.n_fit_obs);
            ImageBatch fset = sample_eval_set(fit_split, n_fisher, fit_seed);
            dequantize(fset, base.derive("fisher-dequant"));
            fisher = estimate_fisher_diag(ckpt.model, fset);
        }

        auto eval_pair = [&](const std::string& ood_name, std::span<const double> id_s,
                             std::span<const double> ood_s, size_t b, ScoreKind kind) {
            EvalPairReport rep;
            rep.id_dataset = id_name;
            rep.ood_dataset = ood_name;
            rep.checkpoint_epoch = epoch;
            rep.b = b;
            rep.kind = kind;
            rep.auroc = auroc(id_s, ood_s);
            rep.ovl = ovl(id_s, ood_s, opts.bins);
            rep.n_id = id_s.size();
            rep.n_ood = ood_s.size();
            double lo = *std::min_element(id_s.begin(), id_s.end());
            double hi = *std::max_element(id_s.begin(), id_s.end());
            for (double v : ood_s) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            if (lo == hi) hi = lo + 1.0;
            Histogram hid = histogram(id_s, opts.bins, {lo, hi});
            Histogram hood = histogram(ood_s, opts.bins, {lo, hi});
            rep.hist_edges = hid.edges;
            rep.id_counts = hid.counts;
            rep.ood_counts = hood.counts;

            SweepRow row;
            row.id = id_name;
            row.ood = ood_name;
            row.epoch = epoch;
            row.b = b;
            row.kind = kind;
            row.auroc = rep.auroc;
            row.ovl = rep.ovl;
            row.n_id = rep.n_id;
            row.n_ood = rep.n_ood;
            result.rows.push_back(row);
            result.reports.push_back(std::move(rep));
        };

        if (wants_baseline) {
            ScoreDatasetOptions so;
            so.spec = {1, opts.seed};
            so.kind = ScoreKind::negative_bpd_baseline;
            so.threads = opts.threads;
            ScoreTable id_t = score_dataset(ckpt, nullptr, id_eval, so);
            const auto id_s = row_scores(id_t);
            for (size_t oi = 0; oi < ood_evals.size(); ++oi) {
                ScoreTable ood_t = score_dataset(ckpt, nullptr, ood_evals[oi], so);
                const auto ood_s = row_scores(ood_t);
                eval_pair(ood_names[oi], id_s, ood_s, 1, ScoreKind::negative_bpd_baseline);
            }
        }

        for (size_t b : opts.b_list) {
            ScoreBatchSpec spec{b, opts.seed};
            const size_t fit_groups_avail = fit_split.size() / b;
            const size_t n_groups = std::min(opts.n_fit_obs, fit_groups_avail);
            check(n_groups >= 2, ErrorKind::insufficient_data,
                  "sweep: fit split too small for b=" + std::to_string(b));
            ImageBatch fit_sample = sample_eval_set(fit_split, n_groups * b, fit_seed);
            dequantize(fit_sample, base.derive("fit-dequant"));

            for (ScoreKind kind : opts.kinds) {
                if (kind == ScoreKind::negative_bpd_baseline) continue; // handled above
                const std::vector<Tensor>* fd =
                    kind == ScoreKind::diagonal_preconditioned ? &fisher : nullptr;
                GaussianLayerStats stats = fit_stats_for_checkpoint(
                    ckpt, fit_sample, spec, opts.n_fit_obs, opts.stats_eps, opts.grouping,
                    opts.threads, fd);
                ScoreDatasetOptions so;
                so.spec = spec;
                so.kind = kind;
                so.convention = opts.convention;
                so.threads = opts.threads;
                ScoreTable id_t = score_dataset(ckpt, &stats, id_eval, so, fd, opts.grouping);
                const auto id_s = row_scores(id_t);
                for (size_t oi = 0; oi < ood_evals.size(); ++oi) {
                    ScoreTable ood_t =
                        score_dataset(ckpt, &stats, ood_evals[oi], so, fd, opts.grouping);
                    const auto ood_s = row_scores(ood_t);
                    eval_pair(ood_names[oi], id_s, ood_s, b, kind);
                }
            }
        }
    }

    // Mark the highest AUROC per (id, ood, b, kind) group; ties all marked.
    std::map<std::tuple<std::string, std::string, size_t, int>, double> best;
    for (const auto& r : result.rows) {
        auto key = std::make_tuple(r.id, r.ood, r.b, int(r.kind));
        auto it = best.find(key);
        if (it == best.end() || r.auroc > it->second) best[key] = r.auroc;
    }
    for (auto& r : result.rows) {
        auto key = std::make_tuple(r.id, r.ood, r.b, int(r.kind));
        r.is_max = (r.auroc == best[key]);
    }

    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir + "/reports");
        std::filesystem::create_directories(opts.out_dir + "/figures");
        write_text_file(opts.out_dir + "/reports/sweep.csv", sweep_csv(result.rows));
        for (const auto& rep : result.reports) {
            char suffix[128];
            std::snprintf(suffix, sizeof suffix, "%s-epoch%04zu-b%zu-%s",
                          sanitize_name(rep.ood_dataset).c_str(), rep.checkpoint_epoch, rep.b,
                          score_kind_name(rep.kind));
            write_text_file(opts.out_dir + "/reports/pair-" + suffix + ".json",
                            report_to_json(rep));
            write_text_file(opts.out_dir + "/figures/hist-" + suffix + ".svg",
                            histogram_svg(rep));
        }
    }
    return result;
}

} // namespace gradflow
