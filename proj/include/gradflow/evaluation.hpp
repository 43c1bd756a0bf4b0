#pragma once

#include <span>
#include <string>
#include <vector>

#include "gradflow/datasets.hpp"
#include "gradflow/scoring.hpp"

namespace gradflow {

// Probability that a random OOD score exceeds a random ID score, ties
// counted half (rank-based Mann-Whitney estimate, exact).
double auroc(std::span<const double> id_scores, std::span<const double> ood_scores);

// Overlap coefficient of the two score distributions over shared histogram
// bins; 0 = disjoint, 1 = identical. All-identical inputs return 1.0
// (single-bin degenerate case).
double ovl(std::span<const double> id_scores, std::span<const double> ood_scores,
           size_t bins = 100);

struct Histogram {
    std::vector<uint64_t> counts;
    std::vector<double> edges; // bins+1 uniform edges
};

Histogram histogram(std::span<const double> scores, size_t bins,
                    std::pair<double, double> range);

// ------------------------------------------------------------------
// Neyman-Pearson demonstration on discrete supports.

struct DiscreteDistributionPair {
    std::vector<double> p, q;
    void validate() const;
};

struct NpDemoResult {
    double auc_true = 0.0;  // statistic phi = P(x)
    double auc_ratio = 0.0; // statistic phi = P(x)/Q(x)
    double C = 0.0;         // sum of P_i/Q_i over the shared support
};

// Exhaustive AUC of both statistics over all (x~P, y~Q) support pairs with
// the 0.5 tie rule; P_i>0, Q_i=0 contributes an infinite ratio statistic.
NpDemoResult np_lemma_demo(const DiscreteDistributionPair& pair);

// ------------------------------------------------------------------
// Reports

struct EvalPairReport {
    std::string id_dataset, ood_dataset;
    size_t checkpoint_epoch = 0;
    size_t b = 1;
    ScoreKind kind = ScoreKind::gradient_aggregate;
    double auroc = 0.0;
    double ovl = 0.0;
    size_t n_id = 0, n_ood = 0;
    std::vector<double> hist_edges;
    std::vector<uint64_t> id_counts, ood_counts;
};

std::string report_to_json(const EvalPairReport& r);

// Two overlaid histogram series with shared axes, written as a standalone SVG.
std::string histogram_svg(const EvalPairReport& r);

struct SweepRow {
    std::string id, ood;
    size_t epoch = 0, b = 1;
    ScoreKind kind = ScoreKind::gradient_aggregate;
    double auroc = 0.0, ovl = 0.0;
    size_t n_id = 0, n_ood = 0;
    bool is_max = false; // highest AUROC within its (id, ood, b, kind) group
};

struct SweepOptions {
    std::vector<size_t> epochs;
    std::vector<size_t> b_list = {1};
    std::vector<ScoreKind> kinds = {ScoreKind::gradient_aggregate};
    size_t n_eval = 1000;
    size_t n_fit_obs = 1000;
    double stats_eps = kDefaultStatsEps;
    size_t bins = 100;
    uint64_t seed = 0;
    SigmaConvention convention = SigmaConvention::variance_direct;
    LayerGrouping grouping = LayerGrouping::per_tensor;
    bool fit_equals_test = false; // reference protocol: fit on the test split
    size_t threads = 0;
    std::string out_dir; // when set, emits CSV + JSON reports + SVG figures
};

struct SweepResult {
    std::vector<SweepRow> rows;
    std::vector<EvalPairReport> reports;
    std::vector<std::string> missing_checkpoints;
};

// Evaluates every (epoch, OOD set, b, kind) cell from the checkpoints under
// run_dir/checkpoints, refitting statistics per checkpoint from the ID fit
// split. Missing checkpoints are listed and skipped.
SweepResult sweep_report(const std::string& run_dir, const SplitSet& id_splits,
                         const std::vector<SplitSet>& ood_splits, const SweepOptions& opts);

// `id;ood;epoch;b;kind;auroc;ovl;n_id;n_ood;is_max`
std::string sweep_csv(const std::vector<SweepRow>& rows);

std::string checkpoint_filename(size_t epoch);

// Short filesystem-safe form of a dataset tag.
std::string sanitize_name(const std::string& name);

} // namespace gradflow
