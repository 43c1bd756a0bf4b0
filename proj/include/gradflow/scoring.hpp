#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gradflow/flow.hpp"
#include "gradflow/train.hpp"

namespace gradflow {

enum class ScoreKind { gradient_aggregate, negative_bpd_baseline, diagonal_preconditioned };

const char* score_kind_name(ScoreKind k);
ScoreKind score_kind_from_name(const std::string& s);

// Eq.-13 denominator convention: use the fitted variance directly
// (default) or square it (sensitivity runs).
enum class SigmaConvention { variance_direct, variance_squared };

struct ScoreBatchSpec {
    size_t b = 1;      // group size; 1 and 5 follow the reference protocol
    uint64_t seed = 0; // grouping shuffle seed

    void validate() const;
};

struct LayerScoreVector {
    std::vector<double> values; // ln ||grad||^2 per layer group
    std::string checkpoint_id;
    std::vector<uint64_t> member_ids;
    size_t b = 1;
};

struct GaussianLayerStats {
    std::vector<double> mu, sigma2; // per layer group
    double eps = 1e-10;
    size_t n_fit = 0;
    size_t b = 1;
    std::string checkpoint_id;
    std::vector<std::string> layer_names;
};

struct OODScore {
    double value = 0.0; // higher = more OOD
    ScoreKind kind = ScoreKind::gradient_aggregate;
    std::vector<double> per_layer; // optional contributions
};

// Squared-gradient-norm floor applied before the log so dead layers stay finite.
inline constexpr double kGradNormFloor = 1e-30;
inline constexpr double kFisherFloor = 1e-8;
inline constexpr double kDefaultStatsEps = 1e-10;

// S_l = ln ||grad of the group's summed log-likelihood, restricted to layer l||^2.
LayerScoreVector layer_scores(const FlowModel& model, const ImageBatch& group,
                              const std::vector<LayerGroup>& groups,
                              const std::string& checkpoint_id);

// Per-layer Gaussian fit (population moments) over N_fit score vectors.
GaussianLayerStats fit_layer_gaussians(const std::vector<LayerScoreVector>& vectors,
                                       double eps);

// Eq.-13 Gaussian negative log-likelihood of a layer-score vector.
OODScore aggregate_score(const LayerScoreVector& v, const GaussianLayerStats& stats,
                         SigmaConvention convention = SigmaConvention::variance_direct);

// OOD iff score.value > threshold.
bool classify_ood(const OODScore& score, double threshold);

// Naive baseline: BPD of one image (higher = more OOD under the naive reading).
OODScore nll_baseline_score(const FlowModel& model, const ImageBatch& single);

// Running mean of squared per-sample gradients over ID fit data, floored.
std::vector<Tensor> estimate_fisher_diag(const FlowModel& model, const ImageBatch& fit_set,
                                         double floor = kFisherFloor);

// S_l = ln( sum_p g_p^2 / f_p ) per layer group.
LayerScoreVector diagonal_preconditioned_scores(const FlowModel& model, const ImageBatch& group,
                                                const std::vector<LayerGroup>& groups,
                                                const std::vector<Tensor>& fisher_diag,
                                                const std::string& checkpoint_id);

struct ScoreRow {
    std::vector<uint64_t> sample_ids;
    size_t checkpoint_epoch = 0;
    ScoreKind kind = ScoreKind::gradient_aggregate;
    size_t b = 1;
    double score = 0.0;
    std::vector<double> layer_scores; // kept when requested
};

struct ScoreTable {
    std::vector<ScoreRow> rows;
    size_t dropped = 0; // leftover samples not filling a full group
};

struct ScoreDatasetOptions {
    ScoreBatchSpec spec;
    ScoreKind kind = ScoreKind::gradient_aggregate;
    SigmaConvention convention = SigmaConvention::variance_direct;
    bool keep_layer_scores = false;
    size_t threads = 0; // 0 -> GRADFLOW_THREADS or hardware concurrency
};

// Scores every full group of the (pre-dequantized) eval set against the
// fitted statistics; deterministic row order regardless of worker count.
ScoreTable score_dataset(const Checkpoint& checkpoint,
                         const GaussianLayerStats* stats, // required for gradient kinds
                         const ImageBatch& eval_set, const ScoreDatasetOptions& opts,
                         const std::vector<Tensor>* fisher_diag = nullptr,
                         LayerGrouping grouping = LayerGrouping::per_tensor);

// Fits stats for one checkpoint from its ID fit set (pre-dequantized),
// using up to n_fit_obs groups of size b. Passing a fisher_diag fits the
// diagonal-preconditioned variant instead of the identity one.
GaussianLayerStats fit_stats_for_checkpoint(const Checkpoint& checkpoint,
                                            const ImageBatch& fit_set,
                                            const ScoreBatchSpec& spec, size_t n_fit_obs,
                                            double eps = kDefaultStatsEps,
                                            LayerGrouping grouping = LayerGrouping::per_tensor,
                                            size_t threads = 0,
                                            const std::vector<Tensor>* fisher_diag = nullptr);

// Score CSV (`sample_ids;checkpoint_epoch;kind;b;score;layer_scores`).
std::string score_table_csv(const ScoreTable& table);
ScoreTable score_table_from_csv(const std::string& text);

// Stats JSON round trip.
std::string stats_to_json(const GaussianLayerStats& stats);
GaussianLayerStats stats_from_json(const std::string& text);

size_t resolve_thread_count(size_t requested);

} // namespace gradflow
