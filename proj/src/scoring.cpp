#include "gradflow/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "gradflow/error.hpp"
#include "gradflow/stats.hpp"

namespace gradflow {

using json = nlohmann::json;

const char* score_kind_name(ScoreKind k) {
    switch (k) {
        case ScoreKind::gradient_aggregate: return "gradient-aggregate";
        case ScoreKind::negative_bpd_baseline: return "negative-bpd-baseline";
        case ScoreKind::diagonal_preconditioned: return "diagonal-preconditioned";
    }
    return "?";
}

ScoreKind score_kind_from_name(const std::string& s) {
    if (s == "gradient-aggregate") return ScoreKind::gradient_aggregate;
    if (s == "negative-bpd-baseline" || s == "nll-baseline")
        return ScoreKind::negative_bpd_baseline;
    if (s == "diagonal-preconditioned" || s == "diagonal")
        return ScoreKind::diagonal_preconditioned;
    fail(ErrorKind::config, "unknown score kind: " + s);
}

void ScoreBatchSpec::validate() const {
    check(b >= 1, ErrorKind::invalid_argument, "score batch spec: b must be >= 1");
}

size_t resolve_thread_count(size_t requested) {
    if (requested >= 1) return requested;
    if (const char* env = std::getenv("GRADFLOW_THREADS")) {
        const long v = std::atol(env);
        if (v >= 1) return size_t(v);
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc >= 1 ? hc : 1;
}

namespace {

// Sum of squared gradient entries per layer group.
std::vector<double> group_sq_norms(const std::vector<Tensor>& grads,
                                   const std::vector<LayerGroup>& groups,
                                   const std::vector<Tensor>* fisher_diag) {
    std::vector<double> out(groups.size(), 0.0);
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        double acc = 0.0;
        for (size_t li : groups[gi].layer_indices) {
            const Tensor& g = grads[li];
            if (fisher_diag) {
                const Tensor& f = (*fisher_diag)[li];
                for (size_t j = 0; j < g.size(); ++j) acc += g[j] * g[j] / f[j];
            } else {
                for (double v : g.data) acc += v * v;
            }
        }
        out[gi] = acc;
    }
    return out;
}

LayerScoreVector scores_from_grads(const std::vector<Tensor>& grads,
                                   const std::vector<LayerGroup>& groups,
                                   const std::vector<Tensor>* fisher_diag,
                                   const std::string& checkpoint_id, size_t b) {
    for (size_t li = 0; li < grads.size(); ++li)
        if (!grads[li].all_finite())
            fail(ErrorKind::numeric, "non-finite gradient in layer " + std::to_string(li));
    LayerScoreVector v;
    v.checkpoint_id = checkpoint_id;
    v.b = b;
    auto sq = group_sq_norms(grads, groups, fisher_diag);
    v.values.resize(sq.size());
    for (size_t i = 0; i < sq.size(); ++i)
        v.values[i] = std::log(std::max(sq[i], kGradNormFloor));
    return v;
}

} // namespace

LayerScoreVector layer_scores(const FlowModel& model, const ImageBatch& group,
                              const std::vector<LayerGroup>& groups,
                              const std::string& checkpoint_id) {
    LogProbResult res = model.log_prob_and_gradients(group);
    LayerScoreVector v = scores_from_grads(res.per_layer_gradients, groups, nullptr,
                                           checkpoint_id, group.n);
    v.member_ids = group.sample_ids;
    return v;
}

LayerScoreVector diagonal_preconditioned_scores(const FlowModel& model, const ImageBatch& group,
                                                const std::vector<LayerGroup>& groups,
                                                const std::vector<Tensor>& fisher_diag,
                                                const std::string& checkpoint_id) {
    check(fisher_diag.size() == model.params.size(), ErrorKind::consistency,
          "fisher_diag registry does not match the model's parameter groups");
    for (size_t i = 0; i < fisher_diag.size(); ++i)
        check(fisher_diag[i].same_shape(model.params[i]), ErrorKind::consistency,
              "fisher_diag shape mismatch at tensor " + std::to_string(i));
    LogProbResult res = model.log_prob_and_gradients(group);
    LayerScoreVector v = scores_from_grads(res.per_layer_gradients, groups, &fisher_diag,
                                           checkpoint_id, group.n);
    v.member_ids = group.sample_ids;
    return v;
}

GaussianLayerStats fit_layer_gaussians(const std::vector<LayerScoreVector>& vectors,
                                       double eps) {
    check(vectors.size() >= 2, ErrorKind::insufficient_data,
          "fit_layer_gaussians: need at least 2 score vectors, got " +
              std::to_string(vectors.size()));
    check(eps >= 0.0, ErrorKind::invalid_argument, "fit_layer_gaussians: negative eps");
    const size_t L = vectors.front().values.size();
    for (const auto& v : vectors) {
        check(v.checkpoint_id == vectors.front().checkpoint_id, ErrorKind::consistency,
              "fit_layer_gaussians: score vectors come from different checkpoints");
        check(v.b == vectors.front().b, ErrorKind::consistency,
              "fit_layer_gaussians: score vectors use different group sizes");
        check(v.values.size() == L, ErrorKind::consistency,
              "fit_layer_gaussians: score vectors differ in layer count");
    }
    GaussianLayerStats s;
    s.eps = eps;
    s.n_fit = vectors.size();
    s.b = vectors.front().b;
    s.checkpoint_id = vectors.front().checkpoint_id;
    s.mu.resize(L);
    s.sigma2.resize(L);
    std::vector<double> column(vectors.size());
    for (size_t l = 0; l < L; ++l) {
        for (size_t i = 0; i < vectors.size(); ++i) column[i] = vectors[i].values[l];
        const Moments m = moments(column);
        s.mu[l] = m.mean;
        s.sigma2[l] = m.variance;
    }
    return s;
}

OODScore aggregate_score(const LayerScoreVector& v, const GaussianLayerStats& stats,
                         SigmaConvention convention) {
    check(v.values.size() == stats.mu.size(), ErrorKind::consistency,
          "aggregate_score: layer count mismatch (" + std::to_string(v.values.size()) +
              " vs " + std::to_string(stats.mu.size()) + ")");
    check(v.checkpoint_id == stats.checkpoint_id, ErrorKind::consistency,
          "aggregate_score: score vector and stats come from different checkpoints");
    check(v.b == stats.b, ErrorKind::consistency,
          "aggregate_score: score vector and stats use different group sizes");
    OODScore out;
    out.kind = ScoreKind::gradient_aggregate;
    out.per_layer.resize(v.values.size());
    double acc = 0.0;
    for (size_t l = 0; l < v.values.size(); ++l) {
        const double var = convention == SigmaConvention::variance_direct
                               ? stats.sigma2[l]
                               : stats.sigma2[l] * stats.sigma2[l];
        const double denom = var + stats.eps;
        const double d = v.values[l] - stats.mu[l];
        const double contrib = 0.5 * (d * d / denom + std::log(2.0 * 3.14159265358979323846 * denom));
        out.per_layer[l] = contrib;
        acc += contrib;
    }
    out.value = acc;
    return out;
}

bool classify_ood(const OODScore& score, double threshold) {
    return score.value > threshold;
}

OODScore nll_baseline_score(const FlowModel& model, const ImageBatch& single) {
    check(single.n == 1, ErrorKind::invalid_argument,
          "nll_baseline_score scores one image at a time");
    LogProbResult res = model.forward_log_prob(single);
    OODScore s;
    s.kind = ScoreKind::negative_bpd_baseline;
    s.value = bpd(res.per_sample_log_prob[0], single.dims(), single.levels);
    return s;
}

std::vector<Tensor> estimate_fisher_diag(const FlowModel& model, const ImageBatch& fit_set,
                                         double floor) {
    check(fit_set.n >= 1, ErrorKind::insufficient_data, "estimate_fisher_diag: empty fit set");
    check(fit_set.has_dequant(), ErrorKind::state,
          "estimate_fisher_diag: fit set has no dequantized view");
    std::vector<Tensor> acc;
    acc.reserve(model.params.size());
    for (const auto& p : model.params) acc.push_back(Tensor::zeros(p.shape));

    const size_t dims = fit_set.dims();
    for (size_t i = 0; i < fit_set.n; ++i) {
        ImageBatch one;
        one.n = 1;
        one.channels = fit_set.channels;
        one.height = fit_set.height;
        one.width = fit_set.width;
        one.levels = fit_set.levels;
        one.pixels.assign(fit_set.pixels.begin() + long(i * dims),
                          fit_set.pixels.begin() + long((i + 1) * dims));
        one.dequant.assign(fit_set.dequant.begin() + long(i * dims),
                           fit_set.dequant.begin() + long((i + 1) * dims));
        LogProbResult res = model.log_prob_and_gradients(one);
        for (size_t t = 0; t < acc.size(); ++t) {
            const Tensor& g = res.per_layer_gradients[t];
            for (size_t j = 0; j < g.size(); ++j) acc[t][j] += g[j] * g[j];
        }
    }
    const double inv_n = 1.0 / double(fit_set.n);
    for (auto& t : acc)
        for (double& v : t.data) v = std::max(v * inv_n, floor);
    return acc;
}

// ------------------------------------------------------------------

namespace {

ImageBatch slice_batch(const ImageBatch& set, std::span<const size_t> members) {
    ImageBatch out;
    out.n = members.size();
    out.channels = set.channels;
    out.height = set.height;
    out.width = set.width;
    out.levels = set.levels;
    out.source_tag = set.source_tag;
    const size_t dims = set.dims();
    out.pixels.resize(out.pixel_count());
    out.dequant.resize(out.pixel_count());
    out.sample_ids.resize(out.n);
    for (size_t k = 0; k < members.size(); ++k) {
        const size_t i = members[k];
        std::copy_n(set.pixels.begin() + long(i * dims), dims,
                    out.pixels.begin() + long(k * dims));
        std::copy_n(set.dequant.begin() + long(i * dims), dims,
                    out.dequant.begin() + long(k * dims));
        out.sample_ids[k] = set.sample_ids.empty() ? i : set.sample_ids[i];
    }
    return out;
}

// Seeded shuffle then disjoint consecutive groups; remainder dropped.
std::vector<std::vector<size_t>> make_groups(size_t n, size_t b, uint64_t seed,
                                             size_t* dropped) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    SeededRng rng(seed, fnv1a64("score-grouping"));
    rng.shuffle(order);
    const size_t n_groups = n / b;
    *dropped = n - n_groups * b;
    std::vector<std::vector<size_t>> groups(n_groups);
    for (size_t g = 0; g < n_groups; ++g)
        groups[g].assign(order.begin() + long(g * b), order.begin() + long((g + 1) * b));
    return groups;
}

template <typename Fn>
void parallel_for(size_t count, size_t threads, Fn&& fn) {
    threads = std::min(threads, count);
    if (threads <= 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex err_mutex;
    for (size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (size_t i = t; i < count; i += threads) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace

ScoreTable score_dataset(const Checkpoint& checkpoint, const GaussianLayerStats* stats,
                         const ImageBatch& eval_set, const ScoreDatasetOptions& opts,
                         const std::vector<Tensor>* fisher_diag, LayerGrouping grouping) {
    opts.spec.validate();
    eval_set.validate();
    check(eval_set.has_dequant(), ErrorKind::state,
          "score_dataset: eval set has no dequantized view");

    const FlowModel& model = checkpoint.model;
    const std::string ckpt_id = checkpoint.id();
    const auto groups_map = model.layer_groups(grouping);

    const bool needs_stats = opts.kind == ScoreKind::gradient_aggregate ||
                             opts.kind == ScoreKind::diagonal_preconditioned;
    if (needs_stats) {
        check(stats != nullptr, ErrorKind::consistency,
              "score_dataset: gradient kinds require fitted statistics");
        check(stats->checkpoint_id == ckpt_id, ErrorKind::consistency,
              "score_dataset: statistics were fitted on a different checkpoint");
        check(stats->b == opts.spec.b, ErrorKind::consistency,
              "score_dataset: statistics were fitted with a different group size");
        check(stats->mu.size() == groups_map.size(), ErrorKind::consistency,
              "score_dataset: statistics layer count does not match the model grouping");
    }
    if (opts.kind == ScoreKind::diagonal_preconditioned)
        check(fisher_diag != nullptr, ErrorKind::consistency,
              "score_dataset: diagonal kind requires a fisher_diag estimate");
    if (opts.kind == ScoreKind::negative_bpd_baseline)
        check(opts.spec.b == 1, ErrorKind::invalid_argument,
              "score_dataset: the negative-bpd baseline is per-sample (b=1)");

    ScoreTable table;
    auto member_groups = make_groups(eval_set.n, opts.spec.b, opts.spec.seed, &table.dropped);
    table.rows.resize(member_groups.size());

    const size_t threads = resolve_thread_count(opts.threads);
    parallel_for(member_groups.size(), threads, [&](size_t gi) {
        ImageBatch group = slice_batch(eval_set, member_groups[gi]);
        ScoreRow row;
        row.sample_ids = group.sample_ids;
        row.checkpoint_epoch = checkpoint.epoch;
        row.kind = opts.kind;
        row.b = opts.spec.b;
        switch (opts.kind) {
            case ScoreKind::gradient_aggregate: {
                LayerScoreVector v = layer_scores(model, group, groups_map, ckpt_id);
                OODScore s = aggregate_score(v, *stats, opts.convention);
                row.score = s.value;
                if (opts.keep_layer_scores) row.layer_scores = v.values;
                break;
            }
            case ScoreKind::diagonal_preconditioned: {
                LayerScoreVector v = diagonal_preconditioned_scores(model, group, groups_map,
                                                                    *fisher_diag, ckpt_id);
                OODScore s = aggregate_score(v, *stats, opts.convention);
                row.score = s.value;
                if (opts.keep_layer_scores) row.layer_scores = v.values;
                break;
            }
            case ScoreKind::negative_bpd_baseline: {
                row.score = nll_baseline_score(model, group).value;
                break;
            }
        }
        table.rows[gi] = std::move(row);
    });
    return table;
}

GaussianLayerStats fit_stats_for_checkpoint(const Checkpoint& checkpoint,
                                            const ImageBatch& fit_set,
                                            const ScoreBatchSpec& spec, size_t n_fit_obs,
                                            double eps, LayerGrouping grouping, size_t threads,
                                            const std::vector<Tensor>* fisher_diag) {
    spec.validate();
    check(n_fit_obs >= 2, ErrorKind::insufficient_data,
          "fit_stats_for_checkpoint: need at least 2 fit observations");
    check(fit_set.has_dequant(), ErrorKind::state,
          "fit_stats_for_checkpoint: fit set has no dequantized view");

    size_t dropped = 0;
    auto member_groups = make_groups(fit_set.n, spec.b, spec.seed, &dropped);
    check(member_groups.size() >= 2, ErrorKind::insufficient_data,
          "fit_stats_for_checkpoint: fit set yields fewer than 2 groups");
    if (member_groups.size() > n_fit_obs) member_groups.resize(n_fit_obs);

    const FlowModel& model = checkpoint.model;
    const std::string ckpt_id = checkpoint.id();
    const auto groups_map = model.layer_groups(grouping);

    std::vector<LayerScoreVector> vectors(member_groups.size());
    parallel_for(member_groups.size(), resolve_thread_count(threads), [&](size_t gi) {
        ImageBatch group = slice_batch(fit_set, member_groups[gi]);
        vectors[gi] = fisher_diag
                          ? diagonal_preconditioned_scores(model, group, groups_map,
                                                           *fisher_diag, ckpt_id)
                          : layer_scores(model, group, groups_map, ckpt_id);
    });
    GaussianLayerStats stats = fit_layer_gaussians(vectors, eps);
    stats.layer_names.reserve(groups_map.size());
    for (const auto& g : groups_map) stats.layer_names.push_back(g.name);
    return stats;
}

// ------------------------------------------------------------------

std::string score_table_csv(const ScoreTable& table) {
    std::string out = "sample_ids;checkpoint_epoch;kind;b;score;layer_scores\n";
    char buf[64];
    for (const auto& row : table.rows) {
        for (size_t i = 0; i < row.sample_ids.size(); ++i) {
            if (i) out += ',';
            out += std::to_string(row.sample_ids[i]);
        }
        out += ';';
        out += std::to_string(row.checkpoint_epoch);
        out += ';';
        out += score_kind_name(row.kind);
        out += ';';
        out += std::to_string(row.b);
        out += ';';
        std::snprintf(buf, sizeof buf, "%.17g", row.score);
        out += buf;
        out += ';';
        if (!row.layer_scores.empty()) {
            out += '[';
            for (size_t i = 0; i < row.layer_scores.size(); ++i) {
                if (i) out += ',';
                std::snprintf(buf, sizeof buf, "%.17g", row.layer_scores[i]);
                out += buf;
            }
            out += ']';
        }
        out += '\n';
    }
    return out;
}

ScoreTable score_table_from_csv(const std::string& text) {
    ScoreTable table;
    size_t pos = 0;
    bool first = true;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        const std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        if (first) {
            first = false;
            check(line == "sample_ids;checkpoint_epoch;kind;b;score;layer_scores",
                  ErrorKind::format, "score CSV: unexpected header: " + line);
            continue;
        }
        std::vector<std::string> fields;
        size_t f = 0;
        while (true) {
            const size_t semi = line.find(';', f);
            if (semi == std::string::npos) {
                fields.push_back(line.substr(f));
                break;
            }
            fields.push_back(line.substr(f, semi - f));
            f = semi + 1;
        }
        check(fields.size() == 6, ErrorKind::format,
              "score CSV: expected 6 fields, got " + std::to_string(fields.size()));
        ScoreRow row;
        size_t idp = 0;
        while (idp < fields[0].size()) {
            size_t comma = fields[0].find(',', idp);
            if (comma == std::string::npos) comma = fields[0].size();
            row.sample_ids.push_back(std::stoull(fields[0].substr(idp, comma - idp)));
            idp = comma + 1;
        }
        row.checkpoint_epoch = std::stoull(fields[1]);
        row.kind = score_kind_from_name(fields[2]);
        row.b = std::stoull(fields[3]);
        row.score = std::strtod(fields[4].c_str(), nullptr);
        if (!fields[5].empty()) {
            json arr = json::parse(fields[5], nullptr, false);
            check(arr.is_array(), ErrorKind::format, "score CSV: bad layer_scores field");
            row.layer_scores = arr.get<std::vector<double>>();
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::string stats_to_json(const GaussianLayerStats& stats) {
    json j;
    j["checkpoint"] = stats.checkpoint_id;
    j["b"] = stats.b;
    j["eps"] = stats.eps;
    j["n_fit"] = stats.n_fit;
    j["mu"] = stats.mu;
    j["sigma2"] = stats.sigma2;
    j["layer_names"] = stats.layer_names;
    return j.dump(2) + "\n";
}

GaussianLayerStats stats_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    check(!j.is_discarded(), ErrorKind::format, "stats file is not valid JSON");
    GaussianLayerStats s;
    try {
        s.checkpoint_id = j.at("checkpoint").get<std::string>();
        s.b = j.at("b").get<size_t>();
        s.eps = j.at("eps").get<double>();
        s.n_fit = j.at("n_fit").get<size_t>();
        s.mu = j.at("mu").get<std::vector<double>>();
        s.sigma2 = j.at("sigma2").get<std::vector<double>>();
        s.layer_names = j.at("layer_names").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("stats file: missing or bad field: ") + e.what());
    }
    check(s.mu.size() == s.sigma2.size(), ErrorKind::format,
          "stats file: mu and sigma2 lengths differ");
    return s;
}

} // namespace gradflow
