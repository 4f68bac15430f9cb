#include "circuitforge/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "circuitforge/error.hpp"

namespace circuitforge::pruning {

using nlohmann::json;

namespace {

constexpr double kGridTol = 1e-9;

// sum_i |W_O[h, d, i]| for each input channel (h, d) of one layer.
std::vector<double> wo_column_mass(const Model& model, std::size_t layer) {
    const ModelSpec& s = model.spec();
    const Tensor& wo = model.weights().at("blocks." + std::to_string(layer) + ".attn.W_O");
    std::vector<double> mass(s.n_heads * s.d_head, 0.0);
    for (std::size_t j = 0; j < mass.size(); ++j) {
        const float* row = wo.data() + j * s.d_model;
        double total = 0.0;
        for (std::size_t i = 0; i < s.d_model; ++i) total += std::abs(row[i]);
        mass[j] = total;
    }
    return mass;
}

// Scores with channel norms of (a - b), or of a alone when b is null.
HeadScoreTable score_heads(const Model& model, const ActivationCache& a, const ActivationCache* b,
                           ScoreMethod method) {
    const ModelSpec& s = model.spec();
    if (b && (a.batch() != b->batch() || a.seq() != b->seq())) {
        fail(ErrorCode::AlignmentError, "clean and corrupted activations differ in shape");
    }
    HeadScoreTable table;
    table.method = method;
    table.n_samples = a.batch();
    const std::size_t rows = a.batch() * a.seq();
    for (std::size_t l = 0; l < s.n_layers; ++l) {
        const auto mass = wo_column_mass(model, l);
        for (std::size_t h = 0; h < s.n_heads; ++h) {
            const HookPoint hook = HookPoint::head_out(static_cast<int>(l), static_cast<int>(h));
            const Tensor& za = a.at(hook);
            const Tensor* zb = b ? &b->at(hook) : nullptr;
            double score = 0.0;
            for (std::size_t d = 0; d < s.d_head; ++d) {
                double sq = 0.0;
                for (std::size_t r = 0; r < rows; ++r) {
                    double x = za[r * s.d_head + d];
                    if (zb) x -= (*zb)[r * s.d_head + d];
                    sq += x * x;
                }
                score += mass[h * s.d_head + d] * std::sqrt(sq);
            }
            table.scores[{static_cast<int>(l), static_cast<int>(h)}] = score;
        }
    }
    return table;
}

}  // namespace

std::string to_string(ScoreMethod m) {
    switch (m) {
        case ScoreMethod::vanilla: return "vanilla";
        case ScoreMethod::contrastive: return "contrastive";
        case ScoreMethod::contrastive_table_difference: return "contrastive_table_difference";
    }
    return "?";
}

std::vector<HeadId> HeadScoreTable::ranking() const {
    std::vector<HeadId> order;
    for (const auto& [h, v] : scores) order.push_back(h);
    std::stable_sort(order.begin(), order.end(),
                     [&](HeadId x, HeadId y) { return scores.at(x) > scores.at(y); });
    return order;
}

HeadScoreTable flap_scores_from_cache(const Model& model, const ActivationCache& cache) {
    return score_heads(model, cache, nullptr, ScoreMethod::vanilla);
}

HeadScoreTable contrastive_scores_from_caches(const Model& model, const ActivationCache& clean,
                                              const ActivationCache& corrupted) {
    return score_heads(model, clean, &corrupted, ScoreMethod::contrastive);
}

HeadScoreTable flap_scores(const Model& model, const TokenBatch& tokens) {
    if (tokens.batch == 0) fail(ErrorCode::EmptyDataset, "no samples to score");
    auto run = model.forward(tokens, {}, all_head_outs(model.spec()));
    return flap_scores_from_cache(model, *run.cache);
}

HeadScoreTable flap_scores(const Model& model, const tasks::TaskDataset& dataset, Variant variant) {
    if (dataset.pairs.empty()) fail(ErrorCode::EmptyDataset, "dataset is empty");
    return flap_scores(model, variant == Variant::clean ? dataset.clean_batch()
                                                        : dataset.corrupted_batch());
}

HeadScoreTable contrastive_flap_scores(const Model& model, const TokenBatch& clean,
                                       const TokenBatch& corrupted) {
    if (clean.batch != corrupted.batch || clean.seq != corrupted.seq) {
        fail(ErrorCode::AlignmentError, "clean and corrupted batches differ in shape");
    }
    if (clean.batch == 0) fail(ErrorCode::EmptyDataset, "no samples to score");
    const HookSet heads = all_head_outs(model.spec());
    auto a = model.forward(clean, {}, heads, CacheSource::clean);
    auto b = model.forward(corrupted, {}, heads, CacheSource::corrupted);
    return contrastive_scores_from_caches(model, *a.cache, *b.cache);
}

HeadScoreTable contrastive_flap_scores(const Model& model, const tasks::TaskDataset& dataset) {
    if (dataset.pairs.empty()) fail(ErrorCode::EmptyDataset, "dataset is empty");
    return contrastive_flap_scores(model, dataset.clean_batch(), dataset.corrupted_batch());
}

HeadScoreTable table_difference_scores(const HeadScoreTable& clean,
                                       const HeadScoreTable& corrupted) {
    if (clean.scores.size() != corrupted.scores.size()) {
        fail(ErrorCode::AlignmentError, "score tables cover different heads");
    }
    HeadScoreTable out;
    out.method = ScoreMethod::contrastive_table_difference;
    out.n_samples = clean.n_samples;
    for (const auto& [h, v] : clean.scores) {
        auto it = corrupted.scores.find(h);
        if (it == corrupted.scores.end()) fail(ErrorCode::AlignmentError, "head missing in table");
        out.scores[h] = std::abs(v - it->second);
    }
    return out;
}

// ---------------------------------------------------------------- sparsity

std::size_t kept_count(std::size_t total_heads, double p) {
    if (p < -kGridTol || p > 1.0 + kGridTol) {
        fail(ErrorCode::InvalidArgument, "sparsity must lie in [0, 1]");
    }
    const double keep = (1.0 - p) * static_cast<double>(total_heads);
    const double rounded = std::ceil(keep - kGridTol);
    return std::min(total_heads, static_cast<std::size_t>(std::max(0.0, rounded)));
}

std::set<HeadId> prune_to_sparsity(const HeadScoreTable& table, double p) {
    const auto order = table.ranking();
    const std::size_t k = kept_count(order.size(), p);
    return {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k)};
}

std::vector<double> make_grid(double step, double lo, double hi) {
    if (!(step > 0.0) || lo < 0.0 || hi > 1.0 || lo > hi) {
        fail(ErrorCode::InvalidArgument, "grid needs step > 0 and 0 <= lo <= hi <= 1");
    }
    std::vector<double> grid;
    const auto n = static_cast<long>(std::floor((hi - lo) / step + kGridTol));
    for (long i = 0; i <= n; ++i) {
        grid.push_back(std::round((lo + static_cast<double>(i) * step) * 1e9) / 1e9);
    }
    return grid;
}

double PerformanceMemo::operator()(const std::set<HeadId>& heads) {
    auto it = cache_.find(heads);
    if (it != cache_.end()) return it->second;
    const double perf = patching::circuit_performance(*ctx_, heads);
    cache_.emplace(heads, perf);
    return perf;
}

SweepCurve sweep(PerformanceMemo& memo, const HeadScoreTable& table, const std::vector<double>& grid,
                 const std::optional<std::set<HeadId>>& reference) {
    if (grid.empty()) fail(ErrorCode::InvalidArgument, "sweep grid is empty");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (grid[i] < -kGridTol || grid[i] > 1.0 + kGridTol || (i > 0 && grid[i] <= grid[i - 1])) {
            fail(ErrorCode::InvalidArgument, "sweep grid must be strictly increasing in [0, 1]");
        }
    }
    SweepCurve curve;
    curve.grid = grid;
    if (reference) curve.true_positives.emplace();
    for (double p : grid) {
        auto heads = prune_to_sparsity(table, p);
        curve.performance.push_back(memo(heads));
        curve.sizes.push_back(heads.size());
        if (reference) {
            std::size_t tp = 0;
            for (const HeadId& h : heads) tp += reference->contains(h);
            curve.true_positives->push_back(tp);
        }
        curve.circuits.push_back(std::move(heads));
    }
    return curve;
}

SweepCurve sweep(const Model& model, const tasks::TaskDataset& dataset, const HeadScoreTable& table,
                 const std::vector<double>& grid, const std::optional<std::set<HeadId>>& reference) {
    patching::PatchContext ctx(model, dataset);
    PerformanceMemo memo(ctx);
    return sweep(memo, table, grid, reference);
}

// ---------------------------------------------------------------- cliffs

std::string to_string(CliffStrategy s) {
    switch (s) {
        case CliffStrategy::first_drop: return "first_drop";
        case CliffStrategy::biggest_drop: return "biggest_drop";
        case CliffStrategy::fixed_max: return "fixed_max";
    }
    return "?";
}

CliffStrategy parse_cliff(const std::string& s) {
    for (CliffStrategy c :
         {CliffStrategy::first_drop, CliffStrategy::biggest_drop, CliffStrategy::fixed_max}) {
        if (to_string(c) == s) return c;
    }
    fail(ErrorCode::InvalidArgument, "unknown cliff strategy " + s);
}

double select_cliff(const SweepCurve& curve, const CliffSelection& sel) {
    if (sel.strategy == CliffStrategy::fixed_max) return sel.fixed_value;
    if (curve.grid.size() != curve.performance.size()) {
        fail(ErrorCode::CurveTooShort, "curve has mismatched grid and performance lengths");
    }
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < curve.grid.size(); ++i) {
        if (curve.grid[i] >= sel.min_sparsity - kGridTol) idx.push_back(i);
    }
    if (idx.size() < 2) fail(ErrorCode::CurveTooShort, "need two grid points at or above the minimum sparsity");

    std::optional<std::size_t> chosen;
    if (sel.strategy == CliffStrategy::first_drop) {
        for (std::size_t k = 0; k + 1 < idx.size() && !chosen; ++k) {
            if (curve.performance[idx[k]] - curve.performance[idx[k + 1]] > sel.drop_threshold) {
                chosen = idx[k];
            }
        }
    } else {
        double biggest = sel.drop_threshold;
        for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
            const double drop = curve.performance[idx[k]] - curve.performance[idx[k + 1]];
            if (drop > biggest) {
                biggest = drop;
                chosen = idx[k];
            }
        }
    }
    if (chosen) return curve.grid[*chosen];

    std::optional<double> fallback;
    for (double p : curve.grid) {
        if (p <= sel.fixed_value + kGridTol) fallback = p;
    }
    if (!fallback) fail(ErrorCode::CurveTooShort, "no grid point at or below the fixed maximum");
    return *fallback;
}

double half_life(const SweepCurve& curve) {
    if (!curve.true_positives || curve.true_positives->empty()) {
        fail(ErrorCode::InvalidArgument, "half-life needs true-positive counts");
    }
    const auto& tp = *curve.true_positives;
    if (tp.front() == 0) fail(ErrorCode::InvalidArgument, "half-life needs tp(0) > 0");
    for (std::size_t i = 0; i < tp.size(); ++i) {
        if (2 * tp[i] <= tp.front()) return curve.grid[i];
    }
    fail(ErrorCode::NoHalfReached, "true positives never fall to half");
}

// ---------------------------------------------------------------- I/O

void write_sweep_csv(const std::filesystem::path& path, const SweepCurve& curve) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    out << "p,size,performance_pct,true_positives\n";
    out << std::setprecision(10);
    for (std::size_t i = 0; i < curve.grid.size(); ++i) {
        out << curve.grid[i] << ',' << curve.sizes[i] << ',' << curve.performance[i] << ',';
        if (curve.true_positives) out << (*curve.true_positives)[i];
        out << '\n';
    }
}

SweepCurve read_sweep_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("p,size,performance_pct", 0) != 0) {
        fail(ErrorCode::FormatError, "sweep CSV header missing");
    }
    SweepCurve curve;
    bool any_tp = false;
    bool all_tp = true;
    std::vector<std::size_t> tps;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string p, size, perf, tp;
        std::getline(ss, p, ',');
        std::getline(ss, size, ',');
        std::getline(ss, perf, ',');
        std::getline(ss, tp, ',');
        try {
            curve.grid.push_back(std::stod(p));
            curve.sizes.push_back(static_cast<std::size_t>(std::stoul(size)));
            curve.performance.push_back(std::stod(perf));
            if (tp.empty()) {
                all_tp = false;
            } else {
                any_tp = true;
                tps.push_back(static_cast<std::size_t>(std::stoul(tp)));
            }
        } catch (const std::logic_error&) {
            fail(ErrorCode::FormatError, "bad sweep CSV row: " + line);
        }
    }
    if (any_tp && all_tp) curve.true_positives = std::move(tps);
    return curve;
}

json score_table_to_json(const HeadScoreTable& table) {
    json scores = json::object();
    for (const auto& [h, v] : table.scores) scores[circuitforge::to_string(h)] = v;
    return json{{"method", to_string(table.method)},
                {"n_samples", table.n_samples},
                {"scores", scores}};
}

HeadScoreTable score_table_from_json(const json& j) {
    try {
        HeadScoreTable t;
        const auto m = j.at("method").get<std::string>();
        if (m == "vanilla") {
            t.method = ScoreMethod::vanilla;
        } else if (m == "contrastive") {
            t.method = ScoreMethod::contrastive;
        } else if (m == "contrastive_table_difference") {
            t.method = ScoreMethod::contrastive_table_difference;
        } else {
            fail(ErrorCode::FormatError, "unknown score method " + m);
        }
        t.n_samples = j.at("n_samples").get<std::size_t>();
        for (const auto& [k, v] : j.at("scores").items()) t.scores[parse_head_id(k)] = v.get<double>();
        return t;
    } catch (const json::exception& e) {
        fail(ErrorCode::FormatError, std::string("bad score table: ") + e.what());
    }
}

}  // namespace circuitforge::pruning
