#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitforge/model.hpp"
#include "circuitforge/patching.hpp"
#include "circuitforge/tasks.hpp"

namespace circuitforge::pruning {

enum class ScoreMethod { vanilla, contrastive, contrastive_table_difference };

std::string to_string(ScoreMethod m);

struct HeadScoreTable {
    std::map<HeadId, double> scores;
    ScoreMethod method = ScoreMethod::vanilla;
    std::size_t n_samples = 0;

    // Heads by descending score, ties in HeadId order.
    std::vector<HeadId> ranking() const;
};

// Per-head FLAP importance: for every W_O input channel j of the head,
// (sum_i |W_O[i, j]|) * ||X_j||_2, summed over the head's d_head channels.
// X is the concatenated z over all (batch x seq) positions of `tokens`.
HeadScoreTable flap_scores(const Model& model, const TokenBatch& tokens);

enum class Variant { clean, corrupted };
HeadScoreTable flap_scores(const Model& model, const tasks::TaskDataset& dataset, Variant variant);

// Same aggregation with ||X_clean,j - X_corr,j||_2 over aligned positions.
// Errors: AlignmentError when the batches differ in shape.
HeadScoreTable contrastive_flap_scores(const Model& model, const TokenBatch& clean,
                                       const TokenBatch& corrupted);
HeadScoreTable contrastive_flap_scores(const Model& model, const tasks::TaskDataset& dataset);

// Scores from caches holding every head_out; no forward passes.
HeadScoreTable flap_scores_from_cache(const Model& model, const ActivationCache& cache);
HeadScoreTable contrastive_scores_from_caches(const Model& model, const ActivationCache& clean,
                                              const ActivationCache& corrupted);

// |flap(clean) - flap(corrupted)| per head: the score-table difference variant.
HeadScoreTable table_difference_scores(const HeadScoreTable& clean,
                                       const HeadScoreTable& corrupted);

// Top ceil((1 - p) * L * H) heads by score, global ranking.
std::set<HeadId> prune_to_sparsity(const HeadScoreTable& table, double p);
std::size_t kept_count(std::size_t total_heads, double p);

// Ascending grid lo, lo+step, ..., hi (inclusive, rounded to 1e-9).
std::vector<double> make_grid(double step, double lo = 0.0, double hi = 1.0);

struct SweepCurve {
    std::vector<double> grid;
    std::vector<double> performance;
    std::vector<std::size_t> sizes;
    std::optional<std::vector<std::size_t>> true_positives;
    std::vector<std::set<HeadId>> circuits;
};

// Memoizes circuit performance by head set for one PatchContext.
class PerformanceMemo {
public:
    explicit PerformanceMemo(const patching::PatchContext& ctx) : ctx_(&ctx) {}
    double operator()(const std::set<HeadId>& heads);
    std::size_t evaluations() const noexcept { return cache_.size(); }

private:
    const patching::PatchContext* ctx_;
    std::map<std::set<HeadId>, double> cache_;
};

SweepCurve sweep(PerformanceMemo& memo, const HeadScoreTable& table, const std::vector<double>& grid,
                 const std::optional<std::set<HeadId>>& reference = std::nullopt);
SweepCurve sweep(const Model& model, const tasks::TaskDataset& dataset, const HeadScoreTable& table,
                 const std::vector<double>& grid,
                 const std::optional<std::set<HeadId>>& reference = std::nullopt);

enum class CliffStrategy { first_drop, biggest_drop, fixed_max };

std::string to_string(CliffStrategy s);
CliffStrategy parse_cliff(const std::string& s);

struct CliffSelection {
    CliffStrategy strategy = CliffStrategy::first_drop;
    double min_sparsity = 0.6;
    double fixed_value = 0.75;
    double drop_threshold = 5.0;  // percent-points lost in one grid step
};

// Errors: CurveTooShort.
double select_cliff(const SweepCurve& curve, const CliffSelection& sel);

// Smallest p with tp(p) <= tp(first)/2. Errors: NoHalfReached, InvalidArgument.
double half_life(const SweepCurve& curve);

// Columns: p,size,performance_pct,true_positives
void write_sweep_csv(const std::filesystem::path& path, const SweepCurve& curve);
SweepCurve read_sweep_csv(const std::filesystem::path& path);

nlohmann::json score_table_to_json(const HeadScoreTable& table);
HeadScoreTable score_table_from_json(const nlohmann::json& j);

}  // namespace circuitforge::pruning
