#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitforge/model.hpp"
#include "circuitforge/tasks.hpp"

namespace circuitforge::patching {

struct ThresholdConfig {
    double K = 1.0;
    double epsilon = 0.01;
    std::vector<double> K_grid = {1.0, 1.5, 2.0, 2.5};
    std::vector<double> epsilon_grid = {0.01, 0.001, 0.02, 0.002};

    void validate() const;
};

// Depth-adjusted importance constant for a sender at 0-based layer `sender_layer`.
// Depth is 1-based, so layer 0 uses K + 2/sqrt(H).
double adjusted_k(double K, int sender_layer, std::size_t n_heads);

// Patch target downstream of a sender: an attention head, or the logits when empty.
using Receiver = std::optional<HeadId>;

std::string to_string(const Receiver& r);

// Influence scores x[l][h] for senders below a receiver. Heads outside the
// search mask are not evaluated; thresholds treat their influence as 0.
struct ImportanceMatrix {
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::vector<double> scores;
    std::vector<char> evaluated;
    Receiver receiver;

    ImportanceMatrix() = default;
    ImportanceMatrix(std::size_t layers, std::size_t heads, Receiver receiver);

    void set(HeadId h, double v);
    double at(HeadId h) const;
    bool has(HeadId h) const;
    std::size_t count() const;
};

// Heads whose |x| - |mean(X)| exceeds K'(layer) * SD(X) (population SD), provided
// at least one |x| reaches epsilon. Returned in HeadId order.
std::vector<HeadId> evaluate_thresholds(const ImportanceMatrix& X, const ThresholdConfig& cfg,
                                        std::size_t n_heads);

struct PatchResult {
    double ld_patched = 0.0;
    double ld_baseline = 0.0;   // clean run
    double ld_corrupted = 0.0;  // fully corrupted run
    double influence = 0.0;     // (ld_patched - ld_baseline) / max(|ld_baseline|, 1e-8)

    double effect_vs_corrupted() const { return ld_patched - ld_corrupted; }
};

inline constexpr double kInfluenceFloor = 1e-8;

struct Provenance {
    Receiver receiver;
    double score = 0.0;
};

struct Circuit {
    std::vector<HeadId> heads;  // admission order
    std::map<HeadId, Provenance> provenance;
    std::optional<std::set<HeadId>> search_mask;
    std::set<HeadId> patched_senders;  // every head ever patched as a sender
    std::size_t receiver_expansions = 0;

    bool contains(HeadId h) const { return provenance.contains(h); }
    std::set<HeadId> head_set() const { return {heads.begin(), heads.end()}; }
    std::size_t size() const { return heads.size(); }
};

// Clean and corrupted runs of one dataset batch, with every head output cached.
class PatchContext {
public:
    PatchContext(const Model& model, const tasks::TaskDataset& dataset);
    // Uses caller-supplied caches (both must hold every head_out for the dataset batch).
    PatchContext(const Model& model, const tasks::TaskDataset& dataset, CachePtr clean,
                 CachePtr corrupted);
    // Same, with the clean and corrupted mean logit differences already known.
    PatchContext(const Model& model, const tasks::TaskDataset& dataset, CachePtr clean,
                 CachePtr corrupted, double ld_clean, double ld_corrupted);

    const Model& model() const noexcept { return *model_; }
    const tasks::TaskDataset& dataset() const noexcept { return *dataset_; }
    const CachePtr& clean_cache() const noexcept { return clean_; }
    const CachePtr& corrupted_cache() const noexcept { return corrupted_; }
    double ld_clean() const noexcept { return ld_clean_; }
    double ld_corrupted() const noexcept { return ld_corrupted_; }

    PatchResult path_patch(HeadId sender, const Receiver& receiver) const;

    // Patches every in-mask head below the receiver. Senders run concurrently.
    ImportanceMatrix patch_all(const Receiver& receiver,
                               const std::optional<std::set<HeadId>>& mask) const;

    // Mean LD with every head outside `keep` set to its corrupted output.
    double ld_with_only(const std::set<HeadId>& keep) const;

private:
    void check_caches() const;

    const Model* model_;
    const tasks::TaskDataset* dataset_;
    TokenBatch clean_batch_;
    CachePtr clean_;
    CachePtr corrupted_;
    double ld_clean_ = 0.0;
    double ld_corrupted_ = 0.0;
};

// Errors: LayerOrderViolation, CacheMismatch.
PatchResult path_patch(const Model& model, const tasks::TaskDataset& dataset, HeadId sender,
                       const Receiver& receiver, CachePtr clean_cache, CachePtr corr_cache);

// Iterative path patching from the logits down, restricted to `mask` when given.
// Errors: EmptyDataset.
Circuit automatic_path_patching(const Model& model, const tasks::TaskDataset& dataset,
                                const ThresholdConfig& cfg,
                                const std::optional<std::set<HeadId>>& mask = std::nullopt);
Circuit automatic_path_patching(const PatchContext& ctx, const ThresholdConfig& cfg,
                                const std::optional<std::set<HeadId>>& mask = std::nullopt);

// Forward passes automatic PP spends after the two cache runs, derived from the
// receivers it expanded: |mask| for the logits, 2 * |mask below l| per head receiver.
std::uint64_t predicted_sender_forwards(const Circuit& circuit, const ModelSpec& spec);

// 100 * LD(circuit) / LD(clean); may exceed 100. Errors: DegenerateBaseline.
double circuit_performance(const Model& model, const tasks::TaskDataset& dataset,
                           const std::set<HeadId>& circuit);
double circuit_performance(const PatchContext& ctx, const std::set<HeadId>& circuit);

std::set<HeadId> all_heads(const ModelSpec& spec);

inline double sparsity_of(std::size_t size, const ModelSpec& spec) {
    return 1.0 - static_cast<double>(size) / static_cast<double>(spec.total_heads());
}

struct CircuitMetrics {
    double performance = 0.0;
    std::size_t size = 0;
    double sparsity = 0.0;
};

// {model_id, task, heads, provenance, cfg, mask_id, metrics, flops_used}
nlohmann::json circuit_to_json(const Circuit& circuit, const std::string& model_id,
                               tasks::TaskKind task, const ThresholdConfig& cfg,
                               const std::string& mask_id, const CircuitMetrics& metrics,
                               std::uint64_t flops_used);
Circuit circuit_from_json(const nlohmann::json& j);

std::string mask_id(const std::set<HeadId>& mask, const ModelSpec& spec);

}  // namespace circuitforge::patching
