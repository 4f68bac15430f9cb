#pragma once

#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "circuitforge/flops.hpp"
#include "circuitforge/patching.hpp"
#include "circuitforge/pruning.hpp"

namespace circuitforge::pipeline {

struct StageCost {
    std::string name;
    FlopSnapshot flops;
    double seconds = 0.0;
};

struct AppConfig {
    patching::ThresholdConfig threshold;
    std::vector<pruning::CliffStrategy> vanilla_cliffs = {pruning::CliffStrategy::first_drop,
                                                          pruning::CliffStrategy::biggest_drop,
                                                          pruning::CliffStrategy::fixed_max};
    std::vector<pruning::CliffStrategy> contrastive_cliffs = vanilla_cliffs;
    pruning::CliffSelection cliff;   // strategy field is overridden per combination
    double sweep_step = 0.01;        // sweeps run over [cliff.min_sparsity, 1]
    double performance_target = 75.0;
    // Skips the FLAP stages and searches inside this mask.
    std::optional<std::set<HeadId>> forced_mask;

    void validate() const;
};

struct FlapCircuit {
    std::set<HeadId> heads;
    pruning::CliffStrategy strategy = pruning::CliffStrategy::first_drop;
    double cliff = 0.0;
};

struct MergeCandidate {
    FlapCircuit vanilla;
    FlapCircuit contrastive;
    std::set<HeadId> merged;
    double performance = 0.0;
};

struct AppRun {
    pruning::HeadScoreTable vanilla_scores;
    pruning::HeadScoreTable contrastive_scores;
    pruning::SweepCurve vanilla_curve;
    pruning::SweepCurve contrastive_curve;
    std::vector<MergeCandidate> candidates;
    std::optional<std::size_t> chosen;  // index into candidates; empty when the mask was forced
    std::set<HeadId> merged_mask;
    patching::Circuit final_circuit;
    double final_performance = 0.0;
    double reduction = 0.0;  // 1 - |merged_mask| / (L * H)
    std::vector<StageCost> stages;  // search cost; totals sum these
    StageCost evaluation;           // scoring the final circuit, outside the totals

    FlopSnapshot total_flops() const;
    double total_seconds() const;
    const FlapCircuit* vanilla_circuit() const;
    const FlapCircuit* contrastive_circuit() const;
};

struct PpRun {
    patching::Circuit circuit;
    double performance = 0.0;
    std::vector<StageCost> stages;
    StageCost evaluation;

    FlopSnapshot total_flops() const;
    double total_seconds() const;
};

// Unrestricted automatic PP over `pp_ds`, metered.
PpRun run_pp(const Model& model, const tasks::TaskDataset& pp_ds,
             const patching::ThresholdConfig& cfg);

// APP: vanilla and contrastive FLAP on `flap_ds`, cliff sweeps and merge scored on
// `pp_ds`, then automatic PP inside the merged mask. When `pp_ds` is a prefix of
// `flap_ds` the PP caches are sliced from the FLAP forwards instead of recomputed.
AppRun run_app(const Model& model, const tasks::TaskDataset& flap_ds,
               const tasks::TaskDataset& pp_ds, const AppConfig& cfg);

struct ComparisonReport {
    double performance = 0.0;
    std::size_t size = 0;
    double sparsity = 0.0;
    double tpr = 0.0;
    double precision = 0.0;
    std::uint64_t flops = 0;
    double seconds = 0.0;
};

// (tpr, precision) in percent. Errors: EmptyTruth, EmptyCircuit.
std::pair<double, double> compare(const std::set<HeadId>& circuit, const std::set<HeadId>& truth);

struct CostReport {
    ComparisonReport app;
    ComparisonReport pp;
    double flops_ratio = 0.0;  // pp / app
    double time_ratio = 0.0;
};

// APP measured against the PP circuit as ground truth. Errors: MeterMissing.
CostReport cost_report(const AppRun& app, const PpRun& pp, const ModelSpec& spec);

nlohmann::json stages_to_json(const std::vector<StageCost>& stages);
nlohmann::json report_to_json(const ComparisonReport& r);
nlohmann::json heads_to_json(const std::set<HeadId>& heads);
std::set<HeadId> heads_from_json(const nlohmann::json& j);

}  // namespace circuitforge::pipeline
