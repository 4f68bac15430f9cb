#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitforge/pruning.hpp"

namespace circuitforge::report {

struct SweepRef {
    std::string method;
    std::filesystem::path csv;  // resolved against the manifest's directory
    pruning::CliffSelection selection;
    std::optional<double> cliff;
};

struct StageEntry {
    std::string name;
    std::uint64_t flops = 0;
    double seconds = 0.0;
};

struct Manifest {
    std::filesystem::path path;
    std::string kind;
    std::string task;
    std::string model_hash;
    std::uint64_t flops = 0;
    double seconds = 0.0;
    std::vector<StageEntry> stages;
    std::vector<SweepRef> sweeps;
    std::optional<double> performance;
    std::optional<std::size_t> size;
    std::optional<double> sparsity;
    std::optional<double> tpr;
    nlohmann::json raw;
};

// Errors: ManifestParseError, IoError.
Manifest parse_manifest(const std::filesystem::path& path);
Manifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& origin);

// Grouped bars of FLOPs and seconds per manifest; when both a pp and an app run are
// present the chart carries a speedup annotation pp_flops / app_flops.
std::string cost_chart_svg(const std::vector<Manifest>& manifests);

// Performance against sparsity with an optional vertical marker at the cliff.
std::string sweep_chart_svg(const pruning::SweepCurve& curve, std::optional<double> cliff,
                            const std::string& title);

// Columns: p,size,performance_pct,true_positives,kind,task,model_hash,flops,seconds
std::string summary_csv(const std::vector<Manifest>& manifests);

struct ReportFiles {
    std::filesystem::path summary;
    std::filesystem::path costs;
    std::vector<std::filesystem::path> sweeps;
};

// Writes summary.csv, costs.svg and one sweep chart per referenced sweep CSV.
// Cliff markers come from re-running select_cliff on each CSV. Errors: InvalidArgument (no manifests).
ReportFiles write_report(const std::vector<Manifest>& manifests, const std::filesystem::path& out_dir);

}  // namespace circuitforge::report
