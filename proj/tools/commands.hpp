#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitforge/train.hpp"

namespace circuitforge::cli {

enum class RunKind { pp, flap, cflap, app };

std::string to_string(RunKind k);
RunKind parse_run_kind(const std::string& s);

struct RunConfig {
    std::filesystem::path model_path;
    std::string task = "toy_induction";
    std::uint64_t seed = 0;
    std::size_t n_samples_pp = 100;
    std::size_t n_samples_flap = 200;
    double K = 1.0;
    double epsilon = 0.01;
    double sweep_step = 0.01;
    std::vector<std::string> cliffs = {"first_drop", "biggest_drop", "fixed_max"};
    std::optional<std::string> mask;  // comma list of "l.h", or a JSON file of heads
    std::filesystem::path output_dir = "out";
    int threads = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

// Default output directory: $CIRCUITFORGE_OUT when set, else "out".
std::filesystem::path default_output_dir();

struct TrainOutcome {
    std::filesystem::path model_path;
    train::TrainReport report;
};

// Writes the container and train.json even when training did not converge.
TrainOutcome cmd_train_toy(const train::ToyTrainConfig& cfg, const std::filesystem::path& model_path);

void cmd_gen_data(const std::string& task, std::size_t n, std::uint64_t seed, std::size_t vocab_size,
                  std::size_t seq, const std::filesystem::path& out_file);

// Writes circuit.json, sweep CSVs and manifest.json under cfg.output_dir; returns the manifest.
nlohmann::json cmd_run(RunKind kind, const RunConfig& cfg);

// Replays the run recorded in a manifest, writing into `output_dir`.
nlohmann::json cmd_rerun(const std::filesystem::path& manifest, const std::filesystem::path& output_dir);

nlohmann::json cmd_eval_circuit(const RunConfig& cfg, const std::filesystem::path& circuit,
                                const std::optional<std::filesystem::path>& truth);

void cmd_report(const std::vector<std::filesystem::path>& manifests, const std::filesystem::path& out_dir);

}  // namespace circuitforge::cli
