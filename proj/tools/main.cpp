#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "circuitforge/error.hpp"
#include "circuitforge/kernels.hpp"
#include "circuitforge/tasks.hpp"
#include "commands.hpp"

namespace cf = circuitforge;
namespace fs = std::filesystem;

namespace {

int report_error(const std::string& code, const std::string& message) {
    nlohmann::json j{{"error", {{"code", code}, {"message", message}}}};
    std::cerr << j.dump() << "\n";
    return 1;
}

void add_run_options(CLI::App* cmd, cf::cli::RunConfig& cfg, bool with_search) {
    cmd->add_option("--model", cfg.model_path, "Weight container")->required();
    cmd->add_option("--task", cfg.task, "Task name")->capture_default_str();
    cmd->add_option("--seed", cfg.seed, "Dataset seed")->capture_default_str();
    cmd->add_option("--samples-pp", cfg.n_samples_pp, "Prompts for path patching and scoring")
        ->capture_default_str();
    cmd->add_option("--out", cfg.output_dir, "Output directory (env CIRCUITFORGE_OUT)")
        ->capture_default_str();
    cmd->add_option("--threads", cfg.threads, "OpenMP threads, 0 = runtime default")->capture_default_str();
    if (!with_search) return;
    cmd->add_option("--samples-flap", cfg.n_samples_flap, "Prompts for FLAP scoring")->capture_default_str();
    cmd->add_option("--k", cfg.K, "Importance constant K")->capture_default_str();
    cmd->add_option("--epsilon", cfg.epsilon, "Minimum influence gate")->capture_default_str();
    cmd->add_option("--sweep-step", cfg.sweep_step, "Sparsity grid step")->capture_default_str();
    cmd->add_option("--cliff", cfg.cliffs, "Cliff strategies: first_drop, biggest_drop, fixed_max")
        ->capture_default_str();
    cmd->add_option("--mask", cfg.mask, "Search mask for app: comma list of l.h or a JSON file");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"circuitforge: path patching and FLAP head pruning on hookable transformers"};
    app.set_config("--config", "", "TOML/INI config file; command-line flags take precedence");
    app.require_subcommand(1);

    // train-toy
    cf::train::ToyTrainConfig tcfg;
    fs::path train_out = cf::cli::default_output_dir();
    std::string train_model;
    auto* train = app.add_subcommand("train-toy", "Train the two-layer toy induction model");
    train->add_option("--seed", tcfg.seed)->capture_default_str();
    train->add_option("--steps", tcfg.steps)->capture_default_str();
    train->add_option("--min-steps", tcfg.min_steps)->capture_default_str();
    train->add_option("--batch", tcfg.batch)->capture_default_str();
    train->add_option("--lr", tcfg.lr)->capture_default_str();
    train->add_option("--head-sparsity", tcfg.head_sparsity, "Group-lasso weight on head outputs")
        ->capture_default_str();
    train->add_option("--target-accuracy", tcfg.target_accuracy)->capture_default_str();
    train->add_option("--layers", tcfg.spec.n_layers)->capture_default_str();
    train->add_option("--heads", tcfg.spec.n_heads)->capture_default_str();
    train->add_option("--d-model", tcfg.spec.d_model)->capture_default_str();
    train->add_option("--d-head", tcfg.spec.d_head)->capture_default_str();
    train->add_option("--vocab", tcfg.spec.vocab_size)->capture_default_str();
    train->add_option("--seq", tcfg.spec.max_seq)->capture_default_str();
    train->add_option("--out", train_out, "Output directory")->capture_default_str();
    train->add_option("--model", train_model, "Container path (default <out>/toy_model.cfw)");
    int train_threads = 0;
    train->add_option("--threads", train_threads)->capture_default_str();

    // gen-data
    std::string data_task = "toy_induction";
    std::size_t data_n = 100, data_vocab = 64, data_seq = 16;
    std::uint64_t data_seed = 0;
    fs::path data_out;
    auto* gen = app.add_subcommand("gen-data", "Write a task dataset as JSON lines");
    gen->add_option("--task", data_task)->capture_default_str();
    gen->add_option("--n", data_n)->capture_default_str();
    gen->add_option("--seed", data_seed)->capture_default_str();
    gen->add_option("--vocab", data_vocab, "Toy vocabulary size")->capture_default_str();
    gen->add_option("--seq", data_seq, "Toy prompt length")->capture_default_str();
    gen->add_option("--out", data_out, "Output file (default <out dir>/<task>.jsonl)");

    // run
    cf::cli::RunConfig rcfg;
    rcfg.output_dir = cf::cli::default_output_dir();
    std::string run_kind;
    fs::path from_manifest;
    auto* run = app.add_subcommand("run", "Discover a circuit: pp, flap, cflap or app");
    run->add_option("kind", run_kind, "pp | flap | cflap | app");
    run->add_option("--from-manifest", from_manifest, "Replay the run recorded in a manifest");
    add_run_options(run, rcfg, true);
    run->get_option("--model")->required(false);

    // eval-circuit
    cf::cli::RunConfig ecfg;
    ecfg.output_dir = cf::cli::default_output_dir();
    fs::path eval_circuit;
    std::string eval_truth;
    auto* eval = app.add_subcommand("eval-circuit", "Score a circuit JSON, optionally against a reference");
    add_run_options(eval, ecfg, false);
    eval->add_option("--circuit", eval_circuit)->required();
    eval->add_option("--truth", eval_truth, "Reference circuit JSON for TPR and precision");

    // report
    std::vector<fs::path> report_inputs;
    fs::path report_out = cf::cli::default_output_dir() / "report";
    auto* rep = app.add_subcommand("report", "Summary CSV and SVG charts from run manifests");
    rep->add_option("manifests", report_inputs)->required();
    rep->add_option("--out", report_out)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return report_error("InvalidArgument", e.what());
    }

    try {
        if (*train) {
            if (train_threads > 0) cf::kernels::set_num_threads(train_threads);
            const fs::path model = train_model.empty() ? train_out / "toy_model.cfw" : fs::path(train_model);
            try {
                const auto outcome = cf::cli::cmd_train_toy(tcfg, model);
                nlohmann::json j{{"model", outcome.model_path.string()},
                                 {"steps_run", outcome.report.steps_run},
                                 {"accuracy", outcome.report.accuracy}};
                std::cout << j.dump() << "\n";
            } catch (const cf::Error& e) {
                if (e.code() == cf::ErrorCode::DidNotConverge) {
                    std::cerr << "warning: training did not converge\n";
                }
                throw;
            }
        } else if (*gen) {
            const fs::path out = data_out.empty() ? cf::cli::default_output_dir() / (data_task + ".jsonl") : data_out;
            cf::cli::cmd_gen_data(data_task, data_n, data_seed, data_vocab, data_seq, out);
            std::cout << nlohmann::json{{"dataset", out.string()}}.dump() << "\n";
        } else if (*run) {
            nlohmann::json m;
            if (!from_manifest.empty()) {
                m = cf::cli::cmd_rerun(from_manifest, rcfg.output_dir);
            } else {
                if (run_kind.empty()) cf::fail(cf::ErrorCode::InvalidArgument, "run needs a kind or --from-manifest");
                m = cf::cli::cmd_run(cf::cli::parse_run_kind(run_kind), rcfg);
            }
            std::cout << nlohmann::json{{"kind", m.at("kind")}, {"totals", m.at("totals")}, {"report", m.at("report")}}.dump()
                      << "\n";
        } else if (*eval) {
            std::optional<fs::path> truth;
            if (!eval_truth.empty()) truth = eval_truth;
            std::cout << cf::cli::cmd_eval_circuit(ecfg, eval_circuit, truth).dump() << "\n";
        } else if (*rep) {
            cf::cli::cmd_report(report_inputs, report_out);
            std::cout << nlohmann::json{{"report", report_out.string()}}.dump() << "\n";
        }
    } catch (const cf::Error& e) {
        return report_error(std::string(cf::to_string(e.code())), e.what());
    } catch (const std::exception& e) {
        return report_error("IoError", e.what());
    }
    return 0;
}
