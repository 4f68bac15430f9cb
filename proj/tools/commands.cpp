#include "commands.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "circuitforge/error.hpp"
#include "circuitforge/kernels.hpp"
#include "circuitforge/patching.hpp"
#include "circuitforge/pipeline.hpp"
#include "circuitforge/pruning.hpp"
#include "circuitforge/report.hpp"
#include "circuitforge/tasks.hpp"
#include "circuitforge/weights_io.hpp"

namespace circuitforge::cli {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(RunKind k) {
    switch (k) {
        case RunKind::pp: return "pp";
        case RunKind::flap: return "flap";
        case RunKind::cflap: return "cflap";
        case RunKind::app: return "app";
    }
    return "?";
}

RunKind parse_run_kind(const std::string& s) {
    if (s == "pp") return RunKind::pp;
    if (s == "flap") return RunKind::flap;
    if (s == "cflap") return RunKind::cflap;
    if (s == "app") return RunKind::app;
    fail(ErrorCode::InvalidArgument, "unknown run kind '" + s + "' (expected pp, flap, cflap or app)");
}

void RunConfig::validate() const {
    if (model_path.empty()) fail(ErrorCode::InvalidArgument, "--model is required");
    if (n_samples_pp == 0 || n_samples_flap == 0) fail(ErrorCode::InvalidArgument, "sample counts must be positive");
    if (!(sweep_step > 0.0 && sweep_step <= 1.0)) fail(ErrorCode::InvalidArgument, "--sweep-step must be in (0, 1]");
    if (cliffs.empty()) fail(ErrorCode::InvalidArgument, "at least one --cliff strategy is required");
    for (const auto& c : cliffs) pruning::parse_cliff(c);
    if (threads < 0) fail(ErrorCode::InvalidArgument, "--threads must be >= 0");
    tasks::parse_task(task);
    patching::ThresholdConfig t;
    t.K = K;
    t.epsilon = epsilon;
    t.validate();
}

json RunConfig::to_json() const {
    json j{{"model_path", model_path.string()},
           {"task", task},
           {"seed", seed},
           {"n_samples_pp", n_samples_pp},
           {"n_samples_flap", n_samples_flap},
           {"K", K},
           {"epsilon", epsilon},
           {"sweep_step", sweep_step},
           {"cliffs", cliffs},
           {"threads", threads}};
    j["mask"] = mask ? json(*mask) : json(nullptr);
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    try {
        RunConfig c;
        c.model_path = j.at("model_path").get<std::string>();
        c.task = j.at("task").get<std::string>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.n_samples_pp = j.at("n_samples_pp").get<std::size_t>();
        c.n_samples_flap = j.at("n_samples_flap").get<std::size_t>();
        c.K = j.at("K").get<double>();
        c.epsilon = j.at("epsilon").get<double>();
        c.sweep_step = j.at("sweep_step").get<double>();
        c.cliffs = j.at("cliffs").get<std::vector<std::string>>();
        c.threads = j.value("threads", 0);
        if (j.contains("mask") && !j.at("mask").is_null()) c.mask = j.at("mask").get<std::string>();
        return c;
    } catch (const json::exception& e) {
        fail(ErrorCode::ManifestParseError, std::string("bad run config: ") + e.what());
    }
}

fs::path default_output_dir() {
    if (const char* env = std::getenv("CIRCUITFORGE_OUT"); env && *env) return env;
    return "out";
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    out << text;
    if (!out) fail(ErrorCode::IoError, "write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        fail(ErrorCode::FormatError, path.string() + ": " + e.what());
    }
}

tasks::TaskDataset make_dataset(const ModelSpec& spec, tasks::TaskKind task, std::size_t n,
                                std::uint64_t seed) {
    const auto vocab = task == tasks::TaskKind::ToyInduction ? tasks::Vocab::toy_symbols(spec.vocab_size)
                                                             : tasks::Vocab::word_level();
    tasks::GenerateOptions opts;
    opts.toy_seq = spec.max_seq;
    return tasks::generate(task, n, seed, vocab, opts);
}

// A comma list of "l.h", a JSON array of "l.h", or a circuit JSON file.
std::set<HeadId> parse_mask(const std::string& text, const ModelSpec& spec) {
    std::set<HeadId> out;
    if (fs::is_regular_file(text)) {
        const json j = read_json(text);
        try {
            if (j.is_array()) {
                out = pipeline::heads_from_json(j);
            } else if (j.contains("merged_mask")) {
                out = pipeline::heads_from_json(j.at("merged_mask"));
            } else {
                for (const HeadId& h : patching::circuit_from_json(j).heads) out.insert(h);
            }
        } catch (const json::exception& e) {
            fail(ErrorCode::FormatError, text + ": " + e.what());
        }
    } else {
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) out.insert(parse_head_id(item));
        }
    }
    for (const HeadId& h : out) {
        if (h.layer < 0 || h.head < 0 || static_cast<std::size_t>(h.layer) >= spec.n_layers ||
            static_cast<std::size_t>(h.head) >= spec.n_heads) {
            fail(ErrorCode::InvalidArgument, "mask head " + to_string(h) + " is outside the model");
        }
    }
    if (out.empty()) fail(ErrorCode::InvalidArgument, "mask is empty");
    return out;
}

struct Loaded {
    std::string model_hash;
    std::unique_ptr<Model> model;
    tasks::TaskKind task;
    tasks::TaskDataset pp_ds;
    tasks::TaskDataset flap_ds;
};

Loaded load_inputs(const RunConfig& cfg) {
    Loaded in;
    in.model_hash = file_digest(cfg.model_path);
    in.model = std::make_unique<Model>(std::make_shared<const WeightStore>(load_weights(cfg.model_path)));
    in.task = tasks::parse_task(cfg.task);
    in.pp_ds = make_dataset(in.model->spec(), in.task, cfg.n_samples_pp, cfg.seed);
    in.flap_ds = make_dataset(in.model->spec(), in.task, cfg.n_samples_flap, cfg.seed);
    return in;
}

patching::ThresholdConfig threshold_of(const RunConfig& cfg) {
    patching::ThresholdConfig t;
    t.K = cfg.K;
    t.epsilon = cfg.epsilon;
    return t;
}

json totals_json(const FlopSnapshot& f, double seconds) {
    return {{"passes", f.passes}, {"tokens", f.tokens}, {"flops", f.flops}, {"seconds", seconds}};
}

json sweep_ref(const std::string& method, const std::string& csv, const pruning::CliffSelection& sel,
               double cliff) {
    return {{"method", method},
            {"csv", csv},
            {"strategy", pruning::to_string(sel.strategy)},
            {"min_sparsity", sel.min_sparsity},
            {"fixed_value", sel.fixed_value},
            {"drop_threshold", sel.drop_threshold},
            {"cliff", cliff}};
}

// A pruned FLAP circuit as a Circuit: heads in score order, provenance holds the score.
patching::Circuit flap_circuit(const pruning::HeadScoreTable& table, const std::set<HeadId>& kept) {
    patching::Circuit c;
    for (const HeadId& h : table.ranking()) {
        if (!kept.contains(h)) continue;
        c.heads.push_back(h);
        c.provenance[h] = {std::nullopt, table.scores.at(h)};
    }
    return c;
}

json base_manifest(RunKind kind, const RunConfig& cfg, const Loaded& in) {
    json inputs = cfg.to_json();
    inputs["model_hash"] = in.model_hash;
    inputs["model_spec"] = spec_to_json(in.model->spec());
    inputs["pp_dataset_digest"] = in.pp_ds.digest();
    inputs["flap_dataset_digest"] = in.flap_ds.digest();
    return {{"kind", to_string(kind)}, {"inputs", inputs}, {"circuit_file", "circuit.json"}};
}

json run_pp_kind(const RunConfig& cfg, const Loaded& in) {
    if (cfg.mask) fail(ErrorCode::InvalidArgument, "--mask applies to app runs only");
    const auto& spec = in.model->spec();
    const auto thr = threshold_of(cfg);
    const auto run = pipeline::run_pp(*in.model, in.pp_ds, thr);
    const auto total = run.total_flops();
    const auto heads = run.circuit.head_set();
    const patching::CircuitMetrics metrics{run.performance, heads.size(), patching::sparsity_of(heads.size(), spec)};
    write_json(cfg.output_dir / "circuit.json",
               patching::circuit_to_json(run.circuit, in.model_hash, in.task, thr,
                                         patching::mask_id(patching::all_heads(spec), spec), metrics,
                                         total.flops));
    json m = base_manifest(RunKind::pp, cfg, in);
    m["stages"] = pipeline::stages_to_json(run.stages);
    m["evaluation"] = pipeline::stages_to_json({run.evaluation}).at(0);
    m["totals"] = totals_json(total, run.total_seconds());
    m["mask"] = pipeline::heads_to_json(patching::all_heads(spec));
    m["sweeps"] = json::array();
    m["report"] = {{"performance", metrics.performance},
                   {"size", metrics.size},
                   {"sparsity", metrics.sparsity},
                   {"receiver_expansions", run.circuit.receiver_expansions}};
    return m;
}

json run_flap_kind(RunKind kind, const RunConfig& cfg, const Loaded& in) {
    if (cfg.mask) fail(ErrorCode::InvalidArgument, "--mask applies to app runs only");
    const auto& spec = in.model->spec();
    const bool contrastive = kind == RunKind::cflap;
    const std::string method = contrastive ? "contrastive" : "vanilla";
    std::vector<pipeline::StageCost> stages;

    auto clock = std::chrono::steady_clock::now();
    auto snap = in.model->meter().snapshot();
    auto close_stage = [&](const std::string& name) {
        const auto now = std::chrono::steady_clock::now();
        const auto s = in.model->meter().snapshot();
        stages.push_back({name, s - snap, std::chrono::duration<double>(now - clock).count()});
        clock = now;
        snap = s;
    };

    const auto table = contrastive ? pruning::contrastive_flap_scores(*in.model, in.flap_ds)
                                   : pruning::flap_scores(*in.model, in.flap_ds, pruning::Variant::clean);
    close_stage(contrastive ? "contrastive_flap" : "flap");

    const patching::PatchContext ctx(*in.model, in.pp_ds);
    pruning::PerformanceMemo memo(ctx);
    const auto curve = pruning::sweep(memo, table, pruning::make_grid(cfg.sweep_step));
    close_stage(contrastive ? "contrastive_sweep" : "flap_sweep");

    const std::string csv = "sweep_" + method + ".csv";
    pruning::write_sweep_csv(cfg.output_dir / csv, curve);
    write_json(cfg.output_dir / ("scores_" + method + ".json"), pruning::score_table_to_json(table));

    json sweeps = json::array();
    std::optional<double> chosen;
    for (const auto& name : cfg.cliffs) {
        pruning::CliffSelection sel;
        sel.strategy = pruning::parse_cliff(name);
        const double p = pruning::select_cliff(curve, sel);
        if (!chosen) chosen = p;
        sweeps.push_back(sweep_ref(method, csv, sel, p));
    }

    const auto kept = pruning::prune_to_sparsity(table, *chosen);
    const double perf = memo(kept);
    FlopSnapshot total{};
    double seconds = 0.0;
    for (const auto& s : stages) {
        total = total + s.flops;
        seconds += s.seconds;
    }
    const patching::CircuitMetrics metrics{perf, kept.size(), patching::sparsity_of(kept.size(), spec)};
    write_json(cfg.output_dir / "circuit.json",
               patching::circuit_to_json(flap_circuit(table, kept), in.model_hash, in.task,
                                         threshold_of(cfg),
                                         patching::mask_id(patching::all_heads(spec), spec), metrics,
                                         total.flops));

    json m = base_manifest(kind, cfg, in);
    m["stages"] = pipeline::stages_to_json(stages);
    m["totals"] = totals_json(total, seconds);
    m["mask"] = pipeline::heads_to_json(patching::all_heads(spec));
    m["sweeps"] = sweeps;
    m["scores_file"] = "scores_" + method + ".json";
    m["report"] = {{"performance", metrics.performance},
                   {"size", metrics.size},
                   {"sparsity", metrics.sparsity},
                   {"cliff", *chosen}};
    return m;
}

json flap_circuit_json(const pipeline::FlapCircuit& c) {
    return {{"strategy", pruning::to_string(c.strategy)}, {"cliff", c.cliff}, {"heads", pipeline::heads_to_json(c.heads)}};
}

json run_app_kind(const RunConfig& cfg, const Loaded& in) {
    const auto& spec = in.model->spec();
    pipeline::AppConfig app;
    app.threshold = threshold_of(cfg);
    app.sweep_step = cfg.sweep_step;
    app.vanilla_cliffs.clear();
    for (const auto& c : cfg.cliffs) app.vanilla_cliffs.push_back(pruning::parse_cliff(c));
    app.contrastive_cliffs = app.vanilla_cliffs;
    if (cfg.mask) app.forced_mask = parse_mask(*cfg.mask, spec);

    const auto run = pipeline::run_app(*in.model, in.flap_ds, in.pp_ds, app);
    const auto total = run.total_flops();
    const auto heads = run.final_circuit.head_set();
    const patching::CircuitMetrics metrics{run.final_performance, heads.size(),
                                           patching::sparsity_of(heads.size(), spec)};
    write_json(cfg.output_dir / "circuit.json",
               patching::circuit_to_json(run.final_circuit, in.model_hash, in.task, app.threshold,
                                         patching::mask_id(run.merged_mask, spec), metrics, total.flops));

    json m = base_manifest(RunKind::app, cfg, in);
    json sweeps = json::array();
    if (!app.forced_mask) {
        pruning::write_sweep_csv(cfg.output_dir / "sweep_vanilla.csv", run.vanilla_curve);
        pruning::write_sweep_csv(cfg.output_dir / "sweep_contrastive.csv", run.contrastive_curve);
        write_json(cfg.output_dir / "scores_vanilla.json", pruning::score_table_to_json(run.vanilla_scores));
        write_json(cfg.output_dir / "scores_contrastive.json",
                   pruning::score_table_to_json(run.contrastive_scores));
        const auto* v = run.vanilla_circuit();
        const auto* c = run.contrastive_circuit();
        if (v && c) {
            pruning::CliffSelection sel = app.cliff;
            sel.strategy = v->strategy;
            sweeps.push_back(sweep_ref("vanilla", "sweep_vanilla.csv", sel, v->cliff));
            sel.strategy = c->strategy;
            sweeps.push_back(sweep_ref("contrastive", "sweep_contrastive.csv", sel, c->cliff));
        }
    }
    json candidates = json::array();
    for (const auto& cand : run.candidates) {
        candidates.push_back({{"vanilla", flap_circuit_json(cand.vanilla)},
                              {"contrastive", flap_circuit_json(cand.contrastive)},
                              {"merged", pipeline::heads_to_json(cand.merged)},
                              {"performance", cand.performance}});
    }
    json mask_doc{{"merged_mask", pipeline::heads_to_json(run.merged_mask)},
                  {"forced", app.forced_mask.has_value()},
                  {"candidates", candidates}};
    mask_doc["chosen"] = run.chosen ? json(*run.chosen) : json(nullptr);
    write_json(cfg.output_dir / "mask.json", mask_doc);

    m["stages"] = pipeline::stages_to_json(run.stages);
    m["evaluation"] = pipeline::stages_to_json({run.evaluation}).at(0);
    m["totals"] = totals_json(total, run.total_seconds());
    m["mask"] = pipeline::heads_to_json(run.merged_mask);
    m["mask_file"] = "mask.json";
    m["sweeps"] = sweeps;
    m["report"] = {{"performance", metrics.performance},
                   {"size", metrics.size},
                   {"sparsity", metrics.sparsity},
                   {"reduction", run.reduction},
                   {"receiver_expansions", run.final_circuit.receiver_expansions}};
    return m;
}

}  // namespace

TrainOutcome cmd_train_toy(const train::ToyTrainConfig& cfg, const fs::path& model_path) {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    auto report = train::train_toy(cfg);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (model_path.has_parent_path()) fs::create_directories(model_path.parent_path());
    save_weights(model_path, *report.weights);
    json j{{"model_path", model_path.string()},
           {"model_hash", file_digest(model_path)},
           {"spec", spec_to_json(cfg.spec)},
           {"seed", cfg.seed},
           {"steps", cfg.steps},
           {"min_steps", cfg.min_steps},
           {"batch", cfg.batch},
           {"lr", cfg.lr},
           {"head_sparsity", cfg.head_sparsity},
           {"target_accuracy", cfg.target_accuracy},
           {"steps_run", report.steps_run},
           {"accuracy", report.accuracy},
           {"final_loss", report.final_loss},
           {"converged", report.converged},
           {"seconds", seconds}};
    write_json(model_path.parent_path() / "train.json", j);
    if (!report.converged) {
        std::ostringstream os;
        os << "accuracy " << report.accuracy << " below target " << cfg.target_accuracy << " after "
           << report.steps_run << " steps; partial model written to " << model_path.string();
        fail(ErrorCode::DidNotConverge, os.str());
    }
    return {model_path, std::move(report)};
}

void cmd_gen_data(const std::string& task, std::size_t n, std::uint64_t seed, std::size_t vocab_size,
                  std::size_t seq, const fs::path& out_file) {
    ModelSpec spec;
    spec.vocab_size = vocab_size;
    spec.max_seq = seq;
    const auto ds = make_dataset(spec, tasks::parse_task(task), n, seed);
    if (out_file.has_parent_path()) fs::create_directories(out_file.parent_path());
    tasks::save_jsonl(out_file, ds);
}

json cmd_run(RunKind kind, const RunConfig& cfg) {
    cfg.validate();
    if (cfg.threads > 0) kernels::set_num_threads(cfg.threads);
    fs::create_directories(cfg.output_dir);
    const auto in = load_inputs(cfg);
    json m;
    switch (kind) {
        case RunKind::pp: m = run_pp_kind(cfg, in); break;
        case RunKind::flap:
        case RunKind::cflap: m = run_flap_kind(kind, cfg, in); break;
        case RunKind::app: m = run_app_kind(cfg, in); break;
    }
    write_json(cfg.output_dir / "manifest.json", m);
    return m;
}

json cmd_rerun(const fs::path& manifest, const fs::path& output_dir) {
    const json j = read_json(manifest);
    RunKind kind;
    RunConfig cfg;
    std::string hash;
    try {
        kind = parse_run_kind(j.at("kind").get<std::string>());
        cfg = RunConfig::from_json(j.at("inputs"));
        hash = j.at("inputs").at("model_hash").get<std::string>();
    } catch (const json::exception& e) {
        fail(ErrorCode::ManifestParseError, manifest.string() + ": " + e.what());
    }
    if (file_digest(cfg.model_path) != hash) {
        fail(ErrorCode::InvalidArgument, "model " + cfg.model_path.string() + " does not match hash " + hash);
    }
    cfg.output_dir = output_dir;
    return cmd_run(kind, cfg);
}

json cmd_eval_circuit(const RunConfig& cfg, const fs::path& circuit,
                      const std::optional<fs::path>& truth) {
    if (cfg.threads > 0) kernels::set_num_threads(cfg.threads);
    const auto in = load_inputs(cfg);
    const auto& spec = in.model->spec();
    const auto heads = patching::circuit_from_json(read_json(circuit)).head_set();
    const double perf = patching::circuit_performance(*in.model, in.pp_ds, heads);
    json out{{"circuit", circuit.string()},
             {"model_hash", in.model_hash},
             {"task", cfg.task},
             {"n_samples", cfg.n_samples_pp},
             {"performance", perf},
             {"size", heads.size()},
             {"sparsity", patching::sparsity_of(heads.size(), spec)}};
    if (truth) {
        const auto truth_heads = patching::circuit_from_json(read_json(*truth)).head_set();
        const auto [tpr, precision] = pipeline::compare(heads, truth_heads);
        out["truth"] = truth->string();
        out["tpr"] = tpr;
        out["precision"] = precision;
    }
    write_json(cfg.output_dir / "eval.json", out);
    return out;
}

void cmd_report(const std::vector<fs::path>& manifests, const fs::path& out_dir) {
    std::vector<report::Manifest> parsed;
    for (const auto& p : manifests) parsed.push_back(report::parse_manifest(p));
    report::write_report(parsed, out_dir);
}

}  // namespace circuitforge::cli
