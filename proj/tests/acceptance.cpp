#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include "circuitforge/pipeline.hpp"
#include "circuitforge/weights_io.hpp"
#include "commands.hpp"
#include "oracle.hpp"

using namespace circuitforge;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Toy {
    std::filesystem::path path;
    std::shared_ptr<const WeightStore> weights;
    std::unique_ptr<Model> model;
    double train_seconds = -1.0;
};

tasks::TaskDataset toy_data(const ModelSpec& spec, std::size_t n, std::uint64_t seed) {
    tasks::GenerateOptions o;
    o.toy_seq = spec.max_seq;
    return tasks::generate(tasks::TaskKind::ToyInduction, n, seed, tasks::Vocab::toy_symbols(spec.vocab_size), o);
}

patching::ThresholdConfig pp_threshold() {
    patching::ThresholdConfig cfg;
    cfg.K = 1.0;
    cfg.epsilon = 0.001;
    return cfg;
}

std::string heads_str(const std::set<HeadId>& heads) {
    std::string out = "{";
    for (const auto& h : heads) out += (out.size() > 1 ? "," : "") + to_string(h);
    return out + "}";
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Contrastive score by direct activation differencing from the two caches.
double oracle_contrastive(const Model& model, const ActivationCache& clean, const ActivationCache& corr, HeadId h) {
    const auto& spec = model.spec();
    const auto& wo = model.weights().at("blocks." + std::to_string(h.layer) + ".attn.W_O");
    const auto& a = clean.at(HookPoint::head_out(h));
    const auto& b = corr.at(HookPoint::head_out(h));
    const std::size_t rows = clean.batch() * clean.seq();
    double total = 0.0;
    for (std::size_t d = 0; d < spec.d_head; ++d) {
        double wsum = 0.0;
        for (std::size_t i = 0; i < spec.d_model; ++i)
            wsum += std::abs(wo[(static_cast<std::size_t>(h.head) * spec.d_head + d) * spec.d_model + i]);
        double sq = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            const double v = static_cast<double>(a[r * spec.d_head + d]) - b[r * spec.d_head + d];
            sq += v * v;
        }
        total += wsum * std::sqrt(sq);
    }
    return total;
}

Outcome toy_recovery(const Toy& toy, const testutil::ToyTruth& truth, const tasks::TaskDataset& ds) {
    if (!truth.previous_token || !truth.induction) return {false, "oracle found no previous-token/induction pair"};
    const auto t0 = std::chrono::steady_clock::now();
    const auto pp = pipeline::run_pp(*toy.model, ds, pp_threshold());
    const double pp_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto found = pp.circuit.head_set();
    const bool contains = found.contains(*truth.previous_token) && found.contains(*truth.induction);
    const double runtime = toy.train_seconds + pp_seconds;
    const bool fast = toy.train_seconds >= 0.0 && runtime < 600.0;
    return {contains && fast,
            fmt("previous-token %s, induction %s, circuit %s; train %.1fs + PP %.1fs = %.1fs",
                to_string(*truth.previous_token).c_str(), to_string(*truth.induction).c_str(),
                heads_str(found).c_str(), toy.train_seconds, pp_seconds, runtime)};
}

Outcome full_mask_equivalence(const Toy& toy) {
    std::string detail;
    bool pass = true;
    auto check = [&](const Model& model, const tasks::TaskDataset& ds, const patching::ThresholdConfig& cfg,
                     const char* name) {
        const auto pp = pipeline::run_pp(model, ds, cfg);
        pipeline::AppConfig app_cfg;
        app_cfg.threshold = cfg;
        app_cfg.forced_mask = patching::all_heads(model.spec());
        const auto app = pipeline::run_app(model, ds, ds, app_cfg);
        const bool same = app.final_circuit.head_set() == pp.circuit.head_set();
        pass = pass && same;
        detail += fmt("%s%s PP %s APP %s", detail.empty() ? "" : "; ", name, heads_str(pp.circuit.head_set()).c_str(),
                      heads_str(app.final_circuit.head_set()).c_str());
    };
    check(*toy.model, toy_data(toy.model->spec(), 100, 0), pp_threshold(), "toy");
    auto spec = toy.model->spec();
    const Model random(train::random_weights(spec, 5, 0.3));
    patching::ThresholdConfig loose;
    loose.K = 0.1;
    loose.epsilon = 1e-6;
    check(random, toy_data(spec, 40, 3), loose, "random");
    return {pass, detail};
}

Outcome contrastive_nullity(const Toy& toy, const testutil::ToyTruth& truth) {
    const Model& model = *toy.model;
    const auto ds = toy_data(model.spec(), 200, 0);
    const auto same = pruning::contrastive_flap_scores(model, ds.clean_batch(), ds.clean_batch());
    bool zero = true;
    for (const auto& [h, v] : same.scores) zero = zero && v == 0.0;
    if (!truth.induction) return {false, "oracle found no induction head"};

    const auto clean = model.forward(ds.clean_batch(), {}, all_head_outs(model.spec()), CacheSource::clean);
    const auto corr = model.forward(ds.corrupted_batch(), {}, all_head_outs(model.spec()), CacheSource::corrupted);
    const auto table = pruning::contrastive_flap_scores(model, ds);
    std::vector<double> direct;
    double worst = 0.0;
    for (const auto& h : patching::all_heads(model.spec())) {
        const double v = oracle_contrastive(model, *clean.cache, *corr.cache, h);
        direct.push_back(v);
        worst = std::max(worst, std::abs(table.scores.at(h) - v) / std::max(v, 1e-12));
    }
    const double induction = oracle_contrastive(model, *clean.cache, *corr.cache, *truth.induction);
    auto sorted = direct;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    const double ratio = induction / median;
    return {zero && ratio >= 2.0 && worst < 1e-6,
            fmt("all zero with corr = clean: %s; induction %s scores %.3f = %.2fx median %.3f; library vs oracle rel err %.1e",
                zero ? "yes" : "no", to_string(*truth.induction).c_str(), induction, ratio, median, worst)};
}

Outcome cost_reduction(const Toy& toy) {
    const Model& model = *toy.model;
    const auto& spec = model.spec();
    const auto flap_ds = toy_data(spec, 200, 0);
    const auto pp_ds = flap_ds.head(100);
    const auto pp = pipeline::run_pp(model, pp_ds, pp_threshold());
    pipeline::AppConfig cfg;
    cfg.threshold = pp_threshold();
    const auto app = pipeline::run_app(model, flap_ds, pp_ds, cfg);

    const auto per_forward = flops_per_forward(spec, pp_ds.pairs.size(), pp_ds.seq());
    const double app_sender = static_cast<double>(app.stages.back().flops.flops);
    const double app_pred = static_cast<double>(patching::predicted_sender_forwards(app.final_circuit, spec) * per_forward);
    const double pp_sender = static_cast<double>(pp.stages.back().flops.flops - 2 * per_forward);
    const double pp_pred = static_cast<double>(patching::predicted_sender_forwards(pp.circuit, spec) * per_forward);
    const double app_err = std::abs(app_sender - app_pred) / app_pred;
    const double pp_err = std::abs(pp_sender - pp_pred) / pp_pred;
    const bool small_mask = 2 * app.merged_mask.size() <= spec.total_heads();
    const bool cheaper = app.total_flops().flops < pp.total_flops().flops;
    return {small_mask && cheaper && app_err <= 0.05 && pp_err <= 0.05,
            fmt("mask %zu/%zu heads; APP %.3e FLOPs vs PP %.3e (%.2fx); sender stage vs prediction: APP %.2f%%, PP %.2f%%",
                app.merged_mask.size(), spec.total_heads(), static_cast<double>(app.total_flops().flops),
                static_cast<double>(pp.total_flops().flops),
                static_cast<double>(pp.total_flops().flops) / static_cast<double>(app.total_flops().flops),
                100.0 * app_err, 100.0 * pp_err)};
}

Outcome metric_arithmetic() {
    std::set<HeadId> truth, circuit;
    for (int i = 0; i < 21; ++i) truth.insert({i / 12, i % 12});
    for (int i = 0; i < 18; ++i) circuit.insert({i / 12, i % 12});
    circuit.insert({11, 11});
    const auto [tpr, precision] = pipeline::compare(circuit, truth);
    ModelSpec gpt2;
    gpt2.n_layers = 12;
    gpt2.n_heads = 12;
    const double sparsity = patching::sparsity_of(21, gpt2);
    const bool pass = std::abs(tpr - 85.71) <= 0.02 && std::abs(precision - 94.74) <= 0.02 &&
                      std::abs(precision - 94.73) <= 0.02 && std::abs(sparsity - 0.854) < 0.0005 &&
                      std::round(sparsity * 100.0) / 100.0 == 0.85;
    return {pass, fmt("compare(19, 21, 18) = (%.4f, %.4f); sparsity(21/144) = %.4f", tpr, precision, sparsity)};
}

Outcome threshold_suite() {
    const double k = patching::adjusted_k(1.0, 0, 12);
    const double k_err = std::abs(k - (1.0 + 2.0 / std::sqrt(12.0)));
    std::mt19937_64 rng(2024);
    std::size_t violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t L = 1 + rng() % 12, H = 1 + rng() % 12;
        std::uniform_real_distribution<double> eps_dist(1e-6, 1.0);
        patching::ThresholdConfig cfg;
        cfg.epsilon = eps_dist(rng);
        cfg.K = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
        const double scale = std::uniform_real_distribution<double>(0.0, 0.999999)(rng) * cfg.epsilon;
        std::uniform_real_distribution<double> value(-scale, scale);
        patching::ImportanceMatrix X(L, H, std::nullopt);
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t h = 0; h < H; ++h)
                if (rng() % 4) X.set({static_cast<int>(l), static_cast<int>(h)}, value(rng));
        violations += !patching::evaluate_thresholds(X, cfg, H).empty();
    }
    return {k_err <= 1e-9 && violations == 0,
            fmt("K'(1, depth 1, H 12) = %.12f (err %.1e); nonempty selections below epsilon: %zu/1000", k, k_err,
                violations)};
}

pruning::SweepCurve curve(std::vector<double> grid, std::vector<double> perf, std::vector<std::size_t> tp = {}) {
    pruning::SweepCurve c;
    c.grid = std::move(grid);
    c.performance = std::move(perf);
    c.sizes.assign(c.grid.size(), 0);
    if (!tp.empty()) c.true_positives = std::move(tp);
    if (c.performance.empty()) c.performance.assign(c.grid.size(), 0.0);
    return c;
}

Outcome pruning_properties(const Toy& toy) {
    std::size_t broken = 0;
    std::mt19937_64 rng(7);
    pruning::HeadScoreTable random_table;
    for (int l = 0; l < 12; ++l)
        for (int h = 0; h < 12; ++h) random_table.scores[{l, h}] = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto toy_table = pruning::flap_scores(*toy.model, toy_data(toy.model->spec(), 50, 0), pruning::Variant::clean);
    const auto grid = pruning::make_grid(0.01);
    for (const pruning::HeadScoreTable* table : std::initializer_list<const pruning::HeadScoreTable*>{&random_table, &toy_table}) {
        std::set<HeadId> previous;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const auto kept = pruning::prune_to_sparsity(*table, grid[i]);
            const bool nested = std::includes(previous.begin(), previous.end(), kept.begin(), kept.end());
            if (i > 0 && !nested) ++broken;
            previous = kept;
        }
    }

    std::size_t half_wrong = 0;
    half_wrong += pruning::half_life(curve({0.0, 0.3, 0.6, 0.9}, {}, {4, 4, 4, 0})) != 0.9;
    half_wrong += pruning::half_life(curve({0.0, 0.5, 0.7, 0.8}, {}, {22, 15, 12, 11})) != 0.8;

    pruning::CliffSelection first, biggest;
    biggest.strategy = pruning::CliffStrategy::biggest_drop;
    const auto traced = curve({0.6, 0.7, 0.8, 0.9}, {90, 88, 40, 10});
    const auto flat = curve({0.6, 0.7, 0.8, 0.9, 1.0}, {80, 80, 80, 80, 80});
    const auto boundary = curve({0.6, 0.7, 0.8}, {90, 20, 15});
    std::size_t cliff_wrong = 0;
    cliff_wrong += pruning::select_cliff(traced, first) != 0.7;
    cliff_wrong += pruning::select_cliff(traced, biggest) != 0.7;
    cliff_wrong += pruning::select_cliff(flat, first) != 0.7;
    cliff_wrong += pruning::select_cliff(flat, biggest) != 0.7;
    cliff_wrong += pruning::select_cliff(boundary, first) != 0.6;
    cliff_wrong += pruning::select_cliff(boundary, biggest) != 0.6;
    return {broken == 0 && half_wrong == 0 && cliff_wrong == 0,
            fmt("nestedness violations %zu over %zu grid points x 2 tables; half-life mismatches %zu/2; cliff mismatches %zu/6",
                broken, grid.size(), half_wrong, cliff_wrong)};
}

Outcome determinism(const Toy& toy, const std::filesystem::path& work) {
    std::string detail;
    bool pass = true;
    for (auto kind : {cli::RunKind::pp, cli::RunKind::app}) {
        cli::RunConfig cfg;
        cfg.model_path = toy.path;
        cfg.K = 1.0;
        cfg.epsilon = 0.001;
        cfg.output_dir = work / (cli::to_string(kind) + "_0");
        cli::cmd_run(kind, cfg);
        const auto manifest = cfg.output_dir / "manifest.json";
        const auto a = work / (cli::to_string(kind) + "_1");
        const auto b = work / (cli::to_string(kind) + "_2");
        cli::cmd_rerun(manifest, a);
        cli::cmd_rerun(manifest, b);
        const auto original = slurp(cfg.output_dir / "circuit.json");
        const bool same = slurp(a / "circuit.json") == slurp(b / "circuit.json") &&
                          slurp(a / "circuit.json") == original && !original.empty();
        pass = pass && same;
        detail += fmt("%s%s: %s (%zu bytes)", detail.empty() ? "" : "; ", cli::to_string(kind).c_str(),
                      same ? "identical" : "differs", original.size());
    }
    return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance <toy model or directory to train into> [work dir]\n");
        return 2;
    }
    try {
        Toy toy;
        toy.path = argv[1];
        const std::filesystem::path work = argc > 2 ? argv[2] : std::filesystem::temp_directory_path() / "circuitforge_acceptance";
        std::filesystem::remove_all(work);
        std::filesystem::create_directories(work);
        if (std::filesystem::is_directory(toy.path)) toy.path /= "toy_model.cfw";
        if (!std::filesystem::exists(toy.path)) cli::cmd_train_toy(train::ToyTrainConfig{}, toy.path);
        const auto train_json = toy.path.parent_path() / "train.json";
        if (std::filesystem::exists(train_json)) {
            const auto j = json::parse(slurp(train_json));
            if (j.value("model_hash", "") == file_digest(toy.path)) toy.train_seconds = j.value("seconds", -1.0);
        }
        toy.weights = std::make_shared<const WeightStore>(load_weights(toy.path));
        toy.model = std::make_unique<Model>(toy.weights);

        const auto ds = toy_data(toy.model->spec(), 100, 0);
        const auto truth = testutil::toy_truth(*toy.model, ds);

        const std::pair<const char*, std::function<Outcome()>> criteria[] = {
            {"toy circuit recovery", [&] { return toy_recovery(toy, truth, ds); }},
            {"APP equals PP under a full mask", [&] { return full_mask_equivalence(toy); }},
            {"contrastive nullity and sensitivity", [&] { return contrastive_nullity(toy, truth); }},
            {"cost reduction", [&] { return cost_reduction(toy); }},
            {"metric arithmetic", [] { return metric_arithmetic(); }},
            {"threshold unit suite", [] { return threshold_suite(); }},
            {"pruning properties", [&] { return pruning_properties(toy); }},
            {"determinism", [&] { return determinism(toy, work); }},
        };
        int failures = 0;
        for (std::size_t i = 0; i < std::size(criteria); ++i) {
            Outcome o;
            try {
                o = criteria[i].second();
            } catch (const std::exception& e) {
                o = {false, std::string("error: ") + e.what()};
            }
            failures += !o.pass;
            std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
            std::fflush(stdout);
        }

        // agreement between the oracle ranking and the first heads PP admits
        const auto pp = patching::automatic_path_patching(patching::PatchContext(*toy.model, ds), pp_threshold());
        const auto ranked = truth.by_effect();
        const std::set<HeadId> top2(ranked.begin(), ranked.begin() + 2);
        std::set<HeadId> first2;
        for (std::size_t i = 0; i < std::min<std::size_t>(2, pp.heads.size()); ++i) first2.insert(pp.heads[i]);
        std::printf("INFO top-2 heads by single-head patching %s, first two admitted by PP %s: %s\n",
                    heads_str(top2).c_str(), heads_str(first2).c_str(), top2 == first2 ? "agree" : "differ");
        return failures == 0 ? 0 : 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "acceptance: %s\n", e.what());
        return 2;
    }
}
