#include "circuitforge/pipeline.hpp"

#include <chrono>

#include "circuitforge/error.hpp"

namespace circuitforge::pipeline {

using nlohmann::json;

namespace {

class StageTimer {
public:
    StageTimer(const Model& model, std::string name)
        : model_(model), name_(std::move(name)), start_flops_(model.meter().snapshot()),
          start_(std::chrono::steady_clock::now()) {}

    StageCost finish() const {
        const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_);
        return {name_, model_.meter().snapshot() - start_flops_, secs.count()};
    }

private:
    const Model& model_;
    std::string name_;
    FlopSnapshot start_flops_;
    std::chrono::steady_clock::time_point start_;
};

FlopSnapshot sum_flops(const std::vector<StageCost>& stages) {
    FlopSnapshot total;
    for (const auto& s : stages) total = total + s.flops;
    return total;
}

double sum_seconds(const std::vector<StageCost>& stages) {
    double total = 0.0;
    for (const auto& s : stages) total += s.seconds;
    return total;
}

bool is_prefix(const tasks::TaskDataset& prefix, const tasks::TaskDataset& full) {
    if (prefix.pairs.size() > full.pairs.size()) return false;
    for (std::size_t i = 0; i < prefix.pairs.size(); ++i) {
        const auto& a = prefix.pairs[i];
        const auto& b = full.pairs[i];
        if (a.clean_tokens != b.clean_tokens || a.corrupted_tokens != b.corrupted_tokens ||
            a.answer.correct != b.answer.correct || a.answer.wrong != b.answer.wrong ||
            a.answer.mode != b.answer.mode) {
            return false;
        }
    }
    return true;
}

// First n batch rows of every entry.
CachePtr slice_cache(const ActivationCache& cache, std::size_t n) {
    std::map<HookPoint, Tensor> entries;
    for (const auto& [hook, t] : cache.entries()) {
        auto shape = t.shape();
        const std::size_t row = t.numel() / shape[0];
        shape[0] = n;
        entries.emplace(hook, Tensor(shape, std::vector<float>(t.data(), t.data() + n * row)));
    }
    return std::make_shared<const ActivationCache>(n, cache.seq(), cache.source(), std::move(entries));
}

HookSet heads_and_logits(const ModelSpec& spec) {
    HookSet hooks = all_head_outs(spec);
    hooks.insert(HookPoint::logits());
    return hooks;
}

}  // namespace

void AppConfig::validate() const {
    threshold.validate();
    if (vanilla_cliffs.empty() || contrastive_cliffs.empty()) {
        fail(ErrorCode::InvalidArgument, "cliff strategy lists must be nonempty");
    }
    if (!(sweep_step > 0.0) || sweep_step > 1.0) {
        fail(ErrorCode::InvalidArgument, "sweep step must lie in (0, 1]");
    }
}

FlopSnapshot AppRun::total_flops() const { return sum_flops(stages); }
double AppRun::total_seconds() const { return sum_seconds(stages); }
FlopSnapshot PpRun::total_flops() const { return sum_flops(stages); }
double PpRun::total_seconds() const { return sum_seconds(stages); }

const FlapCircuit* AppRun::vanilla_circuit() const {
    return chosen ? &candidates[*chosen].vanilla : nullptr;
}

const FlapCircuit* AppRun::contrastive_circuit() const {
    return chosen ? &candidates[*chosen].contrastive : nullptr;
}

PpRun run_pp(const Model& model, const tasks::TaskDataset& pp_ds,
             const patching::ThresholdConfig& cfg) {
    cfg.validate();
    PpRun run;
    StageTimer timer(model, "path_patching");
    patching::PatchContext ctx(model, pp_ds);
    run.circuit = patching::automatic_path_patching(ctx, cfg);
    run.stages.push_back(timer.finish());
    StageTimer eval(model, "evaluation");
    run.performance = patching::circuit_performance(ctx, run.circuit.head_set());
    run.evaluation = eval.finish();
    return run;
}

AppRun run_app(const Model& model, const tasks::TaskDataset& flap_ds,
               const tasks::TaskDataset& pp_ds, const AppConfig& cfg) {
    cfg.validate();
    if (pp_ds.pairs.empty() || flap_ds.pairs.empty()) {
        fail(ErrorCode::EmptyDataset, "APP needs nonempty FLAP and PP datasets");
    }
    const ModelSpec& spec = model.spec();
    AppRun run;
    std::optional<patching::PatchContext> ctx;

    if (cfg.forced_mask) {
        run.merged_mask = *cfg.forced_mask;
    } else {
        const HookSet hooks = heads_and_logits(spec);
        const auto grid = pruning::make_grid(cfg.sweep_step, cfg.cliff.min_sparsity, 1.0);
        const bool share = is_prefix(pp_ds, flap_ds);

        // Step 1: vanilla FLAP on the clean prompts, cliff sweep.
        StageTimer flap_timer(model, "flap");
        auto clean = model.forward(flap_ds.clean_batch(), {}, hooks, CacheSource::clean);
        run.vanilla_scores = pruning::flap_scores_from_cache(model, *clean.cache);
        CachePtr corrupted;
        if (share) {
            // The corrupted half is charged to the contrastive stage below.
            const std::size_t n = pp_ds.pairs.size();
            auto pp_clean = slice_cache(*clean.cache, n);
            const double ld_clean =
                tasks::mean_logit_diff(pp_clean->at(HookPoint::logits()), pp_ds);
            run.stages.push_back(flap_timer.finish());

            StageTimer contrastive_timer(model, "contrastive_flap");
            corrupted = model.forward(flap_ds.corrupted_batch(), {}, hooks, CacheSource::corrupted).cache;
            auto pp_corr = slice_cache(*corrupted, n);
            const double ld_corr = tasks::mean_logit_diff(pp_corr->at(HookPoint::logits()), pp_ds);
            ctx.emplace(model, pp_ds, pp_clean, pp_corr, ld_clean, ld_corr);
            run.contrastive_scores =
                pruning::contrastive_scores_from_caches(model, *clean.cache, *corrupted);
            run.stages.push_back(contrastive_timer.finish());
        } else {
            ctx.emplace(model, pp_ds);
            run.stages.push_back(flap_timer.finish());
            StageTimer contrastive_timer(model, "contrastive_flap");
            corrupted = model.forward(flap_ds.corrupted_batch(), {}, hooks, CacheSource::corrupted).cache;
            run.contrastive_scores =
                pruning::contrastive_scores_from_caches(model, *clean.cache, *corrupted);
            run.stages.push_back(contrastive_timer.finish());
        }

        pruning::PerformanceMemo memo(*ctx);
        {
            StageTimer t(model, "flap_sweep");
            run.vanilla_curve = pruning::sweep(memo, run.vanilla_scores, grid);
            run.stages.push_back(t.finish());
        }
        {
            StageTimer t(model, "contrastive_sweep");
            run.contrastive_curve = pruning::sweep(memo, run.contrastive_scores, grid);
            run.stages.push_back(t.finish());
        }

        // Step 3: every pairing of cliff strategies; keep the smallest merged mask
        // reaching the performance target, else the best-performing one.
        StageTimer merge_timer(model, "merge");
        for (auto vs : cfg.vanilla_cliffs) {
            for (auto cs : cfg.contrastive_cliffs) {
                MergeCandidate c;
                auto sel = cfg.cliff;
                sel.strategy = vs;
                c.vanilla.strategy = vs;
                c.vanilla.cliff = pruning::select_cliff(run.vanilla_curve, sel);
                c.vanilla.heads = pruning::prune_to_sparsity(run.vanilla_scores, c.vanilla.cliff);
                sel.strategy = cs;
                c.contrastive.strategy = cs;
                c.contrastive.cliff = pruning::select_cliff(run.contrastive_curve, sel);
                c.contrastive.heads =
                    pruning::prune_to_sparsity(run.contrastive_scores, c.contrastive.cliff);
                c.merged = c.vanilla.heads;
                c.merged.insert(c.contrastive.heads.begin(), c.contrastive.heads.end());
                c.performance = memo(c.merged);
                run.candidates.push_back(std::move(c));
            }
        }
        std::optional<std::size_t> best;
        for (std::size_t i = 0; i < run.candidates.size(); ++i) {
            const auto& c = run.candidates[i];
            if (c.performance < cfg.performance_target) continue;
            if (!best || c.merged.size() < run.candidates[*best].merged.size()) best = i;
        }
        if (!best) {
            for (std::size_t i = 0; i < run.candidates.size(); ++i) {
                const auto& c = run.candidates[i];
                const auto& b = run.candidates[best.value_or(i)];
                if (!best || c.performance > b.performance ||
                    (c.performance == b.performance && c.merged.size() < b.merged.size())) {
                    best = i;
                }
            }
        }
        run.chosen = best;
        run.merged_mask = run.candidates[*best].merged;
        run.stages.push_back(merge_timer.finish());
    }

    // Step 4: automatic PP inside the merged mask.
    StageTimer pp_timer(model, "path_patching");
    if (!ctx) ctx.emplace(model, pp_ds);
    run.final_circuit = patching::automatic_path_patching(*ctx, cfg.threshold, run.merged_mask);
    run.stages.push_back(pp_timer.finish());

    StageTimer eval(model, "evaluation");
    run.final_performance = patching::circuit_performance(*ctx, run.final_circuit.head_set());
    run.evaluation = eval.finish();
    run.reduction = patching::sparsity_of(run.merged_mask.size(), spec);
    return run;
}

std::pair<double, double> compare(const std::set<HeadId>& circuit, const std::set<HeadId>& truth) {
    if (truth.empty()) fail(ErrorCode::EmptyTruth, "reference circuit is empty");
    if (circuit.empty()) fail(ErrorCode::EmptyCircuit, "circuit is empty");
    std::size_t both = 0;
    for (const HeadId& h : circuit) both += truth.contains(h);
    const double b = static_cast<double>(both);
    return {100.0 * b / static_cast<double>(truth.size()),
            100.0 * b / static_cast<double>(circuit.size())};
}

CostReport cost_report(const AppRun& app, const PpRun& pp, const ModelSpec& spec) {
    const auto app_flops = app.total_flops();
    const auto pp_flops = pp.total_flops();
    if (app.stages.empty() || pp.stages.empty() || app_flops.passes == 0 || pp_flops.passes == 0) {
        fail(ErrorCode::MeterMissing, "both runs need metered stages");
    }
    const auto truth = pp.circuit.head_set();
    auto fill = [&](const std::set<HeadId>& heads, double perf, FlopSnapshot f, double secs) {
        ComparisonReport r;
        r.performance = perf;
        r.size = heads.size();
        r.sparsity = patching::sparsity_of(heads.size(), spec);
        if (!heads.empty() && !truth.empty()) std::tie(r.tpr, r.precision) = compare(heads, truth);
        r.flops = f.flops;
        r.seconds = secs;
        return r;
    };
    CostReport out;
    out.app = fill(app.final_circuit.head_set(), app.final_performance, app_flops, app.total_seconds());
    out.pp = fill(truth, pp.performance, pp_flops, pp.total_seconds());
    out.flops_ratio = static_cast<double>(pp_flops.flops) / static_cast<double>(app_flops.flops);
    out.time_ratio = app.total_seconds() > 0.0 ? pp.total_seconds() / app.total_seconds() : 0.0;
    return out;
}

json stages_to_json(const std::vector<StageCost>& stages) {
    json out = json::array();
    for (const auto& s : stages) {
        out.push_back({{"name", s.name},
                       {"passes", s.flops.passes},
                       {"tokens", s.flops.tokens},
                       {"flops", s.flops.flops},
                       {"seconds", s.seconds}});
    }
    return out;
}

json report_to_json(const ComparisonReport& r) {
    return {{"performance", r.performance}, {"size", r.size},   {"sparsity", r.sparsity},
            {"tpr", r.tpr},                 {"precision", r.precision}, {"flops", r.flops},
            {"seconds", r.seconds}};
}

json heads_to_json(const std::set<HeadId>& heads) {
    json out = json::array();
    for (const HeadId& h : heads) out.push_back(to_string(h));
    return out;
}

std::set<HeadId> heads_from_json(const json& j) {
    std::set<HeadId> out;
    for (const auto& v : j) out.insert(parse_head_id(v.get<std::string>()));
    return out;
}

}  // namespace circuitforge::pipeline
