#include <doctest.h>

#include <cmath>

#include "circuitforge/flops.hpp"
#include "circuitforge/pipeline.hpp"
#include "helpers.hpp"

using namespace circuitforge;
using namespace circuitforge::pipeline;
using testutil::error_of;

namespace {

ModelSpec spec8() {
    auto s = testutil::small_spec();
    s.n_heads = 8;
    s.d_head = 4;
    return s;
}

tasks::TaskDataset toy_data(const ModelSpec& spec, std::size_t n, std::uint64_t seed) {
    tasks::GenerateOptions o;
    o.toy_seq = spec.max_seq;
    return tasks::generate(tasks::TaskKind::ToyInduction, n, seed, tasks::Vocab::toy_symbols(spec.vocab_size), o);
}

std::set<HeadId> heads_n(std::size_t n) {
    std::set<HeadId> s;
    for (std::size_t i = 0; i < n; ++i) s.insert({static_cast<int>(i / 8), static_cast<int>(i % 8)});
    return s;
}

std::vector<std::string> names(const std::vector<StageCost>& stages) {
    std::vector<std::string> out;
    for (const auto& s : stages) out.push_back(s.name);
    return out;
}

patching::ThresholdConfig loose() {
    patching::ThresholdConfig cfg;
    cfg.K = 0.05;
    cfg.epsilon = 1e-6;
    return cfg;
}

}  // namespace

TEST_CASE("compare: identity, disjoint and the 19/21/18 case") {
    const auto a = heads_n(5);
    CHECK(compare(a, a) == std::pair<double, double>{100.0, 100.0});
    const std::set<HeadId> x{{0, 0}}, y{{1, 1}};
    CHECK(compare(x, y) == std::pair<double, double>{0.0, 0.0});

    // circuit of 19 and truth of 21 sharing 18 heads
    std::set<HeadId> truth = heads_n(21), circuit = heads_n(18);
    circuit.insert({5, 0});
    REQUIRE(circuit.size() == 19);
    const auto [tpr, precision] = compare(circuit, truth);
    CHECK(std::abs(tpr - 85.71) <= 0.02);
    CHECK(std::abs(precision - 94.74) <= 0.02);
    CHECK(std::abs(precision - 94.73) <= 0.02);
    CHECK(tpr == doctest::Approx(100.0 * 18 / 21));
    CHECK(precision == doctest::Approx(100.0 * 18 / 19));

    CHECK(error_of([&] { compare(a, {}); }) == ErrorCode::EmptyTruth);
    CHECK(error_of([&] { compare({}, a); }) == ErrorCode::EmptyCircuit);
}

TEST_CASE("APP with the mask forced to every head equals unrestricted PP") {
    const auto spec = spec8();
    const auto model = testutil::random_model(spec, 8, 0.4);
    const auto ds = toy_data(spec, 24, 6);
    const auto pp = run_pp(*model, ds, loose());
    AppConfig cfg;
    cfg.threshold = loose();
    cfg.forced_mask = patching::all_heads(spec);
    const auto app = run_app(*model, ds, ds, cfg);
    CHECK(app.final_circuit.head_set() == pp.circuit.head_set());
    CHECK(app.final_circuit.heads == pp.circuit.heads);
    CHECK(names(app.stages) == std::vector<std::string>{"path_patching"});
    CHECK_FALSE(app.chosen.has_value());
    CHECK(app.reduction == 0.0);
    CHECK(app.final_performance == doctest::Approx(pp.performance));
}

TEST_CASE("APP stages, mask and totals") {
    const auto spec = spec8();
    const auto model = testutil::random_model(spec, 10, 0.4);
    const auto flap_ds = toy_data(spec, 40, 2);
    const auto pp_ds = toy_data(spec, 20, 2);
    AppConfig cfg;
    cfg.threshold = loose();
    cfg.sweep_step = 0.05;
    const auto before = model->meter().snapshot();
    const auto app = run_app(*model, flap_ds, pp_ds, cfg);
    const auto used = model->meter().snapshot() - before;

    CHECK(names(app.stages) == std::vector<std::string>{"flap", "contrastive_flap", "flap_sweep",
                                                        "contrastive_sweep", "merge", "path_patching"});
    CHECK(app.total_flops() + app.evaluation.flops == used);
    CHECK(app.candidates.size() == 9);
    REQUIRE(app.chosen.has_value());
    CHECK(app.merged_mask == app.candidates[*app.chosen].merged);
    CHECK(app.reduction == doctest::Approx(1.0 - app.merged_mask.size() / 16.0));
    for (const auto& h : app.final_circuit.heads) CHECK(app.merged_mask.contains(h));
    for (const auto& c : app.candidates) {
        CHECK(c.vanilla.cliff >= cfg.cliff.min_sparsity - 1e-9);
        for (const auto& h : c.vanilla.heads) CHECK(c.merged.contains(h));
        for (const auto& h : c.contrastive.heads) CHECK(c.merged.contains(h));
    }
    // pp_ds is a prefix of flap_ds: the two FLAP forwards also serve as the PP caches
    CHECK(app.stages[0].flops.passes == 1);
    CHECK(app.stages[1].flops.passes == 1);
    // merge only evaluates merged masks the sweeps have not already scored
    CHECK(app.stages[4].flops.passes <= app.candidates.size());
    CHECK(app.vanilla_curve.grid.front() == doctest::Approx(0.6));
    CHECK(app.vanilla_curve.grid.back() == doctest::Approx(1.0));

    // the sliced context is bit-identical to a fresh one
    const patching::PatchContext fresh(*model, pp_ds);
    const auto direct = patching::automatic_path_patching(fresh, cfg.threshold, app.merged_mask);
    CHECK(direct.heads == app.final_circuit.heads);
    CHECK(patching::circuit_performance(fresh, app.final_circuit.head_set()) == app.final_performance);
}

TEST_CASE("sender-stage FLOPs follow the forward-count prediction and halve with the mask") {
    const auto spec = spec8();
    const auto model = testutil::random_model(spec, 12, 0.4);
    const auto ds = toy_data(spec, 16, 3);
    const patching::PatchContext ctx(*model, ds);
    const auto per_forward = flops_per_forward(spec, ds.pairs.size(), ds.seq());

    auto sender_flops = [&](const std::set<HeadId>& mask, const patching::Receiver& r) {
        const auto before = model->meter().snapshot();
        ctx.patch_all(r, mask);
        return (model->meter().snapshot() - before).flops;
    };
    const auto full = sender_flops(heads_n(16), std::nullopt);
    const auto half = sender_flops(heads_n(8), std::nullopt);
    CHECK(full == 16 * per_forward);
    CHECK(std::abs(static_cast<double>(half) / static_cast<double>(full) - 0.5) <= 0.05 * 0.5);
    // head receiver in layer 1 patches the 8 layer-0 heads with two forwards each
    CHECK(sender_flops(heads_n(16), HeadId{1, 0}) == 2 * 8 * per_forward);

    const auto before = model->meter().snapshot();
    const auto circuit = patching::automatic_path_patching(ctx, loose());
    const auto used = (model->meter().snapshot() - before).flops;
    const auto predicted = patching::predicted_sender_forwards(circuit, spec) * per_forward;
    CHECK(std::abs(static_cast<double>(used) - static_cast<double>(predicted)) <= 0.05 * static_cast<double>(predicted));
}

TEST_CASE("cost report compares APP against the PP circuit") {
    const auto spec = spec8();
    const auto model = testutil::random_model(spec, 8, 0.4);
    const auto ds = toy_data(spec, 24, 6);
    const auto pp = run_pp(*model, ds, loose());
    AppConfig cfg;
    cfg.threshold = loose();
    cfg.forced_mask = patching::all_heads(spec);
    const auto app = run_app(*model, ds, ds, cfg);
    const auto r = cost_report(app, pp, spec);
    CHECK(r.flops_ratio == doctest::Approx(static_cast<double>(pp.total_flops().flops) /
                                           static_cast<double>(app.total_flops().flops)));
    // full mask: APP adds its own context forwards on top of the same search
    CHECK(r.flops_ratio == doctest::Approx(1.0));
    if (!pp.circuit.heads.empty()) {
        CHECK(r.app.tpr == 100.0);
        CHECK(r.app.precision == 100.0);
    }
    CHECK(error_of([&] { cost_report(AppRun{}, pp, spec); }) == ErrorCode::MeterMissing);
    const auto j = report_to_json(r.app);
    CHECK(j.at("flops") == r.app.flops);
    CHECK(heads_from_json(heads_to_json(heads_n(5))) == heads_n(5));
}

TEST_CASE("invalid APP configurations are rejected") {
    AppConfig cfg;
    cfg.sweep_step = 0.0;
    CHECK(error_of([&] { cfg.validate(); }) == ErrorCode::InvalidArgument);
    cfg.sweep_step = 0.01;
    cfg.vanilla_cliffs.clear();
    CHECK(error_of([&] { cfg.validate(); }) == ErrorCode::InvalidArgument);
}
