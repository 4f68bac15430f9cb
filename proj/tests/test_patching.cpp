#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "circuitforge/patching.hpp"
#include "helpers.hpp"

using namespace circuitforge;
using namespace circuitforge::patching;
using testutil::error_of;

namespace {

ModelSpec wide_spec() {
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

// Reference selection rule over a flat vector (all heads at one layer).
std::vector<std::size_t> oracle_select(const std::vector<double>& x, double k_adj, double eps) {
    double mx = 0.0, mean = 0.0;
    for (double v : x) {
        mx = std::max(mx, std::abs(v));
        mean += v;
    }
    mean /= static_cast<double>(x.size());
    if (mx < eps) return {};
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(x.size()));
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (std::abs(x[i]) - std::abs(mean) > k_adj * sd) out.push_back(i);
    }
    return out;
}

ImportanceMatrix one_layer(const std::vector<double>& x) {
    ImportanceMatrix m(1, x.size(), std::nullopt);
    for (std::size_t h = 0; h < x.size(); ++h) m.set({0, static_cast<int>(h)}, x[h]);
    return m;
}

std::vector<std::size_t> indices(const std::vector<HeadId>& heads) {
    std::vector<std::size_t> out;
    for (const auto& h : heads) out.push_back(static_cast<std::size_t>(h.head));
    return out;
}

double ld_of(const Model& model, const tasks::TaskDataset& ds, const InterventionPlan& plan) {
    return tasks::mean_logit_diff(model.forward(ds.clean_batch(), plan).logits, ds);
}

}  // namespace

TEST_CASE("depth-adjusted constant") {
    CHECK(std::abs(adjusted_k(1.0, 0, 12) - (1.0 + 2.0 / std::sqrt(12.0))) <= 1e-9);
    CHECK(adjusted_k(1.0, 0, 12) == doctest::Approx(1.577).epsilon(1e-3));
    CHECK(std::abs(adjusted_k(1.5, 1, 8) - (1.5 + 2.0 / std::sqrt(16.0))) <= 1e-12);
}

TEST_CASE("threshold: degenerate and gated matrices select nothing") {
    ThresholdConfig cfg;
    cfg.K = 1.0;
    cfg.epsilon = 0.01;
    CHECK(evaluate_thresholds(one_layer(std::vector<double>(8, 0.3)), cfg, 8).empty());
    CHECK(evaluate_thresholds(one_layer({0.005, 0, 0, 0, 0, 0, 0, 0}), cfg, 8).empty());
    CHECK(evaluate_thresholds(one_layer({-0.005, 0, 0, 0, 0, 0, 0, 0}), cfg, 8).empty());
    CHECK(indices(evaluate_thresholds(one_layer({0.02, 0, 0, 0, 0, 0, 0, 0}), cfg, 8)) ==
          std::vector<std::size_t>{0});
}

TEST_CASE("threshold: agrees with a reference rule on random matrices and respects the gate") {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> scale(1e-4, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::size_t gated = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t H = 4 + trial % 13;
        const double s = scale(rng);
        std::vector<double> x(H);
        for (auto& v : x) v = s * noise(rng);
        if (trial % 7 == 0) x[trial % H] += 5.0 * s;
        ThresholdConfig cfg;
        cfg.K = 0.5 + (trial % 5) * 0.5;
        cfg.epsilon = trial % 2 == 0 ? 0.01 : 0.5;
        const auto got = evaluate_thresholds(one_layer(x), cfg, H);
        double mx = 0.0;
        for (double v : x) mx = std::max(mx, std::abs(v));
        if (mx < cfg.epsilon) {
            CHECK(got.empty());
            ++gated;
        }
        CHECK(indices(got) == oracle_select(x, adjusted_k(cfg.K, 0, H), cfg.epsilon));
    }
    CHECK(gated > 100);
}

TEST_CASE("threshold: heads outside the mask count as zero and are never selected") {
    ThresholdConfig cfg;
    cfg.epsilon = 0.01;
    ImportanceMatrix m(1, 8, std::nullopt);
    m.set({0, 3}, 0.4);
    CHECK(m.count() == 1);
    CHECK(indices(evaluate_thresholds(m, cfg, 8)) == std::vector<std::size_t>{3});
    std::vector<double> full(8, 0.0);
    full[3] = 0.4;
    CHECK(indices(evaluate_thresholds(m, cfg, 8)) == oracle_select(full, adjusted_k(1.0, 0, 8), 0.01));
    CHECK(evaluate_thresholds(ImportanceMatrix(1, 8, std::nullopt), cfg, 8).empty());
}

TEST_CASE("a head with zero output weights has no influence") {
    const auto spec = wide_spec();
    auto tensors = train::random_weights(spec, 7, 0.3)->tensors();
    auto& wo = tensors.at("blocks.0.attn.W_O");
    const std::size_t block = spec.d_head * spec.d_model;
    std::fill(wo.data() + 2 * block, wo.data() + 3 * block, 0.0f);
    const Model model(std::make_shared<const WeightStore>(spec, tensors));
    const auto ds = toy_data(spec, 16, 1);
    const PatchContext ctx(model, ds);
    CHECK(std::abs(ctx.path_patch({0, 2}, std::nullopt).influence) <= 1e-6);
    CHECK(std::abs(ctx.path_patch({0, 2}, HeadId{1, 5}).influence) <= 1e-6);
    CHECK(std::abs(ctx.path_patch({0, 3}, std::nullopt).influence) > 1e-6);
}

TEST_CASE("patching from an identical corrupted cache has no influence") {
    const auto spec = wide_spec();
    const auto model = testutil::random_model(spec, 3, 0.3);
    const auto ds = toy_data(spec, 12, 2);
    const auto clean = model->forward(ds.clean_batch(), {}, all_head_outs(spec)).cache;
    for (const HeadId& h : all_heads(spec)) {
        CHECK(path_patch(*model, ds, h, std::nullopt, clean, clean).influence == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
        if (h.layer == 0) {
            CHECK(path_patch(*model, ds, h, HeadId{1, 0}, clean, clean).influence ==
                  doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
        }
    }
}

TEST_CASE("path patch matches an explicitly composed intervention") {
    const auto spec = wide_spec();
    const auto model = testutil::random_model(spec, 4, 0.3);
    const auto ds = toy_data(spec, 10, 3);
    const PatchContext ctx(*model, ds);
    const HeadId sender{0, 1};
    const HeadId receiver{1, 6};

    InterventionPlan to_logits;
    for (const HeadId& h : all_heads(spec)) {
        if (h == sender) to_logits.substitute(HookPoint::head_out(h), ctx.corrupted_cache());
        else to_logits.freeze(HookPoint::head_out(h), ctx.clean_cache());
    }
    const auto direct = ctx.path_patch(sender, std::nullopt);
    CHECK(direct.ld_patched == doctest::Approx(ld_of(*model, ds, to_logits)).epsilon(1e-9));
    CHECK(direct.ld_baseline == doctest::Approx(ctx.ld_clean()));
    CHECK(direct.influence ==
          doctest::Approx((direct.ld_patched - ctx.ld_clean()) / std::max(std::abs(ctx.ld_clean()), 1e-8)));

    const auto phase2 = model->forward(ds.clean_batch(), to_logits, {HookPoint::head_in(receiver)});
    InterventionPlan phase3;
    phase3.substitute(HookPoint::head_in(receiver), phase2.cache);
    CHECK(ctx.path_patch(sender, receiver).ld_patched == doctest::Approx(ld_of(*model, ds, phase3)).epsilon(1e-9));

    CHECK(error_of([&] { ctx.path_patch({1, 0}, HeadId{1, 2}); }) == ErrorCode::LayerOrderViolation);
    CHECK(error_of([&] { ctx.path_patch({1, 0}, HeadId{0, 2}); }) == ErrorCode::LayerOrderViolation);
}

TEST_CASE("caches that do not fit the dataset are rejected") {
    const auto spec = wide_spec();
    const auto model = testutil::random_model(spec, 4, 0.3);
    const auto ds = toy_data(spec, 6, 3);
    const auto other = toy_data(spec, 4, 3);
    const auto clean = model->forward(ds.clean_batch(), {}, all_head_outs(spec)).cache;
    const auto small = model->forward(other.clean_batch(), {}, all_head_outs(spec)).cache;
    const auto bare = model->forward(ds.clean_batch()).cache;
    CHECK(error_of([&] { path_patch(*model, ds, {0, 0}, std::nullopt, clean, small); }) == ErrorCode::CacheMismatch);
    CHECK(error_of([&] { path_patch(*model, ds, {0, 0}, std::nullopt, clean, bare); }) == ErrorCode::CacheMismatch);
    CHECK(error_of([&] { PatchContext(*model, tasks::TaskDataset{}); }) == ErrorCode::EmptyDataset);
}

TEST_CASE("circuit performance: full circuit restores everything, empty circuit is the corrupted run") {
    const auto spec = wide_spec();
    const auto model = testutil::random_model(spec, 6, 0.3);
    const auto ds = toy_data(spec, 20, 5);
    const PatchContext ctx(*model, ds);
    CHECK(circuit_performance(ctx, all_heads(spec)) == doctest::Approx(100.0).epsilon(1e-3));
    CHECK(circuit_performance(ctx, {}) ==
          doctest::Approx(100.0 * ctx.ld_corrupted() / ctx.ld_clean()).epsilon(1e-6));
    CHECK(circuit_performance(*model, ds, all_heads(spec)) == doctest::Approx(100.0).epsilon(1e-3));
}

TEST_CASE("automatic path patching: empty mask, forward accounting and full-mask identity") {
    const auto spec = wide_spec();
    const auto model = testutil::random_model(spec, 8, 0.4);
    const auto ds = toy_data(spec, 24, 6);
    const PatchContext ctx(*model, ds);
    ThresholdConfig cfg;
    cfg.K = 0.05;
    cfg.epsilon = 1e-6;

    auto before = model->meter().snapshot();
    const auto empty = automatic_path_patching(ctx, cfg, std::set<HeadId>{});
    CHECK(empty.heads.empty());
    CHECK((model->meter().snapshot() - before).passes == 0);

    before = model->meter().snapshot();
    const auto free_run = automatic_path_patching(ctx, cfg);
    const auto passes = (model->meter().snapshot() - before).passes;
    CHECK(passes == predicted_sender_forwards(free_run, spec));
    CHECK(free_run.receiver_expansions == free_run.size());

    const auto masked = automatic_path_patching(ctx, cfg, all_heads(spec));
    CHECK(masked.heads == free_run.heads);
    CHECK(masked.head_set() == free_run.head_set());

    std::set<HeadId> half;
    for (const auto& h : all_heads(spec)) {
        if (h.head % 2 == 0) half.insert(h);
    }
    const auto restricted = automatic_path_patching(ctx, cfg, half);
    for (const auto& h : restricted.heads) CHECK(half.contains(h));
    for (const auto& h : restricted.patched_senders) CHECK(half.contains(h));
}

TEST_CASE("circuit JSON and bookkeeping") {
    const auto spec = wide_spec();
    Circuit c;
    c.heads = {{1, 2}, {0, 5}};
    c.provenance[{1, 2}] = {std::nullopt, 0.25};
    c.provenance[{0, 5}] = {HeadId{1, 2}, -0.5};
    ThresholdConfig cfg;
    const auto j = circuit_to_json(c, "abc", tasks::TaskKind::ToyInduction, cfg, mask_id(all_heads(spec), spec),
                                   {42.0, 2, sparsity_of(2, spec)}, 1234);
    const auto back = circuit_from_json(j);
    CHECK(back.heads == c.heads);
    CHECK(back.provenance.at({0, 5}).receiver == std::optional<HeadId>(HeadId{1, 2}));
    CHECK(back.provenance.at({1, 2}).score == 0.25);
    CHECK(j.at("mask_id") == "full");
    CHECK(j.dump() == circuit_to_json(back, "abc", tasks::TaskKind::ToyInduction, cfg, "full",
                                      {42.0, 2, sparsity_of(2, spec)}, 1234).dump());

    const std::set<HeadId> m1{{0, 1}, {1, 1}}, m2{{0, 1}, {1, 2}};
    CHECK(mask_id(m1, spec) == mask_id(m1, spec));
    CHECK(mask_id(m1, spec) != mask_id(m2, spec));

    ModelSpec gpt2;
    gpt2.n_layers = 12;
    gpt2.n_heads = 12;
    CHECK(sparsity_of(21, gpt2) == doctest::Approx(1.0 - 21.0 / 144.0));
    CHECK(std::round(sparsity_of(21, gpt2) * 1000) / 1000 == doctest::Approx(0.854));
    CHECK(std::round(sparsity_of(21, gpt2) * 100) / 100 == doctest::Approx(0.85));
}
