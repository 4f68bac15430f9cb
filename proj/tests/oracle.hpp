#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <vector>

#include "circuitforge/patching.hpp"
#include "circuitforge/tasks.hpp"

namespace testutil {

// Independent ground truth for the toy induction model: every head is scored by
// attention diagnostics and by its total effect (its output alone corrupted,
// everything downstream recomputed).
struct ToyTruth {
    struct Head {
        circuitforge::HeadId id;
        double prev_attention = 0.0;       // mean attention from B to the first A
        double induction_attention = 0.0;  // mean attention from the final A to B
        double total_effect = 0.0;         // (LD_patched - LD_clean) / LD_clean
    };
    std::vector<Head> heads;
    std::optional<circuitforge::HeadId> previous_token;
    std::optional<circuitforge::HeadId> induction;

    std::set<circuitforge::HeadId> ground_truth() const {
        std::set<circuitforge::HeadId> out;
        if (previous_token) out.insert(*previous_token);
        if (induction) out.insert(*induction);
        return out;
    }
    // Heads ordered by decreasing |total effect|.
    std::vector<circuitforge::HeadId> by_effect() const {
        auto sorted = heads;
        std::stable_sort(sorted.begin(), sorted.end(), [](const Head& a, const Head& b) {
            return std::abs(a.total_effect) > std::abs(b.total_effect);
        });
        std::vector<circuitforge::HeadId> out;
        for (const auto& h : sorted) out.push_back(h.id);
        return out;
    }
};

inline ToyTruth toy_truth(const circuitforge::Model& model, const circuitforge::tasks::TaskDataset& ds,
                          double attention_gate = 0.5) {
    using namespace circuitforge;
    const auto& spec = model.spec();
    const std::size_t S = ds.seq();
    HookSet record = all_head_outs(spec);
    for (const auto& h : patching::all_heads(spec)) record.insert(HookPoint::attn_pattern(h.layer, h.head));
    const auto clean = model.forward(ds.clean_batch(), {}, record, CacheSource::clean);
    const auto corrupted = model.forward(ds.corrupted_batch(), {}, all_head_outs(spec), CacheSource::corrupted);
    const double ld_clean = tasks::mean_logit_diff(clean.logits, ds);

    ToyTruth truth;
    const double n = static_cast<double>(ds.pairs.size());
    for (const auto& id : patching::all_heads(spec)) {
        ToyTruth::Head h;
        h.id = id;
        const Tensor& p = clean.cache->at(HookPoint::attn_pattern(id.layer, id.head));
        for (std::size_t b = 0; b < ds.pairs.size(); ++b) {
            const std::size_t a = ds.pairs[b].meta.at("a_pos").get<std::size_t>();
            h.prev_attention += p[b * S * S + (a + 1) * S + a] / n;
            h.induction_attention += p[b * S * S + (S - 1) * S + a + 1] / n;
        }
        InterventionPlan plan;
        plan.substitute(HookPoint::head_out(id), corrupted.cache);
        const double ld = tasks::mean_logit_diff(model.forward(ds.clean_batch(), plan).logits, ds);
        h.total_effect = (ld - ld_clean) / ld_clean;
        truth.heads.push_back(h);
    }
    auto strongest = [&](auto gate) {
        std::optional<HeadId> best;
        double best_effect = 0.0;
        for (const auto& h : truth.heads) {
            if (!gate(h)) continue;
            if (!best || std::abs(h.total_effect) > best_effect) {
                best = h.id;
                best_effect = std::abs(h.total_effect);
            }
        }
        return best;
    };
    truth.previous_token = strongest([&](const ToyTruth::Head& h) { return h.prev_attention >= attention_gate; });
    truth.induction = strongest([&](const ToyTruth::Head& h) {
        return h.induction_attention >= attention_gate &&
               (!truth.previous_token || h.id.layer > truth.previous_token->layer);
    });
    return truth;
}

}  // namespace testutil
