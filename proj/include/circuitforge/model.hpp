#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "circuitforge/flops.hpp"
#include "circuitforge/kernels.hpp"
#include "circuitforge/tensor.hpp"

namespace circuitforge {

enum class Positional { learned, none };

struct ModelSpec {
    std::size_t n_layers = 2;
    std::size_t n_heads = 8;
    std::size_t d_model = 64;
    std::size_t d_head = 8;
    std::size_t d_ff = 0;
    std::size_t vocab_size = 64;
    std::size_t max_seq = 16;
    float ln_eps = 1e-5f;
    bool attn_only = true;
    Positional positional = Positional::learned;

    std::size_t total_heads() const noexcept { return n_layers * n_heads; }

    // Throws Error(InvalidSpec) when an invariant is violated.
    void validate() const;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct HeadId {
    int layer = 0;
    int head = 0;

    friend auto operator<=>(const HeadId&, const HeadId&) = default;
};

std::string to_string(const HeadId& h);  // "l.h"
HeadId parse_head_id(const std::string& text);

enum class HookSite { head_out, head_in, attn_pattern, resid_pre, resid_post, mlp_out, logits };

// A named activation site. head_out is the per-head z (pre-W_O, [batch, seq, d_head]);
// head_in is the residual stream as seen by one head's layer norm and q/k/v projections.
struct HookPoint {
    int layer = 0;
    HookSite site = HookSite::resid_pre;
    int head = -1;

    static HookPoint head_out(int layer, int head) { return {layer, HookSite::head_out, head}; }
    static HookPoint head_out(HeadId h) { return head_out(h.layer, h.head); }
    static HookPoint head_in(int layer, int head) { return {layer, HookSite::head_in, head}; }
    static HookPoint head_in(HeadId h) { return head_in(h.layer, h.head); }
    static HookPoint attn_pattern(int layer, int head) {
        return {layer, HookSite::attn_pattern, head};
    }
    static HookPoint resid_pre(int layer) { return {layer, HookSite::resid_pre, -1}; }
    static HookPoint resid_post(int layer) { return {layer, HookSite::resid_post, -1}; }
    static HookPoint mlp_out(int layer) { return {layer, HookSite::mlp_out, -1}; }
    static HookPoint logits() { return {-1, HookSite::logits, -1}; }

    bool per_head() const noexcept {
        return site == HookSite::head_out || site == HookSite::head_in ||
               site == HookSite::attn_pattern;
    }

    friend auto operator<=>(const HookPoint&, const HookPoint&) = default;
};

std::string to_string(const HookPoint& p);

using HookSet = std::set<HookPoint>;

HookSet all_head_outs(const ModelSpec& spec);

// Token ids laid out [batch, seq].
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::int32_t> ids;

    std::int32_t at(std::size_t b, std::size_t s) const { return ids[b * seq + s]; }
};

class WeightStore {
public:
    WeightStore(ModelSpec spec, std::map<std::string, Tensor> tensors);

    // Canonical names and shapes implied by a spec.
    static std::map<std::string, std::vector<std::size_t>> required_shapes(const ModelSpec& spec);

    const ModelSpec& spec() const noexcept { return spec_; }
    const Tensor& at(const std::string& name) const;
    const std::map<std::string, Tensor>& tensors() const noexcept { return tensors_; }

private:
    ModelSpec spec_;
    std::map<std::string, Tensor> tensors_;
};

enum class CacheSource { clean, corrupted, patched };

class ActivationCache {
public:
    ActivationCache(std::size_t batch, std::size_t seq, CacheSource source,
                    std::map<HookPoint, Tensor> entries);

    std::size_t batch() const noexcept { return batch_; }
    std::size_t seq() const noexcept { return seq_; }
    CacheSource source() const noexcept { return source_; }

    bool contains(const HookPoint& p) const { return entries_.contains(p); }
    const Tensor& at(const HookPoint& p) const;
    const std::map<HookPoint, Tensor>& entries() const noexcept { return entries_; }
    HookSet keys() const;

private:
    std::size_t batch_;
    std::size_t seq_;
    CacheSource source_;
    std::map<HookPoint, Tensor> entries_;
};

using CachePtr = std::shared_ptr<const ActivationCache>;

// Activations to overwrite during a forward pass. Substitutions and freezes
// behave the same mechanically; they are kept apart so callers can report
// which hooks carried the intervention and which were pinned.
class InterventionPlan {
public:
    InterventionPlan& substitute(const HookPoint& p, CachePtr source);
    InterventionPlan& freeze(const HookPoint& p, CachePtr source);

    bool empty() const noexcept { return sources_.empty(); }
    const CachePtr* source_for(const HookPoint& p) const;
    const std::vector<HookPoint>& substitutions() const noexcept { return substitutions_; }
    const std::vector<HookPoint>& freezes() const noexcept { return freezes_; }

    // Throws PlanShapeMismatch unless every source holds its hook with batch/seq as given.
    void check(std::size_t batch, std::size_t seq) const;

private:
    void add(const HookPoint& p, CachePtr source);

    std::map<HookPoint, CachePtr> sources_;
    std::vector<HookPoint> substitutions_;
    std::vector<HookPoint> freezes_;
};

struct ForwardResult {
    Tensor logits;  // [batch, seq, vocab]
    CachePtr cache;
};

// Forward-pass engine over an immutable weight store. Safe to call
// concurrently; each call owns its cache and the meter is atomic.
class Model {
public:
    explicit Model(std::shared_ptr<const WeightStore> weights,
                   kernels::Backend backend = kernels::Backend::parallel);

    const ModelSpec& spec() const noexcept { return weights_->spec(); }
    const WeightStore& weights() const noexcept { return *weights_; }
    std::shared_ptr<const WeightStore> weights_ptr() const noexcept { return weights_; }
    kernels::Backend backend() const noexcept { return backend_; }

    ForwardResult forward(const TokenBatch& tokens, const InterventionPlan& plan = {},
                          const HookSet& record = {},
                          CacheSource source = CacheSource::clean) const;

    FlopMeter& meter() const noexcept { return *meter_; }

private:
    std::shared_ptr<const WeightStore> weights_;
    kernels::Backend backend_;
    std::shared_ptr<FlopMeter> meter_;
};

}  // namespace circuitforge
