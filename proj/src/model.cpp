#include "circuitforge/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "circuitforge/error.hpp"

namespace circuitforge {

void ModelSpec::validate() const {
    auto bad = [](const std::string& what) { fail(ErrorCode::InvalidSpec, what); };
    if (n_layers < 1) bad("n_layers must be >= 1");
    if (n_heads < 1) bad("n_heads must be >= 1");
    if (vocab_size < 2) bad("vocab_size must be >= 2");
    if (max_seq < 1) bad("max_seq must be >= 1");
    if (d_head * n_heads != d_model) bad("d_head * n_heads must equal d_model");
    if (attn_only != (d_ff == 0)) bad("attn_only must hold exactly when d_ff == 0");
    if (!(ln_eps > 0.0f) || !std::isfinite(ln_eps)) bad("ln_eps must be a small positive value");
}

std::string to_string(const HeadId& h) {
    return std::to_string(h.layer) + "." + std::to_string(h.head);
}

HeadId parse_head_id(const std::string& text) {
    const auto dot = text.find('.');
    if (dot == std::string::npos) {
        fail(ErrorCode::InvalidArgument, "head id must look like 'layer.head': " + text);
    }
    try {
        std::size_t used_l = 0;
        std::size_t used_h = 0;
        const std::string l = text.substr(0, dot);
        const std::string h = text.substr(dot + 1);
        HeadId id{std::stoi(l, &used_l), std::stoi(h, &used_h)};
        if (used_l != l.size() || used_h != h.size() || id.layer < 0 || id.head < 0) {
            throw std::invalid_argument(text);
        }
        return id;
    } catch (const std::logic_error&) {
        fail(ErrorCode::InvalidArgument, "head id must look like 'layer.head': " + text);
    }
}

std::string to_string(const HookPoint& p) {
    const std::string block = "blocks." + std::to_string(p.layer) + ".";
    switch (p.site) {
        case HookSite::head_out: return block + "attn.hook_z." + std::to_string(p.head);
        case HookSite::head_in: return block + "attn.hook_in." + std::to_string(p.head);
        case HookSite::attn_pattern:
            return block + "attn.hook_pattern." + std::to_string(p.head);
        case HookSite::resid_pre: return block + "hook_resid_pre";
        case HookSite::resid_post: return block + "hook_resid_post";
        case HookSite::mlp_out: return block + "hook_mlp_out";
        case HookSite::logits: return "hook_logits";
    }
    return "?";
}

HookSet all_head_outs(const ModelSpec& spec) {
    HookSet out;
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        for (std::size_t h = 0; h < spec.n_heads; ++h) {
            out.insert(HookPoint::head_out(static_cast<int>(l), static_cast<int>(h)));
        }
    }
    return out;
}

// ---------------------------------------------------------------- weights

std::map<std::string, std::vector<std::size_t>> WeightStore::required_shapes(
    const ModelSpec& s) {
    std::map<std::string, std::vector<std::size_t>> shapes;
    shapes["embed.W_E"] = {s.vocab_size, s.d_model};
    if (s.positional == Positional::learned) shapes["pos_embed.W_pos"] = {s.max_seq, s.d_model};
    for (std::size_t l = 0; l < s.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        shapes[p + "ln1.w"] = {s.d_model};
        shapes[p + "ln1.b"] = {s.d_model};
        shapes[p + "attn.W_Q"] = {s.n_heads, s.d_model, s.d_head};
        shapes[p + "attn.W_K"] = {s.n_heads, s.d_model, s.d_head};
        shapes[p + "attn.W_V"] = {s.n_heads, s.d_model, s.d_head};
        shapes[p + "attn.b_Q"] = {s.n_heads, s.d_head};
        shapes[p + "attn.b_K"] = {s.n_heads, s.d_head};
        shapes[p + "attn.b_V"] = {s.n_heads, s.d_head};
        shapes[p + "attn.W_O"] = {s.n_heads, s.d_head, s.d_model};
        shapes[p + "attn.b_O"] = {s.d_model};
        if (!s.attn_only) {
            shapes[p + "ln2.w"] = {s.d_model};
            shapes[p + "ln2.b"] = {s.d_model};
            shapes[p + "mlp.W_in"] = {s.d_model, s.d_ff};
            shapes[p + "mlp.b_in"] = {s.d_ff};
            shapes[p + "mlp.W_out"] = {s.d_ff, s.d_model};
            shapes[p + "mlp.b_out"] = {s.d_model};
        }
    }
    shapes["ln_final.w"] = {s.d_model};
    shapes["ln_final.b"] = {s.d_model};
    shapes["unembed.W_U"] = {s.d_model, s.vocab_size};
    shapes["unembed.b_U"] = {s.vocab_size};
    return shapes;
}

namespace {

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

}  // namespace

WeightStore::WeightStore(ModelSpec spec, std::map<std::string, Tensor> tensors)
    : spec_(spec), tensors_(std::move(tensors)) {
    spec_.validate();
    const auto required = required_shapes(spec_);
    for (const auto& [name, shape] : required) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) fail(ErrorCode::MissingTensor, "missing tensor " + name);
        if (it->second.shape() != shape) {
            fail(ErrorCode::ShapeMismatch, name + " has shape " + shape_str(it->second.shape()) +
                                               ", expected " + shape_str(shape));
        }
        if (!it->second.all_finite()) {
            fail(ErrorCode::NonFiniteValue, "tensor " + name + " has a non-finite value");
        }
    }
    for (const auto& [name, t] : tensors_) {
        if (!required.contains(name)) fail(ErrorCode::ShapeMismatch, "unexpected tensor " + name);
    }
}

const Tensor& WeightStore::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) fail(ErrorCode::MissingTensor, "missing tensor " + name);
    return it->second;
}

// ---------------------------------------------------------------- cache & plan

ActivationCache::ActivationCache(std::size_t batch, std::size_t seq, CacheSource source,
                                 std::map<HookPoint, Tensor> entries)
    : batch_(batch), seq_(seq), source_(source), entries_(std::move(entries)) {
    for (const auto& [hook, t] : entries_) {
        if (t.rank() < 2 || t.dim(0) != batch_ || t.dim(1) != seq_) {
            fail(ErrorCode::CacheMismatch, "cache entry " + to_string(hook) +
                                               " does not share batch/seq dims");
        }
    }
}

const Tensor& ActivationCache::at(const HookPoint& p) const {
    auto it = entries_.find(p);
    if (it == entries_.end()) fail(ErrorCode::CacheMismatch, "cache lacks " + to_string(p));
    return it->second;
}

HookSet ActivationCache::keys() const {
    HookSet out;
    for (const auto& [hook, t] : entries_) out.insert(hook);
    return out;
}

void InterventionPlan::add(const HookPoint& p, CachePtr source) {
    if (!source) fail(ErrorCode::PlanShapeMismatch, "null source cache for " + to_string(p));
    if (p.site == HookSite::logits) {
        fail(ErrorCode::PlanShapeMismatch, "logits cannot be substituted");
    }
    if (!sources_.emplace(p, std::move(source)).second) {
        fail(ErrorCode::PlanShapeMismatch, "hook " + to_string(p) + " appears twice in plan");
    }
}

InterventionPlan& InterventionPlan::substitute(const HookPoint& p, CachePtr source) {
    add(p, std::move(source));
    substitutions_.push_back(p);
    return *this;
}

InterventionPlan& InterventionPlan::freeze(const HookPoint& p, CachePtr source) {
    add(p, std::move(source));
    freezes_.push_back(p);
    return *this;
}

const CachePtr* InterventionPlan::source_for(const HookPoint& p) const {
    auto it = sources_.find(p);
    return it == sources_.end() ? nullptr : &it->second;
}

void InterventionPlan::check(std::size_t batch, std::size_t seq) const {
    for (const auto& [hook, src] : sources_) {
        if (src->batch() != batch || src->seq() != seq) {
            fail(ErrorCode::PlanShapeMismatch,
                 "plan source for " + to_string(hook) + " has mismatched batch/seq");
        }
        if (!src->contains(hook)) {
            fail(ErrorCode::PlanShapeMismatch, "plan source lacks " + to_string(hook));
        }
    }
}

// ---------------------------------------------------------------- forward

Model::Model(std::shared_ptr<const WeightStore> weights, kernels::Backend backend)
    : weights_(std::move(weights)), backend_(backend), meter_(std::make_shared<FlopMeter>()) {
    if (!weights_) fail(ErrorCode::InvalidArgument, "model needs a weight store");
}

namespace {

std::vector<std::size_t> expected_shape(const ModelSpec& s, const HookPoint& p, std::size_t batch,
                                        std::size_t seq) {
    switch (p.site) {
        case HookSite::head_out: return {batch, seq, s.d_head};
        case HookSite::attn_pattern: return {batch, seq, seq};
        case HookSite::logits: return {batch, seq, s.vocab_size};
        default: return {batch, seq, s.d_model};
    }
}

bool hook_in_range(const ModelSpec& s, const HookPoint& p) {
    if (p.site == HookSite::logits) return true;
    if (p.layer < 0 || static_cast<std::size_t>(p.layer) >= s.n_layers) return false;
    if (p.per_head()) return p.head >= 0 && static_cast<std::size_t>(p.head) < s.n_heads;
    if (p.site == HookSite::mlp_out && s.attn_only) return false;
    return p.head == -1;
}

class Recorder {
public:
    Recorder(const HookSet& wanted, const InterventionPlan& plan, const ModelSpec& spec,
             std::size_t batch, std::size_t seq)
        : wanted_(wanted), plan_(plan), spec_(spec), batch_(batch), seq_(seq) {}

    // Applies a substitution (if planned) to `values`, then records it if requested.
    void visit(const HookPoint& p, std::span<float> values) {
        if (const CachePtr* src = plan_.source_for(p)) {
            const Tensor& t = (*src)->at(p);
            if (t.shape() != expected_shape(spec_, p, batch_, seq_)) {
                fail(ErrorCode::PlanShapeMismatch, "substitute for " + to_string(p) +
                                                       " has the wrong shape");
            }
            std::copy(t.values().begin(), t.values().end(), values.begin());
        }
        if (wanted_.contains(p)) {
            entries_.emplace(p, Tensor(expected_shape(spec_, p, batch_, seq_),
                                       std::vector<float>(values.begin(), values.end())));
        }
    }

    bool substituted(const HookPoint& p) const { return plan_.source_for(p) != nullptr; }
    bool wanted(const HookPoint& p) const { return wanted_.contains(p); }

    std::map<HookPoint, Tensor> take() { return std::move(entries_); }

private:
    const HookSet& wanted_;
    const InterventionPlan& plan_;
    const ModelSpec& spec_;
    std::size_t batch_;
    std::size_t seq_;
    std::map<HookPoint, Tensor> entries_;
};

}  // namespace

ForwardResult Model::forward(const TokenBatch& tokens, const InterventionPlan& plan,
                             const HookSet& record, CacheSource source) const {
    const ModelSpec& s = spec();
    const std::size_t B = tokens.batch;
    const std::size_t S = tokens.seq;
    const std::size_t D = s.d_model;
    const std::size_t H = s.n_heads;
    const std::size_t dh = s.d_head;
    const std::size_t V = s.vocab_size;
    const std::size_t rows = B * S;

    if (tokens.ids.size() != rows) fail(ErrorCode::InvalidArgument, "token batch size mismatch");
    if (S > s.max_seq) {
        fail(ErrorCode::SeqTooLong, "sequence length " + std::to_string(S) + " exceeds max_seq " +
                                        std::to_string(s.max_seq));
    }
    for (std::int32_t id : tokens.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= V) {
            fail(ErrorCode::TokenOutOfRange, "token id " + std::to_string(id) + " out of range");
        }
    }
    for (const HookPoint& p : record) {
        if (!hook_in_range(s, p)) fail(ErrorCode::InvalidArgument, "bad hook " + to_string(p));
    }
    plan.check(B, S);
    for (const HookPoint& p : plan.substitutions()) {
        if (!hook_in_range(s, p)) fail(ErrorCode::PlanShapeMismatch, "bad hook " + to_string(p));
    }
    for (const HookPoint& p : plan.freezes()) {
        if (!hook_in_range(s, p)) fail(ErrorCode::PlanShapeMismatch, "bad hook " + to_string(p));
    }

    const WeightStore& w = *weights_;
    const auto be = backend_;
    Recorder rec(record, plan, s, B, S);

    std::vector<float> resid(rows * D);
    {
        const Tensor& we = w.at("embed.W_E");
        const Tensor* wp = s.positional == Positional::learned ? &w.at("pos_embed.W_pos") : nullptr;
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t t = 0; t < S; ++t) {
                float* dst = resid.data() + (b * S + t) * D;
                const float* e = we.data() + static_cast<std::size_t>(tokens.at(b, t)) * D;
                for (std::size_t i = 0; i < D; ++i) dst[i] = e[i] + (wp ? wp->data()[t * D + i] : 0.0f);
            }
        }
    }

    std::vector<float> normed(rows * D);
    std::vector<float> head_normed(rows * D);
    std::vector<float> head_resid(rows * D);
    std::vector<float> q(rows * dh), k(rows * dh), v(rows * dh), z(rows * dh);
    std::vector<float> pattern(B * S * S);
    std::vector<float> z_all(rows * H * dh);
    std::vector<float> attn_out(rows * D);

    for (std::size_t l = 0; l < s.n_layers; ++l) {
        const int li = static_cast<int>(l);
        const std::string p = "blocks." + std::to_string(l) + ".";
        rec.visit(HookPoint::resid_pre(li), resid);

        const Tensor& ln1w = w.at(p + "ln1.w");
        const Tensor& ln1b = w.at(p + "ln1.b");
        kernels::layer_norm(be, resid, ln1w.values(), ln1b.values(), normed, rows, D, s.ln_eps);

        const Tensor& WQ = w.at(p + "attn.W_Q");
        const Tensor& WK = w.at(p + "attn.W_K");
        const Tensor& WV = w.at(p + "attn.W_V");
        const Tensor& bQ = w.at(p + "attn.b_Q");
        const Tensor& bK = w.at(p + "attn.b_K");
        const Tensor& bV = w.at(p + "attn.b_V");

        for (std::size_t h = 0; h < H; ++h) {
            const int hi = static_cast<int>(h);
            const HookPoint z_hook = HookPoint::head_out(li, hi);
            const HookPoint in_hook = HookPoint::head_in(li, hi);
            const HookPoint pat_hook = HookPoint::attn_pattern(li, hi);

            const bool need_attention = !rec.substituted(z_hook) || rec.wanted(pat_hook) ||
                                        rec.substituted(pat_hook);
            std::span<const float> input = normed;
            if (rec.substituted(in_hook) || rec.wanted(in_hook)) {
                std::copy(resid.begin(), resid.end(), head_resid.begin());
                rec.visit(in_hook, head_resid);
                if (rec.substituted(in_hook)) {
                    kernels::layer_norm(be, head_resid, ln1w.values(), ln1b.values(), head_normed,
                                        rows, D, s.ln_eps);
                    input = head_normed;
                }
            }

            if (need_attention) {
                const auto wslice = [&](const Tensor& t) {
                    return std::span<const float>(t.data() + h * D * dh, D * dh);
                };
                const auto bslice = [&](const Tensor& t) {
                    return std::span<const float>(t.data() + h * dh, dh);
                };
                kernels::matmul(be, input, wslice(WQ), bslice(bQ), q, rows, D, dh);
                kernels::matmul(be, input, wslice(WK), bslice(bK), k, rows, D, dh);
                kernels::matmul(be, input, wslice(WV), bslice(bV), v, rows, D, dh);
                kernels::causal_attention(be, q, k, v, pattern, z, B, S, dh);
                if (rec.substituted(pat_hook)) {
                    rec.visit(pat_hook, pattern);
                    kernels::apply_pattern(be, pattern, v, z, B, S, dh);
                } else {
                    rec.visit(pat_hook, pattern);
                }
            }
            rec.visit(z_hook, z);

            for (std::size_t r = 0; r < rows; ++r) {
                std::copy_n(z.data() + r * dh, dh, z_all.data() + r * H * dh + h * dh);
            }
        }

        kernels::matmul(be, z_all, w.at(p + "attn.W_O").values(), w.at(p + "attn.b_O").values(),
                        attn_out, rows, H * dh, D);
        for (std::size_t i = 0; i < resid.size(); ++i) resid[i] += attn_out[i];

        if (!s.attn_only) {
            const std::size_t F = s.d_ff;
            kernels::layer_norm(be, resid, w.at(p + "ln2.w").values(), w.at(p + "ln2.b").values(),
                                normed, rows, D, s.ln_eps);
            std::vector<float> hidden(rows * F);
            kernels::matmul(be, normed, w.at(p + "mlp.W_in").values(),
                            w.at(p + "mlp.b_in").values(), hidden, rows, D, F);
            kernels::gelu(be, hidden);
            std::vector<float> mlp_out(rows * D);
            kernels::matmul(be, hidden, w.at(p + "mlp.W_out").values(),
                            w.at(p + "mlp.b_out").values(), mlp_out, rows, F, D);
            rec.visit(HookPoint::mlp_out(li), mlp_out);
            for (std::size_t i = 0; i < resid.size(); ++i) resid[i] += mlp_out[i];
        }
        rec.visit(HookPoint::resid_post(li), resid);
    }

    kernels::layer_norm(be, resid, w.at("ln_final.w").values(), w.at("ln_final.b").values(),
                        normed, rows, D, s.ln_eps);
    Tensor logits({B, S, V});
    kernels::matmul(be, normed, w.at("unembed.W_U").values(), w.at("unembed.b_U").values(),
                    logits.values(), rows, D, V);
    rec.visit(HookPoint::logits(), logits.values());

    meter_->record(s, B, S);
    return {std::move(logits), std::make_shared<const ActivationCache>(B, S, source, rec.take())};
}

}  // namespace circuitforge
