#include "circuitforge/patching.hpp"

#include <cmath>
#include <deque>
#include <exception>
#include <iomanip>
#include <sstream>

#include "circuitforge/error.hpp"

namespace circuitforge::patching {

using nlohmann::json;

void ThresholdConfig::validate() const {
    if (!(K > 0.0)) fail(ErrorCode::InvalidArgument, "K must be > 0");
    if (!(epsilon > 0.0)) fail(ErrorCode::InvalidArgument, "epsilon must be > 0");
    if (K_grid.empty() || epsilon_grid.empty()) {
        fail(ErrorCode::InvalidArgument, "threshold grids must be nonempty");
    }
}

double adjusted_k(double K, int sender_layer, std::size_t n_heads) {
    const double depth = static_cast<double>(sender_layer) + 1.0;
    return K + 2.0 / std::sqrt(depth * static_cast<double>(n_heads));
}

std::string to_string(const Receiver& r) { return r ? circuitforge::to_string(*r) : "logits"; }

ImportanceMatrix::ImportanceMatrix(std::size_t layers_, std::size_t heads_, Receiver receiver_)
    : layers(layers_),
      heads(heads_),
      scores(layers_ * heads_, 0.0),
      evaluated(layers_ * heads_, 0),
      receiver(receiver_) {}

void ImportanceMatrix::set(HeadId h, double v) {
    const std::size_t i = static_cast<std::size_t>(h.layer) * heads + static_cast<std::size_t>(h.head);
    scores.at(i) = v;
    evaluated.at(i) = 1;
}

double ImportanceMatrix::at(HeadId h) const {
    return scores.at(static_cast<std::size_t>(h.layer) * heads + static_cast<std::size_t>(h.head));
}

bool ImportanceMatrix::has(HeadId h) const {
    return evaluated.at(static_cast<std::size_t>(h.layer) * heads +
                        static_cast<std::size_t>(h.head)) != 0;
}

std::size_t ImportanceMatrix::count() const {
    std::size_t n = 0;
    for (char e : evaluated) n += e != 0;
    return n;
}

std::vector<HeadId> evaluate_thresholds(const ImportanceMatrix& X, const ThresholdConfig& cfg,
                                        std::size_t n_heads) {
    // Heads outside the search mask were pruned as unimportant: they enter the
    // statistics with influence 0 but are never selected.
    std::vector<double> values;
    double max_abs = 0.0;
    for (std::size_t i = 0; i < X.scores.size(); ++i) {
        values.push_back(X.evaluated[i] ? X.scores[i] : 0.0);
        max_abs = std::max(max_abs, std::abs(values.back()));
    }
    if (X.count() == 0 || max_abs < cfg.epsilon) return {};

    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(values.size()));

    std::vector<HeadId> selected;
    for (std::size_t l = 0; l < X.layers; ++l) {
        const double k_adj = adjusted_k(cfg.K, static_cast<int>(l), n_heads);
        for (std::size_t h = 0; h < X.heads; ++h) {
            const HeadId id{static_cast<int>(l), static_cast<int>(h)};
            if (!X.has(id)) continue;
            if (std::abs(X.at(id)) - std::abs(mean) > k_adj * sd) selected.push_back(id);
        }
    }
    return selected;
}

std::set<HeadId> all_heads(const ModelSpec& spec) {
    std::set<HeadId> out;
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        for (std::size_t h = 0; h < spec.n_heads; ++h) {
            out.insert({static_cast<int>(l), static_cast<int>(h)});
        }
    }
    return out;
}

// ---------------------------------------------------------------- context

PatchContext::PatchContext(const Model& model, const tasks::TaskDataset& dataset)
    : model_(&model), dataset_(&dataset) {
    if (dataset.pairs.empty()) fail(ErrorCode::EmptyDataset, "dataset is empty");
    clean_batch_ = dataset.clean_batch();
    const HookSet heads = all_head_outs(model.spec());
    auto clean = model.forward(clean_batch_, {}, heads, CacheSource::clean);
    auto corr = model.forward(dataset.corrupted_batch(), {}, heads, CacheSource::corrupted);
    clean_ = clean.cache;
    corrupted_ = corr.cache;
    ld_clean_ = tasks::mean_logit_diff(clean.logits, dataset);
    ld_corrupted_ = tasks::mean_logit_diff(corr.logits, dataset);
}

PatchContext::PatchContext(const Model& model, const tasks::TaskDataset& dataset, CachePtr clean,
                           CachePtr corrupted)
    : model_(&model), dataset_(&dataset), clean_(std::move(clean)), corrupted_(std::move(corrupted)) {
    if (dataset.pairs.empty()) fail(ErrorCode::EmptyDataset, "dataset is empty");
    clean_batch_ = dataset.clean_batch();
    check_caches();
    // Baselines come from replaying each cache's head outputs on the clean prompt.
    InterventionPlan as_clean;
    InterventionPlan as_corr;
    for (const HookPoint& p : all_head_outs(model.spec())) {
        as_clean.freeze(p, clean_);
        as_corr.substitute(p, corrupted_);
    }
    ld_clean_ = tasks::mean_logit_diff(model.forward(clean_batch_, as_clean).logits, dataset);
    ld_corrupted_ = tasks::mean_logit_diff(model.forward(clean_batch_, as_corr).logits, dataset);
}

PatchContext::PatchContext(const Model& model, const tasks::TaskDataset& dataset, CachePtr clean,
                           CachePtr corrupted, double ld_clean, double ld_corrupted)
    : model_(&model),
      dataset_(&dataset),
      clean_(std::move(clean)),
      corrupted_(std::move(corrupted)),
      ld_clean_(ld_clean),
      ld_corrupted_(ld_corrupted) {
    if (dataset.pairs.empty()) fail(ErrorCode::EmptyDataset, "dataset is empty");
    clean_batch_ = dataset.clean_batch();
    check_caches();
}

void PatchContext::check_caches() const {
    if (!clean_ || !corrupted_) fail(ErrorCode::CacheMismatch, "missing cache");
    for (const CachePtr& c : {clean_, corrupted_}) {
        if (c->batch() != clean_batch_.batch || c->seq() != clean_batch_.seq) {
            fail(ErrorCode::CacheMismatch, "cache batch/seq differ from the dataset");
        }
        for (const HookPoint& p : all_head_outs(model_->spec())) {
            if (!c->contains(p)) fail(ErrorCode::CacheMismatch, "cache lacks " + to_string(p));
        }
    }
}

PatchResult PatchContext::path_patch(HeadId sender, const Receiver& receiver) const {
    const ModelSpec& spec = model_->spec();
    if (sender.layer < 0 || static_cast<std::size_t>(sender.layer) >= spec.n_layers ||
        sender.head < 0 || static_cast<std::size_t>(sender.head) >= spec.n_heads) {
        fail(ErrorCode::InvalidArgument, "sender outside model");
    }
    if (receiver && receiver->layer <= sender.layer) {
        fail(ErrorCode::LayerOrderViolation, "sender " + circuitforge::to_string(sender) +
                                                 " is not below receiver " + to_string(receiver));
    }

    // Phase 2: sender from the corrupted run, every other head pinned to the clean run.
    InterventionPlan sender_plan;
    for (const HookPoint& p : all_head_outs(spec)) {
        if (p.layer == sender.layer && p.head == sender.head) {
            sender_plan.substitute(p, corrupted_);
        } else {
            sender_plan.freeze(p, clean_);
        }
    }
    HookSet record;
    if (receiver) record.insert(HookPoint::head_in(*receiver));
    auto phase2 = model_->forward(clean_batch_, sender_plan, record, CacheSource::patched);

    PatchResult r;
    r.ld_baseline = ld_clean_;
    r.ld_corrupted = ld_corrupted_;
    if (!receiver) {
        r.ld_patched = tasks::mean_logit_diff(phase2.logits, *dataset_);
    } else {
        // Phase 3: the receiver reads the phase-2 residual; everything else recomputes.
        InterventionPlan receiver_plan;
        receiver_plan.substitute(HookPoint::head_in(*receiver), phase2.cache);
        auto phase3 = model_->forward(clean_batch_, receiver_plan, {}, CacheSource::patched);
        r.ld_patched = tasks::mean_logit_diff(phase3.logits, *dataset_);
    }
    r.influence = (r.ld_patched - r.ld_baseline) / std::max(std::abs(r.ld_baseline), kInfluenceFloor);
    return r;
}

ImportanceMatrix PatchContext::patch_all(const Receiver& receiver,
                                         const std::optional<std::set<HeadId>>& mask) const {
    const ModelSpec& spec = model_->spec();
    const std::size_t layers = receiver ? static_cast<std::size_t>(receiver->layer) : spec.n_layers;
    ImportanceMatrix X(layers, spec.n_heads, receiver);

    std::vector<HeadId> senders;
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t h = 0; h < spec.n_heads; ++h) {
            const HeadId id{static_cast<int>(l), static_cast<int>(h)};
            if (!mask || mask->contains(id)) senders.push_back(id);
        }
    }

    std::vector<double> influence(senders.size());
    std::exception_ptr error;
    const auto n = static_cast<std::ptrdiff_t>(senders.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        try {
            influence[static_cast<std::size_t>(i)] =
                path_patch(senders[static_cast<std::size_t>(i)], receiver).influence;
        } catch (...) {
#pragma omp critical
            if (!error) error = std::current_exception();
        }
    }
    if (error) std::rethrow_exception(error);
    for (std::size_t i = 0; i < senders.size(); ++i) X.set(senders[i], influence[i]);
    return X;
}

double PatchContext::ld_with_only(const std::set<HeadId>& keep) const {
    InterventionPlan plan;
    for (const HookPoint& p : all_head_outs(model_->spec())) {
        if (!keep.contains(HeadId{p.layer, p.head})) plan.substitute(p, corrupted_);
    }
    return tasks::mean_logit_diff(model_->forward(clean_batch_, plan, {}, CacheSource::patched).logits,
                                  *dataset_);
}

PatchResult path_patch(const Model& model, const tasks::TaskDataset& dataset, HeadId sender,
                       const Receiver& receiver, CachePtr clean_cache, CachePtr corr_cache) {
    PatchContext ctx(model, dataset, std::move(clean_cache), std::move(corr_cache));
    return ctx.path_patch(sender, receiver);
}

// ---------------------------------------------------------------- automatic PP

Circuit automatic_path_patching(const PatchContext& ctx, const ThresholdConfig& cfg,
                                const std::optional<std::set<HeadId>>& mask) {
    cfg.validate();
    const ModelSpec& spec = ctx.model().spec();
    Circuit circuit;
    circuit.search_mask = mask;

    auto note_senders = [&](const ImportanceMatrix& X) {
        for (std::size_t l = 0; l < X.layers; ++l) {
            for (std::size_t h = 0; h < X.heads; ++h) {
                const HeadId id{static_cast<int>(l), static_cast<int>(h)};
                if (X.has(id)) circuit.patched_senders.insert(id);
            }
        }
    };

    const ImportanceMatrix top = ctx.patch_all(std::nullopt, mask);
    note_senders(top);

    std::deque<HeadId> worklist;
    std::set<HeadId> queued;
    for (HeadId h : evaluate_thresholds(top, cfg, spec.n_heads)) {
        worklist.push_back(h);
        queued.insert(h);
        circuit.provenance[h] = {std::nullopt, top.at(h)};
    }

    while (!worklist.empty()) {
        const HeadId receiver = worklist.front();
        worklist.pop_front();
        queued.erase(receiver);
        circuit.heads.push_back(receiver);
        ++circuit.receiver_expansions;
        if (receiver.layer == 0) continue;

        const ImportanceMatrix X = ctx.patch_all(receiver, mask);
        note_senders(X);
        if (X.count() == 0) continue;
        for (HeadId s : evaluate_thresholds(X, cfg, spec.n_heads)) {
            if (queued.contains(s) || circuit.contains(s)) continue;
            worklist.push_back(s);
            queued.insert(s);
            circuit.provenance[s] = {receiver, X.at(s)};
        }
    }
    return circuit;
}

Circuit automatic_path_patching(const Model& model, const tasks::TaskDataset& dataset,
                                const ThresholdConfig& cfg,
                                const std::optional<std::set<HeadId>>& mask) {
    if (dataset.pairs.empty()) fail(ErrorCode::EmptyDataset, "dataset is empty");
    if (mask && mask->empty()) {
        Circuit empty;
        empty.search_mask = mask;
        return empty;
    }
    PatchContext ctx(model, dataset);
    return automatic_path_patching(ctx, cfg, mask);
}

std::uint64_t predicted_sender_forwards(const Circuit& circuit, const ModelSpec& spec) {
    auto in_mask = [&](HeadId h) { return !circuit.search_mask || circuit.search_mask->contains(h); };
    auto count_below = [&](int layer) {
        std::uint64_t n = 0;
        for (const HeadId& h : all_heads(spec)) n += h.layer < layer && in_mask(h);
        return n;
    };
    if (circuit.search_mask && circuit.search_mask->empty()) return 0;
    std::uint64_t total = count_below(static_cast<int>(spec.n_layers));
    for (const HeadId& r : circuit.heads) total += 2 * count_below(r.layer);
    return total;
}

// ---------------------------------------------------------------- performance

double circuit_performance(const PatchContext& ctx, const std::set<HeadId>& circuit) {
    if (std::abs(ctx.ld_clean()) < 1e-8) {
        fail(ErrorCode::DegenerateBaseline, "clean logit difference is ~0");
    }
    return 100.0 * ctx.ld_with_only(circuit) / ctx.ld_clean();
}

double circuit_performance(const Model& model, const tasks::TaskDataset& dataset,
                           const std::set<HeadId>& circuit) {
    PatchContext ctx(model, dataset);
    return circuit_performance(ctx, circuit);
}

// ---------------------------------------------------------------- JSON

std::string mask_id(const std::set<HeadId>& mask, const ModelSpec& spec) {
    if (mask.size() == spec.total_heads()) return "full";
    std::uint64_t h = 1469598103934665603ull;
    for (const HeadId& id : mask) {
        for (int v : {id.layer, id.head}) {
            h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ull;
            h *= 1099511628211ull;
        }
    }
    std::ostringstream os;
    os << "mask-" << mask.size() << "-" << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

json circuit_to_json(const Circuit& circuit, const std::string& model_id, tasks::TaskKind task,
                     const ThresholdConfig& cfg, const std::string& mask_id_value,
                     const CircuitMetrics& metrics, std::uint64_t flops_used) {
    json heads = json::array();
    for (const HeadId& h : circuit.heads) heads.push_back({{"layer", h.layer}, {"head", h.head}});
    json prov = json::object();
    for (const auto& [h, p] : circuit.provenance) {
        prov[circuitforge::to_string(h)] = {{"receiver", to_string(p.receiver)}, {"score", p.score}};
    }
    return json{{"model_id", model_id},
                {"task", tasks::to_string(task)},
                {"heads", heads},
                {"provenance", prov},
                {"cfg", {{"K", cfg.K}, {"epsilon", cfg.epsilon}}},
                {"mask_id", mask_id_value},
                {"metrics",
                 {{"performance", metrics.performance},
                  {"size", metrics.size},
                  {"sparsity", metrics.sparsity}}},
                {"flops_used", flops_used}};
}

Circuit circuit_from_json(const json& j) {
    try {
        Circuit c;
        for (const auto& h : j.at("heads")) {
            c.heads.push_back({h.at("layer").get<int>(), h.at("head").get<int>()});
        }
        for (const auto& [key, p] : j.at("provenance").items()) {
            const auto recv = p.at("receiver").get<std::string>();
            Receiver r = recv == "logits" ? Receiver{} : Receiver{parse_head_id(recv)};
            c.provenance[parse_head_id(key)] = {r, p.at("score").get<double>()};
        }
        return c;
    } catch (const json::exception& e) {
        fail(ErrorCode::FormatError, std::string("bad circuit JSON: ") + e.what());
    }
}

}  // namespace circuitforge::patching
