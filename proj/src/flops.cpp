#include "circuitforge/flops.hpp"

#include "circuitforge/model.hpp"

namespace circuitforge {

std::uint64_t flops_per_token_per_layer(const ModelSpec& spec, std::uint64_t seq) {
    const std::uint64_t d = spec.d_model;
    const std::uint64_t ff = spec.d_ff;
    return 2 * (4 * d * d) + 2 * (2 * d * ff) + 2 * 2 * d * seq;
}

std::uint64_t flops_per_forward(const ModelSpec& spec, std::uint64_t batch, std::uint64_t seq) {
    return batch * seq * spec.n_layers * flops_per_token_per_layer(spec, seq);
}

void FlopMeter::record(const ModelSpec& spec, std::uint64_t batch, std::uint64_t seq) noexcept {
    passes_.fetch_add(1, std::memory_order_relaxed);
    tokens_.fetch_add(batch * seq, std::memory_order_relaxed);
    flops_.fetch_add(flops_per_forward(spec, batch, seq), std::memory_order_relaxed);
}

FlopSnapshot FlopMeter::snapshot() const noexcept {
    return {passes_.load(std::memory_order_relaxed), tokens_.load(std::memory_order_relaxed),
            flops_.load(std::memory_order_relaxed)};
}

}  // namespace circuitforge
