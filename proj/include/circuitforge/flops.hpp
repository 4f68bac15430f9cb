#pragma once

#include <atomic>
#include <cstdint>

namespace circuitforge {

struct ModelSpec;

// Per-token, per-layer cost: q/k/v/o projections, the two MLP matmuls and
// the seq-dependent score/value term, each counted as 2 FLOPs per MAC.
std::uint64_t flops_per_token_per_layer(const ModelSpec& spec, std::uint64_t seq);

// batch * seq * n_layers * flops_per_token_per_layer(spec, seq)
std::uint64_t flops_per_forward(const ModelSpec& spec, std::uint64_t batch, std::uint64_t seq);

struct FlopSnapshot {
    std::uint64_t passes = 0;
    std::uint64_t tokens = 0;
    std::uint64_t flops = 0;

    friend FlopSnapshot operator-(const FlopSnapshot& a, const FlopSnapshot& b) {
        return {a.passes - b.passes, a.tokens - b.tokens, a.flops - b.flops};
    }
    friend FlopSnapshot operator+(const FlopSnapshot& a, const FlopSnapshot& b) {
        return {a.passes + b.passes, a.tokens + b.tokens, a.flops + b.flops};
    }
    friend bool operator==(const FlopSnapshot&, const FlopSnapshot&) = default;
};

// Monotone counters of forward passes. Thread-safe.
class FlopMeter {
public:
    void record(const ModelSpec& spec, std::uint64_t batch, std::uint64_t seq) noexcept;
    FlopSnapshot snapshot() const noexcept;

private:
    std::atomic<std::uint64_t> passes_{0};
    std::atomic<std::uint64_t> tokens_{0};
    std::atomic<std::uint64_t> flops_{0};
};

}  // namespace circuitforge
