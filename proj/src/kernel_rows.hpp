#pragma once

// Per-row bodies shared by the serial and OpenMP kernels. Keeping a single
// body per output row is what makes the two backends bit-identical.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

namespace circuitforge::kernels::detail {

inline void matmul_row(const float* a_row, const float* b, const float* bias, float* c_row,
                       std::size_t k, std::size_t n) {
    if (bias != nullptr) {
        std::copy(bias, bias + n, c_row);
    } else {
        std::fill(c_row, c_row + n, 0.0f);
    }
    for (std::size_t p = 0; p < k; ++p) {
        const float av = a_row[p];
        const float* b_row = b + p * n;
        for (std::size_t j = 0; j < n; ++j) {
            c_row[j] += av * b_row[j];
        }
    }
}

inline void layer_norm_row(const float* x, const float* w, const float* b, float* out,
                           std::size_t width, float eps) {
    float mean = 0.0f;
    for (std::size_t i = 0; i < width; ++i) mean += x[i];
    mean /= static_cast<float>(width);
    float var = 0.0f;
    for (std::size_t i = 0; i < width; ++i) {
        const float d = x[i] - mean;
        var += d * d;
    }
    var /= static_cast<float>(width);
    const float rstd = 1.0f / std::sqrt(var + eps);
    for (std::size_t i = 0; i < width; ++i) {
        out[i] = (x[i] - mean) * rstd * w[i] + b[i];
    }
}

// Softmax row of causal attention scores for one query position.
inline void attention_row(const float* q_row, const float* k_seq, float* pattern_row,
                          std::size_t query, std::size_t seq, std::size_t d_head) {
    const float scale = 1.0f / std::sqrt(static_cast<float>(d_head));
    float max_score = -std::numeric_limits<float>::infinity();
    for (std::size_t key = 0; key <= query; ++key) {
        const float* k_row = k_seq + key * d_head;
        float s = 0.0f;
        for (std::size_t d = 0; d < d_head; ++d) s += q_row[d] * k_row[d];
        s *= scale;
        pattern_row[key] = s;
        max_score = std::max(max_score, s);
    }
    float total = 0.0f;
    for (std::size_t key = 0; key <= query; ++key) {
        pattern_row[key] = std::exp(pattern_row[key] - max_score);
        total += pattern_row[key];
    }
    const float inv = 1.0f / total;
    for (std::size_t key = 0; key <= query; ++key) pattern_row[key] *= inv;
    for (std::size_t key = query + 1; key < seq; ++key) pattern_row[key] = 0.0f;
}

inline void weighted_values_row(const float* pattern_row, const float* v_seq, float* z_row,
                                std::size_t query, std::size_t d_head) {
    std::fill(z_row, z_row + d_head, 0.0f);
    for (std::size_t key = 0; key <= query; ++key) {
        const float p = pattern_row[key];
        const float* v_row = v_seq + key * d_head;
        for (std::size_t d = 0; d < d_head; ++d) z_row[d] += p * v_row[d];
    }
}

inline float gelu_scalar(float x) {
    constexpr float kSqrt2OverPi = 0.7978845608028654f;
    return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + 0.044715f * x * x * x)));
}

}  // namespace circuitforge::kernels::detail
