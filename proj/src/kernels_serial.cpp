#include "circuitforge/kernels.hpp"

#include "kernel_rows.hpp"

namespace circuitforge::kernels::serial {

void matmul(std::span<const float> a, std::span<const float> b, std::span<const float> bias,
            std::span<float> c, std::size_t m, std::size_t k, std::size_t n) {
    const float* bias_ptr = bias.empty() ? nullptr : bias.data();
    for (std::size_t i = 0; i < m; ++i) {
        detail::matmul_row(a.data() + i * k, b.data(), bias_ptr, c.data() + i * n, k, n);
    }
}

void layer_norm(std::span<const float> x, std::span<const float> weight,
                std::span<const float> bias, std::span<float> out, std::size_t rows,
                std::size_t width, float eps) {
    for (std::size_t r = 0; r < rows; ++r) {
        detail::layer_norm_row(x.data() + r * width, weight.data(), bias.data(),
                               out.data() + r * width, width, eps);
    }
}

void causal_attention(std::span<const float> q, std::span<const float> k,
                      std::span<const float> v, std::span<float> pattern, std::span<float> z,
                      std::size_t batch, std::size_t seq, std::size_t d_head) {
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * seq * d_head;
        for (std::size_t i = 0; i < seq; ++i) {
            float* p_row = pattern.data() + (b * seq + i) * seq;
            float* z_row = z.data() + base + i * d_head;
            detail::attention_row(q.data() + base + i * d_head, k.data() + base, p_row, i, seq,
                                  d_head);
            detail::weighted_values_row(p_row, v.data() + base, z_row, i, d_head);
        }
    }
}

void apply_pattern(std::span<const float> pattern, std::span<const float> v, std::span<float> z,
                   std::size_t batch, std::size_t seq, std::size_t d_head) {
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * seq * d_head;
        for (std::size_t i = 0; i < seq; ++i) {
            detail::weighted_values_row(pattern.data() + (b * seq + i) * seq, v.data() + base,
                                        z.data() + base + i * d_head, i, d_head);
        }
    }
}

void gelu(std::span<float> x) {
    for (float& v : x) v = detail::gelu_scalar(v);
}

}  // namespace circuitforge::kernels::serial
