#include "circuitforge/kernels.hpp"

#include <omp.h>

#include "kernel_rows.hpp"

namespace circuitforge::kernels {

namespace parallel {

void matmul(std::span<const float> a, std::span<const float> b, std::span<const float> bias,
            std::span<float> c, std::size_t m, std::size_t k, std::size_t n) {
    const float* bias_ptr = bias.empty() ? nullptr : bias.data();
    const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n > 32768)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
        const auto r = static_cast<std::size_t>(i);
        detail::matmul_row(a.data() + r * k, b.data(), bias_ptr, c.data() + r * n, k, n);
    }
}

void layer_norm(std::span<const float> x, std::span<const float> weight,
                std::span<const float> bias, std::span<float> out, std::size_t rows,
                std::size_t width, float eps) {
    const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * width > 16384)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto r = static_cast<std::size_t>(i);
        detail::layer_norm_row(x.data() + r * width, weight.data(), bias.data(),
                               out.data() + r * width, width, eps);
    }
}

void causal_attention(std::span<const float> q, std::span<const float> k,
                      std::span<const float> v, std::span<float> pattern, std::span<float> z,
                      std::size_t batch, std::size_t seq, std::size_t d_head) {
    const auto total = static_cast<std::ptrdiff_t>(batch * seq);
#pragma omp parallel for schedule(static) if (batch * seq * seq * d_head > 16384)
    for (std::ptrdiff_t t = 0; t < total; ++t) {
        const std::size_t b = static_cast<std::size_t>(t) / seq;
        const std::size_t i = static_cast<std::size_t>(t) % seq;
        const std::size_t base = b * seq * d_head;
        float* p_row = pattern.data() + (b * seq + i) * seq;
        float* z_row = z.data() + base + i * d_head;
        detail::attention_row(q.data() + base + i * d_head, k.data() + base, p_row, i, seq,
                              d_head);
        detail::weighted_values_row(p_row, v.data() + base, z_row, i, d_head);
    }
}

void apply_pattern(std::span<const float> pattern, std::span<const float> v, std::span<float> z,
                   std::size_t batch, std::size_t seq, std::size_t d_head) {
    const auto total = static_cast<std::ptrdiff_t>(batch * seq);
#pragma omp parallel for schedule(static) if (batch * seq * seq * d_head > 16384)
    for (std::ptrdiff_t t = 0; t < total; ++t) {
        const std::size_t b = static_cast<std::size_t>(t) / seq;
        const std::size_t i = static_cast<std::size_t>(t) % seq;
        const std::size_t base = b * seq * d_head;
        detail::weighted_values_row(pattern.data() + (b * seq + i) * seq, v.data() + base,
                                    z.data() + base + i * d_head, i, d_head);
    }
}

void gelu(std::span<float> x) {
    const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static) if (x.size() > 65536)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        x[static_cast<std::size_t>(i)] = detail::gelu_scalar(x[static_cast<std::size_t>(i)]);
    }
}

}  // namespace parallel

void matmul(Backend be, std::span<const float> a, std::span<const float> b,
            std::span<const float> bias, std::span<float> c, std::size_t m, std::size_t k,
            std::size_t n) {
    if (be == Backend::parallel) {
        parallel::matmul(a, b, bias, c, m, k, n);
    } else {
        serial::matmul(a, b, bias, c, m, k, n);
    }
}

void layer_norm(Backend be, std::span<const float> x, std::span<const float> weight,
                std::span<const float> bias, std::span<float> out, std::size_t rows,
                std::size_t width, float eps) {
    if (be == Backend::parallel) {
        parallel::layer_norm(x, weight, bias, out, rows, width, eps);
    } else {
        serial::layer_norm(x, weight, bias, out, rows, width, eps);
    }
}

void causal_attention(Backend be, std::span<const float> q, std::span<const float> k,
                      std::span<const float> v, std::span<float> pattern, std::span<float> z,
                      std::size_t batch, std::size_t seq, std::size_t d_head) {
    if (be == Backend::parallel) {
        parallel::causal_attention(q, k, v, pattern, z, batch, seq, d_head);
    } else {
        serial::causal_attention(q, k, v, pattern, z, batch, seq, d_head);
    }
}

void apply_pattern(Backend be, std::span<const float> pattern, std::span<const float> v,
                   std::span<float> z, std::size_t batch, std::size_t seq, std::size_t d_head) {
    if (be == Backend::parallel) {
        parallel::apply_pattern(pattern, v, z, batch, seq, d_head);
    } else {
        serial::apply_pattern(pattern, v, z, batch, seq, d_head);
    }
}

void gelu(Backend be, std::span<float> x) {
    if (be == Backend::parallel) {
        parallel::gelu(x);
    } else {
        serial::gelu(x);
    }
}

void set_num_threads(int n) {
    if (n > 0) omp_set_num_threads(n);
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace circuitforge::kernels
