#pragma once

// Dense kernels used by the forward pass. Every kernel exists twice: a plain
// serial reference and an OpenMP version that splits work over independent
// output rows. Both evaluate each output element with the same sequence of
// floating-point operations, so their results are bit-identical.

#include <cstddef>
#include <span>

namespace circuitforge::kernels {

enum class Backend { serial, parallel };

// c[m,n] = a[m,k] @ b[k,n] (+ bias[n] when bias is non-empty)
namespace serial {
void matmul(std::span<const float> a, std::span<const float> b, std::span<const float> bias,
            std::span<float> c, std::size_t m, std::size_t k, std::size_t n);
void layer_norm(std::span<const float> x, std::span<const float> weight,
                std::span<const float> bias, std::span<float> out, std::size_t rows,
                std::size_t width, float eps);
// q, k, v, z: [batch, seq, d_head]; pattern: [batch, seq, seq].
void causal_attention(std::span<const float> q, std::span<const float> k,
                      std::span<const float> v, std::span<float> pattern, std::span<float> z,
                      std::size_t batch, std::size_t seq, std::size_t d_head);
// z from a fixed pattern (used when the pattern itself is substituted).
void apply_pattern(std::span<const float> pattern, std::span<const float> v, std::span<float> z,
                   std::size_t batch, std::size_t seq, std::size_t d_head);
void gelu(std::span<float> x);
}  // namespace serial

namespace parallel {
void matmul(std::span<const float> a, std::span<const float> b, std::span<const float> bias,
            std::span<float> c, std::size_t m, std::size_t k, std::size_t n);
void layer_norm(std::span<const float> x, std::span<const float> weight,
                std::span<const float> bias, std::span<float> out, std::size_t rows,
                std::size_t width, float eps);
void causal_attention(std::span<const float> q, std::span<const float> k,
                      std::span<const float> v, std::span<float> pattern, std::span<float> z,
                      std::size_t batch, std::size_t seq, std::size_t d_head);
void apply_pattern(std::span<const float> pattern, std::span<const float> v, std::span<float> z,
                   std::size_t batch, std::size_t seq, std::size_t d_head);
void gelu(std::span<float> x);
}  // namespace parallel

void matmul(Backend be, std::span<const float> a, std::span<const float> b,
            std::span<const float> bias, std::span<float> c, std::size_t m, std::size_t k,
            std::size_t n);
void layer_norm(Backend be, std::span<const float> x, std::span<const float> weight,
                std::span<const float> bias, std::span<float> out, std::size_t rows,
                std::size_t width, float eps);
void causal_attention(Backend be, std::span<const float> q, std::span<const float> k,
                      std::span<const float> v, std::span<float> pattern, std::span<float> z,
                      std::size_t batch, std::size_t seq, std::size_t d_head);
void apply_pattern(Backend be, std::span<const float> pattern, std::span<const float> v,
                   std::span<float> z, std::size_t batch, std::size_t seq, std::size_t d_head);
void gelu(Backend be, std::span<float> x);

// Sets the OpenMP team size; 0 keeps the runtime default.
void set_num_threads(int n);
int max_threads();

}  // namespace circuitforge::kernels
