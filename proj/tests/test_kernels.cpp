#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "circuitforge/kernels.hpp"

using namespace circuitforge::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d(0.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("matmul: serial and parallel agree bitwise and match a double reference") {
    const std::size_t m = 37, k = 29, n = 41;
    const auto a = random_vec(m * k, 1), b = random_vec(k * n, 2), bias = random_vec(n, 3);
    for (int threads : {1, 2, 4}) {
        set_num_threads(threads);
        std::vector<float> cs(m * n), cp(m * n);
        serial::matmul(a, b, bias, cs, m, k, n);
        parallel::matmul(a, b, bias, cp, m, k, n);
        CHECK(bitwise_equal(cs, cp));
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double ref = bias[j];
                for (std::size_t t = 0; t < k; ++t) ref += static_cast<double>(a[i * k + t]) * b[t * n + j];
                CHECK(cs[i * n + j] == doctest::Approx(ref).epsilon(1e-4));
            }
        }
    }
    set_num_threads(0);
}

TEST_CASE("layer_norm: serial and parallel agree bitwise, rows are normalized") {
    const std::size_t rows = 19, width = 33;
    const auto x = random_vec(rows * width, 4);
    std::vector<float> ones(width, 1.0f), zeros(width, 0.0f), ys(rows * width), yp(rows * width);
    serial::layer_norm(x, ones, zeros, ys, rows, width, 1e-5f);
    parallel::layer_norm(x, ones, zeros, yp, rows, width, 1e-5f);
    CHECK(bitwise_equal(ys, yp));
    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0.0, sq = 0.0;
        for (std::size_t c = 0; c < width; ++c) mean += ys[r * width + c];
        mean /= width;
        for (std::size_t c = 0; c < width; ++c) sq += (ys[r * width + c] - mean) * (ys[r * width + c] - mean);
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-5).scale(1.0));
        CHECK(sq / width == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("causal attention: serial and parallel agree bitwise, match a direct softmax") {
    const std::size_t batch = 3, seq = 7, dh = 5;
    const auto q = random_vec(batch * seq * dh, 5), k = random_vec(batch * seq * dh, 6),
               v = random_vec(batch * seq * dh, 7);
    std::vector<float> ps(batch * seq * seq), pp(batch * seq * seq), zs(batch * seq * dh), zp(batch * seq * dh);
    serial::causal_attention(q, k, v, ps, zs, batch, seq, dh);
    parallel::causal_attention(q, k, v, pp, zp, batch, seq, dh);
    CHECK(bitwise_equal(ps, pp));
    CHECK(bitwise_equal(zs, zp));

    std::vector<float> za(batch * seq * dh);
    serial::apply_pattern(ps, v, za, batch, seq, dh);
    CHECK(bitwise_equal(za, zs));

    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < seq; ++i) {
            std::vector<double> w(i + 1);
            double mx = -1e300, sum = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d) {
                    s += static_cast<double>(q[(b * seq + i) * dh + d]) * k[(b * seq + j) * dh + d];
                }
                w[j] = s / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, w[j]);
            }
            for (auto& x : w) sum += (x = std::exp(x - mx));
            for (std::size_t j = 0; j <= i; ++j) {
                CHECK(ps[(b * seq + i) * seq + j] == doctest::Approx(w[j] / sum).epsilon(1e-4));
            }
            for (std::size_t d = 0; d < dh; ++d) {
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) z += w[j] / sum * v[(b * seq + j) * dh + d];
                CHECK(zs[(b * seq + i) * dh + d] == doctest::Approx(z).epsilon(1e-4).scale(1.0));
            }
        }
    }
}

TEST_CASE("gelu: serial and parallel agree bitwise, fixed points") {
    auto xs = random_vec(1001, 8);
    auto xp = xs;
    serial::gelu(xs);
    parallel::gelu(xp);
    CHECK(bitwise_equal(xs, xp));
    std::vector<float> z = {0.0f, 10.0f};
    serial::gelu(z);
    CHECK(z[0] == 0.0f);
    CHECK(z[1] == doctest::Approx(10.0f));
}

TEST_CASE("backend dispatch routes to the same results") {
    const auto a = random_vec(12, 9), b = random_vec(12, 10);
    std::vector<float> c1(9), c2(9);
    matmul(Backend::serial, a, b, {}, c1, 3, 4, 3);
    matmul(Backend::parallel, a, b, {}, c2, 3, 4, 3);
    CHECK(bitwise_equal(c1, c2));
    CHECK(max_threads() >= 1);
}
