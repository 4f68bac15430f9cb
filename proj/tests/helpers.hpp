#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>

#include "circuitforge/error.hpp"
#include "circuitforge/model.hpp"
#include "circuitforge/train.hpp"

namespace testutil {

inline circuitforge::ModelSpec small_spec() {
    circuitforge::ModelSpec s;
    s.n_layers = 2;
    s.n_heads = 4;
    s.d_model = 32;
    s.d_head = 8;
    s.vocab_size = 24;
    s.max_seq = 8;
    return s;
}

inline std::unique_ptr<circuitforge::Model> random_model(
    const circuitforge::ModelSpec& spec, std::uint64_t seed, double stddev = 0.2,
    circuitforge::kernels::Backend be = circuitforge::kernels::Backend::parallel) {
    return std::make_unique<circuitforge::Model>(circuitforge::train::random_weights(spec, seed, stddev), be);
}

// Error code thrown by `f`, or nullopt if it returns normally.
inline std::optional<circuitforge::ErrorCode> error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const circuitforge::Error& e) {
        return e.code();
    }
    return std::nullopt;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("circuitforge_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testutil
