#pragma once

#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>

namespace akd {

// Error taxonomy. Each maps to a distinct CLI exit code.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape mismatch between operands.
struct dim_error : error {
    using error::error;
};

// Text-format violation; message carries "file:line".
struct parse_error : error {
    parse_error(const std::string& file, std::size_t line, const std::string& what)
        : error(file + ":" + std::to_string(line) + ": " + what), line_number(line) {}
    std::size_t line_number;
};

// Caller broke a documented precondition.
struct contract_error : error {
    using error::error;
};

// Out-of-range index (e.g. class label outside [0, C)).
struct index_error : error {
    using error::error;
};

// File I/O or binary-format failure.
struct io_error : error {
    using error::error;
};

// Metric undefined on the given input (single-class AUC, single-cluster silhouette).
struct metric_error : error {
    using error::error;
};

// Shortest text that round-trips an f32 exactly.
inline std::string format_float(float v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return buf;
}

// Independent deterministic RNG streams derived from one user seed.
// Stream indices are fixed per call site so adding a consumer never
// shifts the draws of another.
inline std::mt19937 make_rng(std::uint32_t seed, std::uint32_t stream) {
    std::seed_seq seq{seed, stream, 0x9e3779b9u};
    return std::mt19937(seq);
}

namespace rng_stream {
inline constexpr std::uint32_t model_init = 0;
inline constexpr std::uint32_t identifier_init = 1;
inline constexpr std::uint32_t shuffle = 2;
inline constexpr std::uint32_t data = 3;
}  // namespace rng_stream

}  // namespace akd
