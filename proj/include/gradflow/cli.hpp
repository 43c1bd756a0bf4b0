#pragma once

#include <array>
#include <memory>
#include <string>

#include "gradflow/datasets.hpp"

namespace gradflow::cli {

// Exit codes: 0 success, 2 usage/config/data error, 3 numeric failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

// Full command-line entry point (train/score/eval/sweep/hist/sample/npdemo).
// Returns the process exit code; safe to call in-process.
int run(int argc, const char* const* argv);

// Dataset spec strings: "synthetic:<family>[:key=value...]" with keys
// n, levels, c, h, w, l, sigma, seed; or "idx:<path>". The source seed
// defaults to fnv(tag) ^ global_seed.
std::shared_ptr<const DataSource> parse_data_spec(const std::string& spec,
                                                  uint64_t global_seed);

// Train/fit/test fractions used when a command splits a source.
constexpr std::array<double, 3> default_split_fractions() {
    return {1.0 / 6.0, 0.5, 1.0 / 3.0};
}

} // namespace gradflow::cli
