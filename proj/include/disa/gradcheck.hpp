#pragma once

// Central finite-difference validation of the reverse-mode gradients.
//
// Each case builds a scalar root sum(out * R) from random inputs and a fixed
// random cotangent R, runs backward once, and compares every input
// coordinate against (root(x + h) - root(x - h)) / 2h.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "disa/tensor.hpp"

namespace disa::gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-4;
// Denominator floor of the relative error, so coordinates whose true
// derivative is ~0 are judged on absolute error instead.
inline constexpr double kFloor = 1e-3;

double relative_error(double analytic, double numeric, double floor = kFloor);

using Function = std::function<ad::Tensor(const std::vector<ad::Tensor>&)>;

struct CaseOutcome {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
};

// `inputs` are leaf values; they are re-created internally as needed.
// `max_coordinates` > 0 checks a random subset of that many coordinates.
CaseOutcome check_case(const Function& f, const std::vector<ad::Tensor>& inputs, std::mt19937_64& rng,
                       std::size_t max_coordinates = 0, double step = kStep);

struct Check {
    std::string name;
    std::string group;  // "primitive", "loss" or "encoder"
    std::size_t cases = 0;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
    std::size_t worst_case = 0;

    bool passed(double tolerance = kTolerance) const { return cases > 0 && max_rel_error <= tolerance; }
};

struct Options {
    std::size_t cases = 100;
    std::uint64_t seed = 1;
    std::size_t encoder_cases = 100;
    bool include_encoder = true;
    // Restrict to checks whose name contains this text; empty runs all.
    std::string filter;
};

std::vector<std::string> check_names();
std::vector<Check> run(const Options& options = {});
bool all_passed(const std::vector<Check>& checks, double tolerance = kTolerance);

// Fixed-width table, one line per check, with a PASS/FAIL column.
void write_table(std::ostream& out, const std::vector<Check>& checks, double tolerance = kTolerance);

}  // namespace disa::gradcheck
