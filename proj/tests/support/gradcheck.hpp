#pragma once

// Finite-difference gradient checks. Reference functions are evaluated in
// double precision and differentiated by central differences; the analytic
// side is the float tape. Error is max |analytic - numeric| over an input,
// divided by max |numeric| over the same input.

#include "costom/autodiff.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace gradcheck {

using costom::ad::Shape;
using costom::ad::Tape;
using costom::ad::Var;

struct PrimitiveCase {
    std::string name;
    std::vector<Shape> inputs;
    std::function<Var(const std::vector<Var>&)> op;
    // reference forward on flattened row-major inputs, returning the flattened output
    std::function<std::vector<double>(const std::vector<std::vector<double>>&)> reference;
};

/// Every differentiable primitive with shapes and side inputs drawn from rng.
std::vector<PrimitiveCase> primitive_cases(std::mt19937_64& rng);

/// Relative error between tape and finite-difference gradients of
/// sum(op(x) * r) for random inputs x and a random weighting r.
double primitive_error(const PrimitiveCase& c, std::uint64_t seed);

struct EndToEndCheck {
    double error = 0.0;
    std::size_t entries = 0;
    double max_gradient = 0.0;
};

/// tom_loss through a frozen decoder and the patch interface, differentiated
/// with respect to one layer-0 adapter (A and B, B nonzero). Instance i picks
/// the model seed, the site, the patch layer and the sample.
EndToEndCheck tom_loss_error(int instance);

}  // namespace gradcheck
