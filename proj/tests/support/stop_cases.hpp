#pragma once

// Hand-built validation-loss sequences with the decision each must produce.

#include "costom/steering.hpp"

#include <vector>

namespace costom::support {

struct StopCase {
    const char* name;
    std::vector<double> losses;
    EarlyStopRule rule;
    StopDecision expected;
};

inline std::vector<double> steady_losses(double start, double step, int n) {
    std::vector<double> v;
    for (int i = 0; i < n; ++i) v.push_back(start - step * i);
    return v;
}

inline const std::vector<StopCase>& stop_cases() {
    static const std::vector<StopCase> cases{
        {"small gains exhaust patience", {0.50, 0.495, 0.492, 0.491}, {}, {4, StopReason::patience}},
        {"first epoch already under the floor", {0.05, 0.04}, {}, {1, StopReason::loss_floor}},
        {"a loss equal to the floor does not stop", {0.10}, {}, {0, StopReason::none}},
        {"gains of exactly delta are not progress", {0.50, 0.49, 0.49, 0.49}, {}, {4, StopReason::patience}},
        {"gains just above delta keep going", {0.50, 0.489, 0.478, 0.467}, {}, {0, StopReason::none}},
        {"steady progress runs to the epoch cap", steady_losses(1.0, 0.09, 10), {}, {10, StopReason::max_epochs}},
        {"progress resets the patience counter", {0.5, 0.5, 0.5, 0.4, 0.4, 0.4, 0.4}, {}, {7, StopReason::patience}},
        {"floor wins over patience in the same epoch", {0.5, 0.5, 0.5, 0.494}, {10, 3, 0.01, 0.495},
         {4, StopReason::loss_floor}},
        {"patience wins over the cap in the same epoch", {0.5, 0.5, 0.5, 0.5}, {4, 3, 0.01, 0.1},
         {4, StopReason::patience}},
        {"progress is measured against the best so far", {0.5, 0.3, 0.35, 0.295, 0.291}, {}, {5, StopReason::patience}},
        {"rising losses count against patience", {0.5, 0.6, 0.7, 0.8}, {}, {4, StopReason::patience}},
        {"patience of one stops at the first stall", {0.5, 0.495}, {10, 1, 0.01, 0.1}, {2, StopReason::patience}},
    };
    return cases;
}

}  // namespace costom::support
