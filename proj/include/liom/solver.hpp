#pragma once

#include <map>
#include <memory>
#include <string>

#include "liom/factors.hpp"

namespace liom::solver {

class Problem {
public:
    void add(std::shared_ptr<const factors::Factor> f) {
        factors_.push_back(std::move(f));
    }
    const std::vector<std::shared_ptr<const factors::Factor>>& factors() const {
        return factors_;
    }
    size_t size() const { return factors_.size(); }

private:
    std::vector<std::shared_ptr<const factors::Factor>> factors_;
};

struct SolveOptions {
    int max_iters = 50;
    double lambda_init = 1e-4;
    double cost_tol = 1e-8;   // relative decrease of the accepted cost
    double step_tol = 1e-10;
    // Anchor frame-0 position and yaw; roll and pitch stay free.
    bool gauge_fix = true;
};

struct SolveReport {
    double initial_cost = 0.0;
    double final_cost = 0.0;
    int iterations = 0;
    bool converged = false;
    std::string status;
};

struct Evaluation {
    double cost = 0.0;
    std::vector<double> factor_costs;
};

Evaluation evaluate(const Problem& problem, const EstimationState& state);

SolveReport solve(const Problem& problem, EstimationState* state,
                  const SolveOptions& opts);

}  // namespace liom::solver
