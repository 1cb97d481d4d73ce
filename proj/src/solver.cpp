#include "liom/solver.hpp"

#include <Eigen/SparseCholesky>
#include <cmath>

#include "liom/errors.hpp"

namespace liom::solver {

using factors::BlockKind;
using factors::BlockRef;
using factors::FactorEval;

namespace {

// Column layout of the active blocks. Frame-0 position is anchored out and
// frame-0 rotation reduced to the 2-dof subspace with zero world yaw.
struct Layout {
    std::map<BlockRef, int> offset;
    std::map<BlockRef, int> dim;
    int total = 0;
    bool gauge_fix = true;

    static Layout build(const Problem& problem, bool gauge_fix) {
        Layout l;
        l.gauge_fix = gauge_fix;
        std::map<BlockRef, int> dims;
        for (const auto& f : problem.factors()) {
            for (const auto& b : f->blocks()) {
                int d = factors::block_dim(b.kind);
                if (gauge_fix && b.frame == 0 && b.kind == BlockKind::Pos) d = 0;
                if (gauge_fix && b.frame == 0 && b.kind == BlockKind::Rot) d = 2;
                dims[b] = d;
            }
        }
        for (const auto& [b, d] : dims) {
            if (d == 0) continue;
            l.offset[b] = l.total;
            l.dim[b] = d;
            l.total += d;
        }
        return l;
    }
};

// Basis of rotation increments that keep the world yaw of R fixed:
// the orthogonal complement of R^T e_z.
Eigen::Matrix<double, 3, 2> yaw_fixed_basis(const Rot3& r) {
    const Vec3 a = (r.transpose() * Vec3(0.0, 0.0, 1.0)).normalized();
    Eigen::Matrix<double, 3, 2> b;
    b.col(0) = a.unitOrthogonal();
    b.col(1) = a.cross(Vec3(b.col(0))).normalized();
    return b;
}

void apply_step(const Eigen::VectorXd& step, const Layout& layout,
                const Eigen::Matrix<double, 3, 2>& rot0_basis,
                EstimationState* state) {
    for (const auto& [b, off] : layout.offset) {
        const int d = layout.dim.at(b);
        const Eigen::VectorXd delta = step.segment(off, d);
        switch (b.kind) {
            case BlockKind::Rot: {
                Vec3 phi;
                if (d == 2) {
                    phi = rot0_basis * delta;
                } else {
                    phi = delta;
                }
                auto& fr = state->frames[b.frame];
                fr.rot = fr.rot * Rot3::exp(phi);
                break;
            }
            case BlockKind::Pos:
                state->frames[b.frame].pos += Vec3(delta);
                break;
            case BlockKind::Vel:
                state->frames[b.frame].vel += Vec3(delta);
                break;
            case BlockKind::BiasF:
                state->frames[b.frame].bf_corr += Vec3(delta);
                break;
            case BlockKind::BiasW:
                state->frames[b.frame].bw_corr += Vec3(delta);
                break;
            case BlockKind::Dt:
                state->frames[b.frame].dt_corr += delta(0);
                break;
            case BlockKind::CalibRot:
                state->calib.rot = state->calib.rot * Rot3::exp(Vec3(delta));
                break;
            case BlockKind::CalibPos:
                state->calib.trans += Vec3(delta);
                break;
        }
    }
}

// Factors sharing a block signature accumulate into one dense bucket that
// is scattered into the sparse normal equations once per iteration.
struct Bucket {
    std::vector<int> offsets;  // global column start per kept block
    std::vector<int> dims;
    std::vector<int> local;    // local column start per factor block (-1 dropped)
    std::vector<bool> reduced; // frame-0 rotation basis applies
    int total = 0;
    Eigen::MatrixXd h;
    Eigen::VectorXd g;
};

double checked_cost(const FactorEval& ev, size_t factor_idx) {
    if (!std::isfinite(ev.cost) || !ev.residual.allFinite()) {
        throw NumericalFailure("non-finite residual in factor " +
                               std::to_string(factor_idx));
    }
    return ev.cost;
}

}  // namespace

Evaluation evaluate(const Problem& problem, const EstimationState& state) {
    Evaluation e;
    e.factor_costs.reserve(problem.size());
    FactorEval ev;
    for (size_t i = 0; i < problem.size(); ++i) {
        problem.factors()[i]->evaluate(state, false, &ev);
        const double c = checked_cost(ev, i);
        e.factor_costs.push_back(c);
        e.cost += c;
    }
    return e;
}

SolveReport solve(const Problem& problem, EstimationState* state,
                  const SolveOptions& opts) {
    SolveReport report;
    const Layout layout = Layout::build(problem, opts.gauge_fix);

    report.initial_cost = evaluate(problem, *state).cost;
    report.final_cost = report.initial_cost;
    if (layout.total == 0 || problem.size() == 0) {
        report.converged = true;
        report.status = "nothing to optimise";
        return report;
    }

    // Buckets by block signature.
    std::map<std::vector<int>, int> bucket_of_sig;
    std::vector<Bucket> buckets;
    std::vector<int> factor_bucket(problem.size());
    for (size_t i = 0; i < problem.size(); ++i) {
        const auto& blocks = problem.factors()[i]->blocks();
        std::vector<int> sig;
        for (const auto& b : blocks) {
            auto it = layout.offset.find(b);
            sig.push_back(it == layout.offset.end() ? -1 : it->second);
        }
        auto [it, inserted] = bucket_of_sig.try_emplace(sig, buckets.size());
        if (inserted) {
            Bucket bk;
            for (const auto& b : blocks) {
                auto of = layout.offset.find(b);
                if (of == layout.offset.end()) {
                    bk.local.push_back(-1);
                    bk.reduced.push_back(false);
                    continue;
                }
                bk.local.push_back(bk.total);
                bk.offsets.push_back(of->second);
                bk.dims.push_back(layout.dim.at(b));
                bk.reduced.push_back(opts.gauge_fix && b.frame == 0 &&
                                     b.kind == BlockKind::Rot);
                bk.total += layout.dim.at(b);
            }
            bk.h.resize(bk.total, bk.total);
            bk.g.resize(bk.total);
            buckets.push_back(std::move(bk));
        }
        factor_bucket[i] = it->second;
    }

    double lambda = opts.lambda_init;
    double cost = report.initial_cost;
    FactorEval ev;
    Eigen::MatrixXd j_loc;

    for (int iter = 0; iter < opts.max_iters; ++iter) {
        report.iterations = iter + 1;

        const Eigen::Matrix<double, 3, 2> rot0_basis =
            state->frames.empty() ? Eigen::Matrix<double, 3, 2>::Zero()
                                  : yaw_fixed_basis(state->frames[0].rot);

        for (auto& bk : buckets) {
            bk.h.setZero();
            bk.g.setZero();
        }
        for (size_t i = 0; i < problem.size(); ++i) {
            const auto& f = problem.factors()[i];
            f->evaluate(*state, true, &ev);
            checked_cost(ev, i);
            Bucket& bk = buckets[factor_bucket[i]];
            j_loc.setZero(f->dim(), bk.total);
            for (size_t b = 0; b < ev.jac.size(); ++b) {
                if (bk.local[b] < 0) continue;
                if (!ev.jac[b].allFinite()) {
                    throw NumericalFailure("non-finite Jacobian in factor " +
                                           std::to_string(i));
                }
                if (bk.reduced[b]) {
                    j_loc.block(0, bk.local[b], f->dim(), 2) =
                        ev.jac[b] * rot0_basis;
                } else {
                    j_loc.block(0, bk.local[b], f->dim(), ev.jac[b].cols()) =
                        ev.jac[b];
                }
            }
            bk.h.noalias() += j_loc.transpose() * j_loc;
            bk.g.noalias() += j_loc.transpose() * ev.residual;
        }

        // Scatter the buckets into the sparse normal equations.
        std::vector<Eigen::Triplet<double>> trips;
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(layout.total);
        size_t nnz = 0;
        for (const auto& bk : buckets) nnz += bk.total * bk.total;
        trips.reserve(nnz);
        for (const auto& bk : buckets) {
            int row_local = 0;
            for (size_t bi = 0; bi < bk.offsets.size(); ++bi) {
                int col_local = 0;
                for (size_t bj = 0; bj < bk.offsets.size(); ++bj) {
                    for (int r = 0; r < bk.dims[bi]; ++r) {
                        for (int c = 0; c < bk.dims[bj]; ++c) {
                            const double v = bk.h(row_local + r, col_local + c);
                            if (v != 0.0) {
                                trips.emplace_back(bk.offsets[bi] + r,
                                                   bk.offsets[bj] + c, v);
                            }
                        }
                    }
                    col_local += bk.dims[bj];
                }
                grad.segment(bk.offsets[bi], bk.dims[bi]) +=
                    bk.g.segment(row_local, bk.dims[bi]);
                row_local += bk.dims[bi];
            }
        }
        Eigen::SparseMatrix<double> h(layout.total, layout.total);
        h.setFromTriplets(trips.begin(), trips.end());
        const Eigen::VectorXd h_diag = h.diagonal();

        const double grad_norm = grad.lpNorm<Eigen::Infinity>();
        if (grad_norm < 1e-14) {
            report.converged = true;
            report.status = "gradient below tolerance";
            break;
        }

        bool accepted = false;
        for (int attempt = 0; attempt < 12 && !accepted; ++attempt) {
            Eigen::SparseMatrix<double> damped = h;
            for (int k = 0; k < layout.total; ++k) {
                damped.coeffRef(k, k) =
                    h_diag(k) + lambda * std::max(h_diag(k), 1e-12);
            }
            Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(damped);
            if (ldlt.info() != Eigen::Success) {
                lambda = std::min(lambda * 10.0, 1e32);
                continue;
            }
            const Eigen::VectorXd step = ldlt.solve(-grad);
            if (!step.allFinite()) {
                throw NumericalFailure("non-finite LM step");
            }

            EstimationState trial = *state;
            apply_step(step, layout, rot0_basis, &trial);
            const double trial_cost = evaluate(problem, trial).cost;

            if (trial_cost <= cost) {
                const double decrease = cost - trial_cost;
                *state = std::move(trial);
                const double prev_cost = cost;
                cost = trial_cost;
                lambda = std::max(lambda * 0.1, 1e-12);
                accepted = true;
                if (step.norm() < opts.step_tol) {
                    report.converged = true;
                    report.status = "step below tolerance";
                } else if (decrease <= opts.cost_tol * std::max(prev_cost, 1e-30)) {
                    report.converged = true;
                    report.status = "cost decrease below tolerance";
                }
            } else {
                lambda = std::min(lambda * 10.0, 1e32);
            }
        }
        if (!accepted) {
            report.converged = true;
            report.status = "no acceptable step";
            break;
        }
        if (report.converged) break;
    }
    if (report.status.empty()) report.status = "max iterations";
    report.final_cost = cost;
    return report;
}

}  // namespace liom::solver
