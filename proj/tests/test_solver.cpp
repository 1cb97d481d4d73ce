#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "liom/solver.hpp"

using namespace liom;
using namespace liom::factors;
using namespace liom::solver;

namespace {

// Linear prior on one vector block: r = inv_sigma * (x - target).
class VectorPrior : public Factor {
public:
    VectorPrior(BlockKind kind, int frame, const Vec3& target, double sigma)
        : target_(target), inv_sigma_(1.0 / sigma) {
        blocks_ = {{kind, frame}};
    }
    int dim() const override { return 3; }
    const std::vector<BlockRef>& blocks() const override { return blocks_; }
    void evaluate(const EstimationState& st, bool with_jac,
                  FactorEval* out) const override {
        Vec3 x;
        switch (blocks_[0].kind) {
            case BlockKind::Pos: x = st.frames[blocks_[0].frame].pos; break;
            case BlockKind::Vel: x = st.frames[blocks_[0].frame].vel; break;
            default: x = st.frames[blocks_[0].frame].bf_corr; break;
        }
        out->residual = inv_sigma_ * (x - target_);
        out->cost = out->residual.squaredNorm();
        if (!with_jac) return;
        out->jac.assign(1, {});
        out->jac[0] = inv_sigma_ * Mat3::Identity();
    }

private:
    Vec3 target_;
    double inv_sigma_;
    std::vector<BlockRef> blocks_;
};

// Relative constraint between two position blocks.
class RelPosFactor : public Factor {
public:
    RelPosFactor(int a, int b, const Vec3& delta, double sigma)
        : delta_(delta), inv_sigma_(1.0 / sigma) {
        blocks_ = {{BlockKind::Pos, a}, {BlockKind::Pos, b}};
    }
    int dim() const override { return 3; }
    const std::vector<BlockRef>& blocks() const override { return blocks_; }
    void evaluate(const EstimationState& st, bool with_jac,
                  FactorEval* out) const override {
        out->residual = inv_sigma_ * (st.frames[blocks_[1].frame].pos -
                                      st.frames[blocks_[0].frame].pos - delta_);
        out->cost = out->residual.squaredNorm();
        if (!with_jac) return;
        out->jac.assign(2, {});
        out->jac[0] = -inv_sigma_ * Mat3::Identity();
        out->jac[1] = inv_sigma_ * Mat3::Identity();
    }

private:
    Vec3 delta_;
    double inv_sigma_;
    std::vector<BlockRef> blocks_;
};

EstimationState blank_state(int n) {
    EstimationState st;
    for (int i = 0; i < n; ++i) {
        FrameState f;
        f.tau = 0.1 * i;
        st.frames.push_back(f);
    }
    return st;
}

}  // namespace

TEST_CASE("empty problem evaluates to zero") {
    Problem p;
    EstimationState st = blank_state(1);
    CHECK(evaluate(p, st).cost == 0.0);
    SolveOptions opts;
    const auto rep = solve(p, &st, opts);
    CHECK(rep.converged);
    CHECK(rep.final_cost == 0.0);
}

TEST_CASE("single satisfied factor evaluates to zero") {
    Problem p;
    EstimationState st = blank_state(1);
    p.add(std::make_shared<VectorPrior>(BlockKind::Vel, 0, Vec3::Zero(), 1.0));
    CHECK(evaluate(p, st).cost == 0.0);
}

TEST_CASE("evaluate matches an independent summation oracle") {
    Problem p;
    EstimationState st = blank_state(2);
    st.frames[0].vel = Vec3(1, 2, 3);
    st.frames[1].pos = Vec3(0.5, 0, 0);
    p.add(std::make_shared<VectorPrior>(BlockKind::Vel, 0, Vec3(0, 0, 0), 2.0));
    p.add(std::make_shared<RelPosFactor>(0, 1, Vec3(1, 0, 0), 0.5));
    const auto e = evaluate(p, st);
    const double oracle = Vec3(1, 2, 3).squaredNorm() / 4.0 +
                          Vec3(-0.5, 0, 0).squaredNorm() / 0.25;
    CHECK(e.cost == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(e.factor_costs.size() == 2);
    CHECK(e.factor_costs[0] + e.factor_costs[1] == doctest::Approx(e.cost));
}

TEST_CASE("linear problem converges to the normal-equation solution") {
    // Chain of positions with priors: strictly quadratic, so LM lands on
    // the closed-form optimum almost immediately.
    Problem p;
    EstimationState st = blank_state(3);
    p.add(std::make_shared<VectorPrior>(BlockKind::Pos, 1, Vec3(1, 0, 0), 1.0));
    p.add(std::make_shared<RelPosFactor>(1, 2, Vec3(1, 1, 0), 1.0));
    p.add(std::make_shared<VectorPrior>(BlockKind::Pos, 2, Vec3(2, 1.5, 0), 1.0));

    SolveOptions opts;
    opts.gauge_fix = false;
    const auto rep = solve(p, &st, opts);
    CHECK(rep.converged);

    // Closed form: x1 from its prior and the chained measurements.
    // Stack: x1 = a; x2 - x1 = b; x2 = c -> normal equations.
    Eigen::MatrixXd a(9, 6);
    a.setZero();
    Eigen::VectorXd rhs(9);
    a.block<3, 3>(0, 0) = Mat3::Identity();
    rhs.segment<3>(0) = Vec3(1, 0, 0);
    a.block<3, 3>(3, 0) = -Mat3::Identity();
    a.block<3, 3>(3, 3) = Mat3::Identity();
    rhs.segment<3>(3) = Vec3(1, 1, 0);
    a.block<3, 3>(6, 3) = Mat3::Identity();
    rhs.segment<3>(6) = Vec3(2, 1.5, 0);
    const Eigen::VectorXd sol =
        (a.transpose() * a).ldlt().solve(a.transpose() * rhs);

    CHECK((st.frames[1].pos - sol.segment<3>(0)).norm() < 1e-8);
    CHECK((st.frames[2].pos - sol.segment<3>(3)).norm() < 1e-8);
    CHECK(rep.iterations <= 3);
}

TEST_CASE("accepted steps never increase the cost") {
    Problem p;
    EstimationState st = blank_state(4);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 4; ++i) {
        st.frames[i].pos = Vec3(u(rng), u(rng), u(rng));
        p.add(std::make_shared<VectorPrior>(BlockKind::Pos, i,
                                            Vec3(u(rng), u(rng), u(rng)), 0.3));
    }
    for (int i = 0; i + 1 < 4; ++i) {
        p.add(std::make_shared<RelPosFactor>(i, i + 1, Vec3(u(rng), 0, 0), 0.2));
    }
    SolveOptions opts;
    opts.gauge_fix = false;
    const auto rep = solve(p, &st, opts);
    CHECK(rep.final_cost <= rep.initial_cost);
    CHECK(rep.converged);
}

TEST_CASE("gauge-fixed blocks stay anchored") {
    Problem p;
    EstimationState st = blank_state(2);
    st.frames[0].pos = Vec3(0, 0, 0);
    // Only relative information: without the anchor this is rank deficient.
    p.add(std::make_shared<RelPosFactor>(0, 1, Vec3(1, 0, 0), 1.0));
    SolveOptions opts;
    opts.gauge_fix = true;
    const auto rep = solve(p, &st, opts);
    CHECK(rep.converged);
    CHECK(st.frames[0].pos.norm() == 0.0);  // anchored, never touched
    CHECK((st.frames[1].pos - Vec3(1, 0, 0)).norm() < 1e-8);
}

TEST_CASE("sparsity: factors only touch their referenced blocks") {
    Problem p;
    EstimationState st = blank_state(3);
    st.frames[2].vel = Vec3(5, 5, 5);  // unreferenced block
    p.add(std::make_shared<VectorPrior>(BlockKind::Pos, 1, Vec3(1, 1, 1), 1.0));
    SolveOptions opts;
    opts.gauge_fix = false;
    solve(p, &st, opts);
    CHECK((st.frames[2].vel - Vec3(5, 5, 5)).norm() == 0.0);
    CHECK((st.frames[1].pos - Vec3(1, 1, 1)).norm() < 1e-10);
}
