#pragma once

#include <array>
#include <vector>

#include "liom/geometry.hpp"

namespace liom {

struct ImuSample {
    double t = 0.0;  // seconds
    Vec3 acc{Vec3::Zero()};  // specific force, m/s^2
    Vec3 gyr{Vec3::Zero()};  // angular rate, rad/s
};

struct GpHyperparams {
    double sigma_noise = 0.0;  // training noise std
    double sigma_k = 0.0;      // kernel magnitude
    double length_scale = 0.0; // seconds

    bool valid() const {
        return sigma_noise > 0.0 && sigma_k > 0.0 && length_scale > 0.0;
    }
};

// Matern 3/2: sigma_k^2 (1 + sqrt(3)|dt|/l) exp(-sqrt(3)|dt|/l)
double matern32(double t1, double t2, const GpHyperparams& hyper);

struct GpFitOptions {
    double sigma_noise_init = 0.0;   // from the sensor spec
    double sigma_k_floor = 1e-4;
    double sigma_noise_floor = 1e-6;
    bool optimize_hypers = true;
    int rounds = 3;
    int steps_per_round = 8;
    int max_evals = 200;
};

// One scalar GP over a time window of one IMU degree of freedom.
// Immutable once fitted; shares nothing mutable between queries.
class GpWindow {
public:
    GpWindow() = default;

    // Fits on samples with span_lo <= t <= span_hi, hyperparameters
    // initialised from the data then refined by a deterministic
    // coordinate search on the log marginal likelihood.
    // Throws InsufficientSamples when fewer than 2 samples fall in the span.
    static GpWindow fit(const std::vector<double>& times,
                        const std::vector<double>& values,
                        double span_lo, double span_hi,
                        const GpFitOptions& opts);

    // Fit with fixed hyperparameters, no refinement.
    static GpWindow fit_fixed(const std::vector<double>& times,
                              const std::vector<double>& values,
                              double span_lo, double span_hi,
                              const GpHyperparams& hyper);

    // Posterior mean and variance at time t. Extrapolation reverts toward
    // the zero prior mean. Variance is clamped to be non-negative.
    void infer(double t, double* mean, double* variance) const;
    double infer_mean(double t) const;

    const GpHyperparams& hyper() const { return hyper_; }
    const std::vector<double>& train_times() const { return train_t_; }
    const std::vector<double>& train_values() const { return train_v_; }
    double log_marginal_likelihood() const { return lml_; }

private:
    void factorize();

    GpHyperparams hyper_;
    std::vector<double> train_t_;
    std::vector<double> train_v_;
    Eigen::LLT<Eigen::MatrixXd> llt_;  // of K + sigma_noise^2 I
    Eigen::VectorXd alpha_;            // (K + sigma^2 I)^-1 y
    double lml_ = 0.0;
};

// The six per-DoF regressors covering one lidar frame:
// order ax ay az wx wy wz.
class ImuGp {
public:
    ImuGp() = default;

    struct Options {
        double overlap = 0.05;        // seconds beyond the frame span
        double sigma_acc = 0.02;      // sensor noise, m/s^2
        double sigma_gyr = 0.0017;    // sensor noise, rad/s
        bool optimize_hypers = true;
    };

    // Fits all six windows from the stream restricted to
    // [span_lo - overlap, span_hi + overlap].
    static ImuGp fit(const std::vector<ImuSample>& samples,
                     double span_lo, double span_hi, const Options& opts);

    void infer(double t, Vec3* acc, Vec3* gyr,
               Eigen::Matrix<double, 6, 1>* variances = nullptr) const;

    const GpWindow& window(int dof) const { return windows_[dof]; }
    double span_lo() const { return span_lo_; }
    double span_hi() const { return span_hi_; }

private:
    std::array<GpWindow, 6> windows_;
    double span_lo_ = 0.0;
    double span_hi_ = 0.0;
};

}  // namespace liom
