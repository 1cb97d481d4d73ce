#include "liom/imu_gp.hpp"

#include <algorithm>
#include <cmath>

#include "liom/errors.hpp"

namespace liom {

double matern32(double t1, double t2, const GpHyperparams& hyper) {
    const double r = std::sqrt(3.0) * std::abs(t1 - t2) / hyper.length_scale;
    return hyper.sigma_k * hyper.sigma_k * (1.0 + r) * std::exp(-r);
}

namespace {

Eigen::MatrixXd gram(const std::vector<double>& t, const GpHyperparams& h) {
    const int n = static_cast<int>(t.size());
    Eigen::MatrixXd k(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = i; j < n; ++j) {
            k(i, j) = matern32(t[i], t[j], h);
            k(j, i) = k(i, j);
        }
    }
    return k;
}

// Cholesky of K + sigma^2 I with jitter retries.
bool factorize_with_jitter(const Eigen::MatrixXd& k, double sigma_noise,
                           Eigen::LLT<Eigen::MatrixXd>* llt) {
    double jitter = 0.0;
    for (int attempt = 0; attempt < 4; ++attempt) {
        Eigen::MatrixXd a = k;
        a.diagonal().array() += sigma_noise * sigma_noise + jitter;
        llt->compute(a);
        if (llt->info() == Eigen::Success) return true;
        jitter = (jitter == 0.0) ? 1e-10 : jitter * 10.0;
    }
    return false;
}

double log_marginal(const std::vector<double>& t, const Eigen::VectorXd& y,
                    const GpHyperparams& h) {
    Eigen::LLT<Eigen::MatrixXd> llt;
    if (!factorize_with_jitter(gram(t, h), h.sigma_noise, &llt)) {
        return -std::numeric_limits<double>::infinity();
    }
    const Eigen::VectorXd alpha = llt.solve(y);
    double logdet = 0.0;
    for (int i = 0; i < llt.matrixL().rows(); ++i) {
        logdet += 2.0 * std::log(llt.matrixL()(i, i));
    }
    const double n = static_cast<double>(y.size());
    return -0.5 * y.dot(alpha) - 0.5 * logdet - 0.5 * n * std::log(2.0 * M_PI);
}

}  // namespace

GpWindow GpWindow::fit_fixed(const std::vector<double>& times,
                             const std::vector<double>& values,
                             double span_lo, double span_hi,
                             const GpHyperparams& hyper) {
    GpWindow w;
    for (size_t i = 0; i < times.size(); ++i) {
        if (times[i] >= span_lo && times[i] <= span_hi) {
            w.train_t_.push_back(times[i]);
            w.train_v_.push_back(values[i]);
        }
    }
    if (w.train_t_.size() < 2) {
        throw InsufficientSamples("GP window needs at least 2 samples in span");
    }
    w.hyper_ = hyper;
    w.factorize();
    return w;
}

GpWindow GpWindow::fit(const std::vector<double>& times,
                       const std::vector<double>& values,
                       double span_lo, double span_hi,
                       const GpFitOptions& opts) {
    std::vector<double> t, v;
    for (size_t i = 0; i < times.size(); ++i) {
        if (times[i] >= span_lo && times[i] <= span_hi) {
            t.push_back(times[i]);
            v.push_back(values[i]);
        }
    }
    if (t.size() < 2) {
        throw InsufficientSamples("GP window needs at least 2 samples in span");
    }

    // Initialisation: sensor noise spec, empirical variance, thirty IMU periods.
    const double n = static_cast<double>(t.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= n;

    double period = (t.back() - t.front()) / (n - 1.0);
    GpHyperparams h;
    h.sigma_noise = std::max(opts.sigma_noise_init, opts.sigma_noise_floor);
    h.sigma_k = std::max(std::sqrt(var), opts.sigma_k_floor);
    h.length_scale = 30.0 * period;

    if (opts.optimize_hypers) {
        Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
        int evals = 0;
        double best = log_marginal(t, y, h);
        ++evals;
        // Greedy coordinate moves in log-space, shrinking factors per round.
        const double factors[3] = {10.0, 2.15, 1.2};
        for (int round = 0; round < opts.rounds && evals < opts.max_evals; ++round) {
            const double f = factors[std::min(round, 2)];
            for (int p = 0; p < 3 && evals < opts.max_evals; ++p) {
                for (int dir = 0; dir < 2 && evals < opts.max_evals; ++dir) {
                    const double mult = dir == 0 ? f : 1.0 / f;
                    for (int step = 0; step < opts.steps_per_round && evals < opts.max_evals; ++step) {
                        GpHyperparams trial = h;
                        double* field = p == 0 ? &trial.sigma_k
                                      : p == 1 ? &trial.length_scale
                                               : &trial.sigma_noise;
                        *field *= mult;
                        trial.sigma_k = std::max(trial.sigma_k, opts.sigma_k_floor);
                        trial.sigma_noise = std::max(trial.sigma_noise, opts.sigma_noise_floor);
                        trial.length_scale = std::min(std::max(trial.length_scale, 2.0 * period),
                                                      10.0 * (t.back() - t.front()) + period);
                        const double lml = log_marginal(t, y, trial);
                        ++evals;
                        if (lml > best + 1e-12) {
                            best = lml;
                            h = trial;
                        } else {
                            break;
                        }
                    }
                }
            }
        }
    }

    GpWindow w;
    w.train_t_ = std::move(t);
    w.train_v_ = std::move(v);
    w.hyper_ = h;
    w.factorize();
    return w;
}

void GpWindow::factorize() {
    if (!factorize_with_jitter(gram(train_t_, hyper_), hyper_.sigma_noise, &llt_)) {
        throw NumericalFailure("GP gram matrix not positive definite");
    }
    Eigen::VectorXd y =
        Eigen::Map<const Eigen::VectorXd>(train_v_.data(), train_v_.size());
    alpha_ = llt_.solve(y);
    double logdet = 0.0;
    for (int i = 0; i < llt_.matrixL().rows(); ++i) {
        logdet += 2.0 * std::log(llt_.matrixL()(i, i));
    }
    lml_ = -0.5 * y.dot(alpha_) - 0.5 * logdet -
           0.5 * static_cast<double>(y.size()) * std::log(2.0 * M_PI);
}

void GpWindow::infer(double t, double* mean, double* variance) const {
    const int n = static_cast<int>(train_t_.size());
    Eigen::VectorXd k(n);
    for (int i = 0; i < n; ++i) k(i) = matern32(t, train_t_[i], hyper_);
    *mean = k.dot(alpha_);
    if (variance != nullptr) {
        const Eigen::VectorXd w = llt_.solve(k);
        double var = matern32(t, t, hyper_) - k.dot(w);
        if (var < 0.0) var = 0.0;
        *variance = var;
    }
}

double GpWindow::infer_mean(double t) const {
    double m;
    infer(t, &m, nullptr);
    return m;
}

ImuGp ImuGp::fit(const std::vector<ImuSample>& samples,
                 double span_lo, double span_hi, const Options& opts) {
    ImuGp gp;
    gp.span_lo_ = span_lo - opts.overlap;
    gp.span_hi_ = span_hi + opts.overlap;

    std::vector<double> t;
    std::array<std::vector<double>, 6> v;
    for (const auto& s : samples) {
        if (s.t < gp.span_lo_ || s.t > gp.span_hi_) continue;
        t.push_back(s.t);
        for (int d = 0; d < 3; ++d) {
            v[d].push_back(s.acc[d]);
            v[3 + d].push_back(s.gyr[d]);
        }
    }

    for (int d = 0; d < 6; ++d) {
        GpFitOptions fo;
        fo.sigma_noise_init = d < 3 ? opts.sigma_acc : opts.sigma_gyr;
        fo.sigma_k_floor = d < 3 ? 1e-4 : 1e-5;
        fo.optimize_hypers = opts.optimize_hypers;
        gp.windows_[d] = GpWindow::fit(t, v[d], gp.span_lo_, gp.span_hi_, fo);
    }
    return gp;
}

void ImuGp::infer(double t, Vec3* acc, Vec3* gyr,
                  Eigen::Matrix<double, 6, 1>* variances) const {
    for (int d = 0; d < 3; ++d) {
        double m, var;
        if (variances != nullptr) {
            windows_[d].infer(t, &m, &var);
            (*variances)(d) = var;
        } else {
            windows_[d].infer(t, &m, nullptr);
        }
        (*acc)[d] = m;
    }
    for (int d = 0; d < 3; ++d) {
        double m, var;
        if (variances != nullptr) {
            windows_[3 + d].infer(t, &m, &var);
            (*variances)(3 + d) = var;
        } else {
            windows_[3 + d].infer(t, &m, nullptr);
        }
        (*gyr)[d] = m;
    }
}

}  // namespace liom
