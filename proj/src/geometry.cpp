#include "liom/geometry.hpp"

#include <cmath>

namespace liom {

Rot3 Rot3::exp(const Vec3& phi) {
    const double theta2 = phi.squaredNorm();
    const double theta = std::sqrt(theta2);
    const Mat3 s = skew(phi);
    if (theta < kSmallAngle) {
        // I + phi^ + 0.5 (phi^)^2, accurate to O(theta^3)
        return Rot3(Mat3(Mat3::Identity() + s + 0.5 * (s * s)));
    }
    const double a = std::sin(theta) / theta;
    const double b = (1.0 - std::cos(theta)) / theta2;
    return Rot3(Mat3(Mat3::Identity() + a * s + b * (s * s)));
}

Vec3 Rot3::log() const {
    const double trace = m_.trace();
    const double cos_theta = std::min(1.0, std::max(-1.0, 0.5 * (trace - 1.0)));
    const double theta = std::acos(cos_theta);

    Vec3 axis_raw(m_(2, 1) - m_(1, 2),
                  m_(0, 2) - m_(2, 0),
                  m_(1, 0) - m_(0, 1));

    if (theta < kSmallAngle) {
        return 0.5 * axis_raw;
    }
    if (theta < M_PI - 1e-6) {
        return (theta / (2.0 * std::sin(theta))) * axis_raw;
    }

    // Near pi the off-diagonal difference vanishes and acos of the trace is
    // ill-conditioned. The axis comes out of the symmetric part, where
    // (R + R^T + 2I)/4 = n n^T + O((pi-theta)^2), and the angle from the
    // well-conditioned asin of the off-diagonal magnitude.
    const Mat3 a = 0.25 * (m_ + m_.transpose() + 2.0 * Mat3::Identity());
    int k = 0;
    a.diagonal().maxCoeff(&k);
    Vec3 axis = a.col(k) / std::sqrt(std::max(a(k, k), 1e-15));
    axis.normalize();
    const double sin_rem = std::min(1.0, 0.5 * axis_raw.norm());
    const double angle = M_PI - std::asin(sin_rem);
    if (axis_raw.dot(axis) < 0.0) axis = -axis;
    return angle * axis;
}

Mat3 Rot3::right_jacobian(const Vec3& phi) {
    const double theta2 = phi.squaredNorm();
    const double theta = std::sqrt(theta2);
    const Mat3 s = skew(phi);
    if (theta < kSmallAngle) {
        return Mat3::Identity() - 0.5 * s + (1.0 / 6.0) * (s * s);
    }
    const double a = (1.0 - std::cos(theta)) / theta2;
    const double b = (theta - std::sin(theta)) / (theta2 * theta);
    return Mat3::Identity() - a * s + b * (s * s);
}

Mat3 Rot3::right_jacobian_inverse(const Vec3& phi) {
    const double theta2 = phi.squaredNorm();
    const double theta = std::sqrt(theta2);
    const Mat3 s = skew(phi);
    if (theta < kSmallAngle) {
        return Mat3::Identity() + 0.5 * s + (1.0 / 12.0) * (s * s);
    }
    const double c = 1.0 / theta2 -
                     (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
    return Mat3::Identity() + 0.5 * s + c * (s * s);
}

void Rot3::normalize() {
    Eigen::JacobiSVD<Mat3> svd(m_, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0.0) {
        Mat3 d = Mat3::Identity();
        d(2, 2) = -1.0;
        r = svd.matrixU() * d * svd.matrixV().transpose();
    }
    m_ = r;
}

Rot3 rotation_between(const Vec3& from, const Vec3& to) {
    const Vec3 f = from.normalized();
    const Vec3 t = to.normalized();
    const double c = f.dot(t);
    if (c > 1.0 - 1e-12) return Rot3::identity();
    if (c < -1.0 + 1e-12) {
        // Antipodal: rotate by pi about any axis orthogonal to f.
        Vec3 axis = f.unitOrthogonal();
        return Rot3::exp(M_PI * axis);
    }
    const Vec3 axis = f.cross(t).normalized();
    return Rot3::exp(std::acos(std::min(1.0, std::max(-1.0, c))) * axis);
}

double rotation_distance(const Rot3& a, const Rot3& b) {
    return (a.transpose() * b).log().norm();
}

}  // namespace liom
