#pragma once

#include <Eigen/Dense>

namespace liom {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline Mat3 skew(const Vec3& v) {
    Mat3 s;
    s <<     0, -v.z(),  v.y(),
         v.z(),      0, -v.x(),
        -v.y(),  v.x(),      0;
    return s;
}

// Rotation stored as an orthonormal 3x3 matrix with det +1.
class Rot3 {
public:
    Rot3() : m_(Mat3::Identity()) {}
    explicit Rot3(const Mat3& m) : m_(m) {}

    static Rot3 identity() { return Rot3(); }

    // Rodrigues formula; second-order Taylor series below kSmallAngle.
    static Rot3 exp(const Vec3& phi);

    // Inverse of exp. Angles near pi are recovered through the
    // largest-diagonal column of R + R^T.
    Vec3 log() const;

    // Right Jacobian of SO(3) and its inverse.
    static Mat3 right_jacobian(const Vec3& phi);
    static Mat3 right_jacobian_inverse(const Vec3& phi);

    Rot3 operator*(const Rot3& o) const { return Rot3(m_ * o.m_); }
    Vec3 operator*(const Vec3& v) const { return m_ * v; }
    Rot3 transpose() const { return Rot3(m_.transpose()); }
    const Mat3& matrix() const { return m_; }

    Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(m_); }
    static Rot3 from_quaternion(double w, double x, double y, double z) {
        return Rot3(Eigen::Quaterniond(w, x, y, z).normalized().toRotationMatrix());
    }

    // Re-orthonormalise after long chains of products.
    void normalize();

    static constexpr double kSmallAngle = 1e-8;

private:
    Mat3 m_;
};

// Rigid transform, rotation plus translation.
struct Pose3 {
    Rot3 rot;
    Vec3 trans{Vec3::Zero()};

    Pose3() = default;
    Pose3(const Rot3& r, const Vec3& t) : rot(r), trans(t) {}

    static Pose3 identity() { return Pose3(); }

    Pose3 compose(const Pose3& o) const {
        return Pose3(rot * o.rot, rot * o.trans + trans);
    }
    Pose3 inverse() const {
        Rot3 rt = rot.transpose();
        return Pose3(rt, -(rt * trans));
    }
    Vec3 transform(const Vec3& x) const { return rot * x + trans; }

    Pose3 operator*(const Pose3& o) const { return compose(o); }
};

// Minimal rotation that maps unit vector `from` onto unit vector `to`.
Rot3 rotation_between(const Vec3& from, const Vec3& to);

// Geodesic angle between two rotations, radians.
double rotation_distance(const Rot3& a, const Rot3& b);

}  // namespace liom
