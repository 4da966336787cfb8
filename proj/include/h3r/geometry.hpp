#pragma once

#include <array>
#include <cmath>

#include "h3r/common.hpp"

namespace h3r {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        const double n = norm();
        if (n == 0) throw NumericError("cannot normalize zero vector");
        return {x / n, y / n, z / n};
    }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// Row-major 3x3.
struct Mat3 {
    std::array<double, 9> m{};

    static Mat3 identity() {
        Mat3 r;
        r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return r;
    }
    static Mat3 from_rows(const Vec3& a, const Vec3& b, const Vec3& c) {
        Mat3 r;
        r.m = {a.x, a.y, a.z, b.x, b.y, b.z, c.x, c.y, c.z};
        return r;
    }
    static Mat3 diag(double a, double b, double c) {
        Mat3 r;
        r.m = {a, 0, 0, 0, b, 0, 0, 0, c};
        return r;
    }

    double operator()(int r, int c) const { return m[static_cast<size_t>(r * 3 + c)]; }
    double& operator()(int r, int c) { return m[static_cast<size_t>(r * 3 + c)]; }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }
    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 operator+(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[static_cast<size_t>(i)] = m[static_cast<size_t>(i)] + o.m[static_cast<size_t>(i)];
        return r;
    }
    Mat3 operator*(double s) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[static_cast<size_t>(i)] = m[static_cast<size_t>(i)] * s;
        return r;
    }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }

    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

    Mat3 inverse() const {
        const double d = det();
        if (std::abs(d) < 1e-300) throw NumericError("singular 3x3 matrix");
        Mat3 r;
        r.m = {(m[4] * m[8] - m[5] * m[7]), -(m[1] * m[8] - m[2] * m[7]),
               (m[1] * m[5] - m[2] * m[4]), -(m[3] * m[8] - m[5] * m[6]),
               (m[0] * m[8] - m[2] * m[6]), -(m[0] * m[5] - m[2] * m[3]),
               (m[3] * m[7] - m[4] * m[6]), -(m[0] * m[7] - m[1] * m[6]),
               (m[0] * m[4] - m[1] * m[3])};
        for (auto& v : r.m) v /= d;
        return r;
    }

    double max_abs_diff(const Mat3& o) const {
        double e = 0;
        for (int i = 0; i < 9; ++i)
            e = std::max(e, std::abs(m[static_cast<size_t>(i)] - o.m[static_cast<size_t>(i)]));
        return e;
    }
};

// Nearest rotation in Frobenius norm (polar factor), via the Newton
// iteration X <- (X + X^-T)/2. Converges quadratically for the
// near-orthogonal inputs produced by averaging camera rotations.
inline Mat3 orthogonal_project(const Mat3& a, int max_iter = 64) {
    Mat3 x = a;
    for (int it = 0; it < max_iter; ++it) {
        const Mat3 next = (x + x.inverse().transposed()) * 0.5;
        const double delta = next.max_abs_diff(x);
        x = next;
        if (delta < 1e-15) break;
    }
    if (x.det() < 0) throw NumericError("orthogonal projection yielded a reflection");
    return x;
}

}  // namespace h3r
