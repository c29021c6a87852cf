#pragma once
// Reference implementations for the tests. Written independently of src/:
// direct sums over every control point, the recursive B-spline definition and
// central differences.

#include "gridreg/gridfield.hpp"
#include "gridreg/rng.hpp"
#include "gridreg/volume.hpp"

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

namespace oracle {

using gridreg::Dims3;

/// Cox-de Boor recursion N_{i,p}(t). Zero-length spans contribute 0; the last
/// non-empty span is closed so that t = 1 is covered.
inline double cox_de_boor(const std::vector<double>& U, int i, int p, double t) {
    if (p == 0) {
        const double a = U[std::size_t(i)], b = U[std::size_t(i + 1)];
        if (a < b && a <= t && t < b) return 1.0;
        if (a < b && t == b && b == U.back()) return 1.0;
        return 0.0;
    }
    double left = 0.0, right = 0.0;
    const double d1 = U[std::size_t(i + p)] - U[std::size_t(i)];
    const double d2 = U[std::size_t(i + p + 1)] - U[std::size_t(i + 1)];
    if (d1 > 0.0) left = (t - U[std::size_t(i)]) / d1 * cox_de_boor(U, i, p - 1, t);
    if (d2 > 0.0) right = (U[std::size_t(i + p + 1)] - t) / d2 * cox_de_boor(U, i + 1, p - 1, t);
    return left + right;
}

/// Open-uniform cubic knots for n control points, built from the definition.
inline std::vector<double> knots(int n) {
    std::vector<double> U(std::size_t(n + 4));
    for (int j = 0; j < n + 4; ++j) {
        if (j < 4) {
            U[std::size_t(j)] = 0.0;
        } else if (j >= n) {
            U[std::size_t(j)] = 1.0;
        } else {
            U[std::size_t(j)] = double(j - 3) / double(n - 3);
        }
    }
    return U;
}

/// Per-axis weight of control index c at voxel x along an axis with g nodes over `dim` voxels.
inline double weight_1d(gridreg::KernelKind kind, double sigma, int g, int dim, int c, double x) {
    const double h = double(dim - 1) / double(g - 1);
    switch (kind) {
    case gridreg::KernelKind::trilinear:
        return std::max(0.0, 1.0 - std::abs(x - c * h) / h);
    case gridreg::KernelKind::bspline3:
        return cox_de_boor(knots(g), c, 3, x / double(dim - 1));
    case gridreg::KernelKind::gaussian: {
        const double d = (x - c * h) / (sigma * h);
        return std::exp(-0.5 * d * d);
    }
    }
    return 0.0;
}

/// u(x) = sum_c w(x, c) mu_c over all G control points, one voxel at a time.
/// Gaussian weights are normalised by the 3-D weight sum at each voxel.
inline gridreg::Field3<double> direct_upsample(const gridreg::GriddedField<double>& f, const Dims3& dims,
                                               const gridreg::InterpKernel& k) {
    const Dims3 g = f.grid.grid_dims;
    gridreg::Field3<double> u = gridreg::Field3<double>::Zero(3, gridreg::voxel_count(dims));
    for (int z = 0; z < dims(2); ++z)
        for (int y = 0; y < dims(1); ++y)
            for (int x = 0; x < dims(0); ++x) {
                Eigen::Vector3d acc = Eigen::Vector3d::Zero();
                double wsum = 0.0;
                for (int c = 0; c < g(2); ++c)
                    for (int b = 0; b < g(1); ++b)
                        for (int a = 0; a < g(0); ++a) {
                            const double w = weight_1d(k.kind, k.gaussian_sigma, g(0), dims(0), a, x) *
                                             weight_1d(k.kind, k.gaussian_sigma, g(1), dims(1), b, y) *
                                             weight_1d(k.kind, k.gaussian_sigma, g(2), dims(2), c, z);
                            acc += w * f.mu.col(gridreg::linear_index(g, a, b, c));
                            wsum += w;
                        }
                if (k.kind == gridreg::KernelKind::gaussian) acc /= wsum;
                u.col(gridreg::linear_index(dims, x, y, z)) = acc;
            }
    return u;
}

inline gridreg::GriddedField<double> random_field(const gridreg::ControlGrid& grid, std::uint64_t seed,
                                                  double scale = 1.0, bool bayesian = false) {
    auto rng = gridreg::make_engine(seed, gridreg::Stream::test);
    auto f = gridreg::GriddedField<double>::zeros(grid, bayesian);
    for (Eigen::Index i = 0; i < f.mu.size(); ++i) f.mu(i) = gridreg::uniform_real(rng, -scale, scale);
    if (bayesian) {
        for (Eigen::Index i = 0; i < f.eta->size(); ++i) (*f.eta)(i) = gridreg::uniform_real(rng, -1.0, 1.0);
    }
    return f;
}

/// Central difference of a scalar function of a parameter vector, one entry at a time.
template <typename Vec>
Vec central_difference(const std::function<double(const Vec&)>& fn, Vec x, double h) {
    Vec g = Vec::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double v = x(i);
        x(i) = v + h;
        const double fp = fn(x);
        x(i) = v - h;
        const double fm = fn(x);
        x(i) = v;
        g(i) = (fp - fm) / (2 * h);
    }
    return g;
}

/// max|a - n| / max(|a|_inf, |n|_inf), the gradcheck convention.
template <typename A, typename B>
double rel_error(const A& a, const B& n) {
    const double scale = std::max(a.cwiseAbs().maxCoeff(), n.cwiseAbs().maxCoeff());
    return scale == 0.0 ? 0.0 : (a - n).cwiseAbs().maxCoeff() / scale;
}

/// Unique scratch directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path = std::filesystem::temp_directory_path() /
               ("gridreg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

inline gridreg::Volume ramp_volume(const Dims3& dims, const Eigen::Vector3d& slope) {
    Eigen::ArrayXf data(gridreg::voxel_count(dims));
    for (int z = 0; z < dims(2); ++z)
        for (int y = 0; y < dims(1); ++y)
            for (int x = 0; x < dims(0); ++x)
                data(gridreg::linear_index(dims, x, y, z)) = float(slope(0) * x + slope(1) * y + slope(2) * z);
    return gridreg::Volume(dims, Eigen::Vector3d::Ones(), data);
}

} // namespace oracle
