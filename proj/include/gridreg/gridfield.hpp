#pragma once

#include "gridreg/volume.hpp"

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace gridreg {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Three-component vector field stored one column per site (x-fastest site order).
template <typename Scalar>
using Field3 = Eigen::Matrix<Scalar, 3, Eigen::Dynamic>;

/// Axis-aligned lattice of control points spanning [0, dim-1] on every axis, endpoints included.
struct ControlGrid {
    Dims3 grid_dims;
    Dims3 image_dims;

    Eigen::Index size() const { return voxel_count(grid_dims); }
    /// Distance between neighbouring control points along an axis, in voxels.
    double spacing(int axis) const {
        return double(image_dims(axis) - 1) / double(grid_dims(axis) - 1);
    }
    /// Voxel coordinate of control index `idx` along `axis`.
    double coord(int axis, int idx) const;
    /// G x 3 matrix of control point coordinates in voxel units.
    Eigen::MatrixX3d coords() const;

    bool operator==(const ControlGrid& o) const {
        return (grid_dims == o.grid_dims).all() && (image_dims == o.image_dims).all();
    }
};

/// Throws std::invalid_argument when a grid dim is < 2 or exceeds its image dim.
ControlGrid make_control_grid(const Dims3& image_dims, const Dims3& grid_dims);

/// Floor applied to every variance derived from the raw log-variance parameters.
inline constexpr double kVarianceFloor = 1e-6;

/// Numerically stable softplus: log1p(exp(-|x|)) + max(x, 0).
template <typename Scalar>
Scalar softplus(Scalar x) {
    using std::abs;
    using std::exp;
    using std::log1p;
    return log1p(exp(-abs(x))) + (x > Scalar(0) ? x : Scalar(0));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    using std::exp;
    return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + exp(-x)) : exp(x) / (Scalar(1) + exp(x));
}

/// Control-point displacement means (and, in Bayesian mode, raw variance parameters).
template <typename Scalar>
struct GriddedField {
    ControlGrid grid;
    Field3<Scalar> mu;
    std::optional<Field3<Scalar>> eta;

    static GriddedField zeros(const ControlGrid& grid, bool bayesian = false) {
        GriddedField f{grid, Field3<Scalar>::Zero(3, grid.size()), std::nullopt};
        if (bayesian) {
            f.eta = Field3<Scalar>::Zero(3, grid.size());
        }
        return f;
    }

    bool bayesian() const { return eta.has_value(); }

    /// softplus(eta), floored at kVarianceFloor. Throws for non-Bayesian fields.
    Field3<Scalar> sigma2() const;

    template <typename Other>
    GriddedField<Other> cast() const {
        GriddedField<Other> out{grid, mu.template cast<Other>(), std::nullopt};
        if (eta) {
            out.eta = eta->template cast<Other>();
        }
        return out;
    }

    /// Throws if shapes disagree with the grid or values are not finite.
    void validate() const;
};

/// Per-voxel displacement field in voxel units.
template <typename Scalar>
struct DenseField {
    Dims3 dims;
    Field3<Scalar> u;

    static DenseField zeros(const Dims3& dims) { return {dims, Field3<Scalar>::Zero(3, voxel_count(dims))}; }

    /// Displacement u(x) = A x + b evaluated at every voxel.
    static DenseField affine(const Dims3& dims, const Eigen::Matrix3d& a, const Eigen::Vector3d& b);

    template <typename Other>
    DenseField<Other> cast() const {
        return {dims, u.template cast<Other>()};
    }
};

enum class KernelKind { trilinear, bspline3, gaussian };

std::string to_string(KernelKind kind);
KernelKind parse_kernel_kind(const std::string& name);

/// Basis-function family used to lift a gridded field to voxel resolution.
struct InterpKernel {
    KernelKind kind = KernelKind::trilinear;
    /// Gaussian standard deviation in control-cell widths.
    double gaussian_sigma = 0.5;

    static InterpKernel trilinear() { return {KernelKind::trilinear, 0.5}; }
    static InterpKernel bspline() { return {KernelKind::bspline3, 0.5}; }
    static InterpKernel gaussian(double sigma = 0.5) { return {KernelKind::gaussian, sigma}; }

    void validate() const;
};

/// Open-uniform knot vector [0,0,0, linspace(0,1,n-2), 1,1,1] for n cubic control points (n >= 4).
std::vector<double> open_uniform_knots(int num_control);

/// Nonzero cubic B-spline basis values at parameter t in [0,1]; returns the first basis index.
/// Uses the triangular Cox-de Boor scheme; at t == 1 the last span is used.
int bspline_basis(const std::vector<double>& knots, int num_control, double t, std::array<double, 4>& values);

/// One-dimensional weight matrix (image_dim x grid_dim) of a kernel along one axis.
Eigen::MatrixXd axis_weights(const ControlGrid& grid, int axis, const InterpKernel& kernel);
/// Same weights evaluated at arbitrary voxel coordinates (positions.size() x grid_dim).
Eigen::MatrixXd axis_weights_at(const ControlGrid& grid, int axis, const InterpKernel& kernel,
                                const Eigen::VectorXd& positions);

/// Separable linear map from control-grid values to voxel values.
///
/// Upsampling is the tensor product of three per-axis weight matrices, so a
/// C x G block of control values maps to a C x N block of voxel values. The
/// adjoint (transpose) pulls voxel-resolution gradients back to the grid.
class Upsampler {
public:
    Upsampler(const ControlGrid& grid, const InterpKernel& kernel);

    const ControlGrid& grid() const { return grid_; }
    const InterpKernel& kernel() const { return kernel_; }
    const Eigen::MatrixXd& weights(int axis) const { return weights_[static_cast<std::size_t>(axis)]; }

    template <typename Derived>
    Eigen::Matrix<typename Derived::Scalar, Derived::RowsAtCompileTime, Eigen::Dynamic>
    apply(const Eigen::MatrixBase<Derived>& grid_values) const {
        return contract(grid_values, grid_.grid_dims, weights_[0], weights_[1], weights_[2]);
    }

    template <typename Derived>
    Eigen::Matrix<typename Derived::Scalar, Derived::RowsAtCompileTime, Eigen::Dynamic>
    adjoint(const Eigen::MatrixBase<Derived>& voxel_values) const {
        return contract(voxel_values, grid_.image_dims, weights_t_[0], weights_t_[1], weights_t_[2]);
    }

    /// Applies per-axis matrices (out_n x in_n) to a C x (in_x*in_y*in_z) block.
    template <typename Derived>
    static Eigen::Matrix<typename Derived::Scalar, Derived::RowsAtCompileTime, Eigen::Dynamic>
    contract(const Eigen::MatrixBase<Derived>& src, const Dims3& in_dims, const Eigen::MatrixXd& mx,
             const Eigen::MatrixXd& my, const Eigen::MatrixXd& mz);

private:
    ControlGrid grid_;
    InterpKernel kernel_;
    std::array<Eigen::MatrixXd, 3> weights_;
    std::array<Eigen::MatrixXd, 3> weights_t_;
};

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Derived::RowsAtCompileTime, Eigen::Dynamic>
Upsampler::contract(const Eigen::MatrixBase<Derived>& src, const Dims3& in_dims, const Eigen::MatrixXd& mx,
                    const Eigen::MatrixXd& my, const Eigen::MatrixXd& mz) {
    using Scalar = typename Derived::Scalar;
    using Mat = MatrixX<Scalar>;
    const Eigen::Index nx = in_dims(0), ny = in_dims(1), nz = in_dims(2);
    const Eigen::Index ox = mx.rows(), oy = my.rows(), oz = mz.rows();
    eigen_assert(src.cols() == nx * ny * nz);
    const Mat wx = mx.template cast<Scalar>();
    const Mat wyt = my.transpose().template cast<Scalar>();
    const Mat wzt = mz.transpose().template cast<Scalar>();

    Eigen::Matrix<Scalar, Derived::RowsAtCompileTime, Eigen::Dynamic> out(src.rows(), ox * oy * oz);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row;
    Mat t2(ox, oy * nz);
    for (Eigen::Index c = 0; c < src.rows(); ++c) {
        row = src.row(c).transpose();
        const Eigen::Map<const Mat> a(row.data(), nx, ny * nz);
        const Mat t1 = wx * a; // ox x (ny*nz)
        for (Eigen::Index k = 0; k < nz; ++k) {
            t2.middleCols(k * oy, oy).noalias() = t1.middleCols(k * ny, ny) * wyt;
        }
        const Eigen::Map<const Mat> b(t2.data(), ox * oy, nz);
        const Mat t3 = b * wzt; // (ox*oy) x oz, x-fastest
        out.row(c) = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(t3.data(), t3.size());
    }
    return out;
}

/// Dense field from a gridded field's means, using any kernel.
template <typename Scalar>
DenseField<Scalar> upsample(const GriddedField<Scalar>& f, const Dims3& dims, const InterpKernel& kernel);

template <typename Scalar>
DenseField<Scalar> upsample_trilinear(const GriddedField<Scalar>& f, const Dims3& dims) {
    return upsample(f, dims, InterpKernel::trilinear());
}

/// Throws unless every grid dim is >= 4.
template <typename Scalar>
DenseField<Scalar> upsample_bspline(const GriddedField<Scalar>& f, const Dims3& dims,
                                    const InterpKernel& kernel = InterpKernel::bspline());

template <typename Scalar>
DenseField<Scalar> upsample_gaussian(const GriddedField<Scalar>& f, const Dims3& dims,
                                     const InterpKernel& kernel = InterpKernel::gaussian());

/// Displacement of a gridded field's means at an arbitrary continuous voxel position.
Eigen::Vector3d evaluate_at(const GriddedField<double>& f, const InterpKernel& kernel, const Eigen::Vector3d& p);

/// Resamples a field onto another grid over the same image by evaluating its dense field at the new nodes.
GriddedField<double> prolong(const GriddedField<double>& f, const Dims3& new_grid_dims, const InterpKernel& kernel);

// Serialisation: JSON header {grid_dims, image_dims, bayesian} + f32 payload of mu then eta,
// each component-major (all x components, then y, then z).

struct FieldBytes {
    std::string header;
    std::vector<char> payload;
};

FieldBytes field_to_bytes(const GriddedField<float>& f);
GriddedField<float> bytes_to_field(const FieldBytes& bytes);

void save_field(const GriddedField<float>& f, const std::filesystem::path& path);
GriddedField<float> load_field(const std::filesystem::path& path);

/// Dense fields share the volume file layout with a 3-component payload.
void save_dense_field(const DenseField<float>& f, const Eigen::Vector3d& spacing, const std::filesystem::path& path);
DenseField<float> load_dense_field(const std::filesystem::path& path);

/// True if the header at `path` describes a gridded (not dense) field.
bool is_gridded_field_file(const std::filesystem::path& path);

} // namespace gridreg
