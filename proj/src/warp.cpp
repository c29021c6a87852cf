#include "gridreg/warp.hpp"

#include "gridreg/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gridreg {

std::string to_string(BoundaryPolicy policy) {
    return policy == BoundaryPolicy::clamp ? "clamp" : "zero";
}

BoundaryPolicy parse_boundary(const std::string& name) {
    if (name == "clamp") return BoundaryPolicy::clamp;
    if (name == "zero") return BoundaryPolicy::zero;
    throw std::invalid_argument("unknown boundary '" + name + "' (expected clamp|zero)");
}

namespace {

// Per-axis corner indices, weights and the derivative of the weights w.r.t. the coordinate.
template <typename Scalar>
struct AxisStencil {
    Eigen::Index i0, i1;
    Scalar w0, w1;
    Scalar dw; // d w1 / dp (= -d w0 / dp)
    bool valid0, valid1;
};

template <typename Scalar>
AxisStencil<Scalar> axis_stencil(Scalar p, int n, BoundaryPolicy policy) {
    AxisStencil<Scalar> s{};
    if (policy == BoundaryPolicy::clamp) {
        const Scalar hi = Scalar(n - 1);
        const bool clamped = p < Scalar(0) || p > hi;
        const Scalar q = std::clamp(p, Scalar(0), hi);
        if (n == 1) {
            s = {0, 0, Scalar(1), Scalar(0), Scalar(0), true, true};
            return s;
        }
        const auto lo = std::min<Eigen::Index>(static_cast<Eigen::Index>(std::floor(q)), n - 2);
        const Scalar f = q - Scalar(lo);
        s = {lo, lo + 1, Scalar(1) - f, f, clamped ? Scalar(0) : Scalar(1), true, true};
        return s;
    }
    const auto lo = static_cast<Eigen::Index>(std::floor(p));
    const Scalar f = p - Scalar(lo);
    s = {lo, lo + 1, Scalar(1) - f, f, Scalar(1), lo >= 0 && lo < n, lo + 1 >= 0 && lo + 1 < n};
    return s;
}

} // namespace

template <typename Scalar>
Scalar sample_trilinear(const Eigen::ArrayXf& data, const Dims3& dims, const Eigen::Matrix<Scalar, 3, 1>& p,
                        BoundaryPolicy policy, Eigen::Matrix<Scalar, 3, 1>* gradient) {
    const auto sx = axis_stencil(p(0), dims(0), policy);
    const auto sy = axis_stencil(p(1), dims(1), policy);
    const auto sz = axis_stencil(p(2), dims(2), policy);
    auto at = [&](bool vx, Eigen::Index x, bool vy, Eigen::Index y, bool vz, Eigen::Index z) -> Scalar {
        if (!(vx && vy && vz)) {
            return Scalar(0);
        }
        return static_cast<Scalar>(data(linear_index(dims, x, y, z)));
    };
    const Scalar c000 = at(sx.valid0, sx.i0, sy.valid0, sy.i0, sz.valid0, sz.i0);
    const Scalar c100 = at(sx.valid1, sx.i1, sy.valid0, sy.i0, sz.valid0, sz.i0);
    const Scalar c010 = at(sx.valid0, sx.i0, sy.valid1, sy.i1, sz.valid0, sz.i0);
    const Scalar c110 = at(sx.valid1, sx.i1, sy.valid1, sy.i1, sz.valid0, sz.i0);
    const Scalar c001 = at(sx.valid0, sx.i0, sy.valid0, sy.i0, sz.valid1, sz.i1);
    const Scalar c101 = at(sx.valid1, sx.i1, sy.valid0, sy.i0, sz.valid1, sz.i1);
    const Scalar c011 = at(sx.valid0, sx.i0, sy.valid1, sy.i1, sz.valid1, sz.i1);
    const Scalar c111 = at(sx.valid1, sx.i1, sy.valid1, sy.i1, sz.valid1, sz.i1);

    // interpolate along x, then y, then z
    const Scalar c00 = sx.w0 * c000 + sx.w1 * c100;
    const Scalar c10 = sx.w0 * c010 + sx.w1 * c110;
    const Scalar c01 = sx.w0 * c001 + sx.w1 * c101;
    const Scalar c11 = sx.w0 * c011 + sx.w1 * c111;
    const Scalar c0 = sy.w0 * c00 + sy.w1 * c10;
    const Scalar c1 = sy.w0 * c01 + sy.w1 * c11;
    const Scalar value = sz.w0 * c0 + sz.w1 * c1;

    if (gradient) {
        const Scalar dx00 = c100 - c000, dx10 = c110 - c010, dx01 = c101 - c001, dx11 = c111 - c011;
        const Scalar dx0 = sy.w0 * dx00 + sy.w1 * dx10;
        const Scalar dx1 = sy.w0 * dx01 + sy.w1 * dx11;
        (*gradient)(0) = sx.dw * (sz.w0 * dx0 + sz.w1 * dx1);
        (*gradient)(1) = sy.dw * (sz.w0 * (c10 - c00) + sz.w1 * (c11 - c01));
        (*gradient)(2) = sz.dw * (c1 - c0);
    }
    return value;
}

template float sample_trilinear(const Eigen::ArrayXf&, const Dims3&, const Eigen::Vector3f&, BoundaryPolicy,
                                Eigen::Vector3f*);
template double sample_trilinear(const Eigen::ArrayXf&, const Dims3&, const Eigen::Vector3d&, BoundaryPolicy,
                                 Eigen::Vector3d*);

template <typename Scalar>
WarpedValues<Scalar> warp_values(const Eigen::ArrayXf& image, const Dims3& dims, const DenseField<Scalar>& field,
                                 BoundaryPolicy policy, bool with_gradient) {
    if (!(field.dims == dims).all()) {
        throw std::invalid_argument("field dims " + to_string(field.dims) + " differ from volume dims " +
                                    to_string(dims));
    }
    WarpedValues<Scalar> out;
    out.values.resize(voxel_count(dims));
    if (with_gradient) {
        out.gradient.resize(3, voxel_count(dims));
    }
    parallel_for(0, dims(2), [&](std::int64_t k) {
        Eigen::Matrix<Scalar, 3, 1> g;
        for (Eigen::Index j = 0; j < dims(1); ++j) {
            for (Eigen::Index i = 0; i < dims(0); ++i) {
                const auto n = linear_index(dims, i, j, k);
                const Eigen::Matrix<Scalar, 3, 1> p =
                    Eigen::Matrix<Scalar, 3, 1>(Scalar(i), Scalar(j), Scalar(k)) + field.u.col(n);
                out.values(n) = sample_trilinear<Scalar>(image, dims, p, policy, with_gradient ? &g : nullptr);
                if (with_gradient) {
                    out.gradient.col(n) = g;
                }
            }
        }
    });
    return out;
}

template WarpedValues<float> warp_values(const Eigen::ArrayXf&, const Dims3&, const DenseField<float>&, BoundaryPolicy,
                                         bool);
template WarpedValues<double> warp_values(const Eigen::ArrayXf&, const Dims3&, const DenseField<double>&,
                                          BoundaryPolicy, bool);

template <typename Scalar>
Volume warp_volume(const Volume& moving, const DenseField<Scalar>& field, BoundaryPolicy policy) {
    auto w = warp_values(moving.data(), moving.dims(), field, policy, false);
    return Volume(moving.dims(), moving.spacing(), w.values.template cast<float>());
}

template <typename Scalar>
MaskVolume warp_mask(const MaskVolume& mask, const DenseField<Scalar>& field, BoundaryPolicy policy) {
    auto w = warp_values(mask.data(), mask.dims(), field, policy, false);
    Eigen::ArrayXf v = w.values.template cast<float>().cwiseMax(0.0f).cwiseMin(1.0f);
    return MaskVolume(mask.dims(), mask.spacing(), std::move(v));
}

template Volume warp_volume(const Volume&, const DenseField<float>&, BoundaryPolicy);
template Volume warp_volume(const Volume&, const DenseField<double>&, BoundaryPolicy);
template MaskVolume warp_mask(const MaskVolume&, const DenseField<float>&, BoundaryPolicy);
template MaskVolume warp_mask(const MaskVolume&, const DenseField<double>&, BoundaryPolicy);

} // namespace gridreg
