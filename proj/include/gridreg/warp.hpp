#pragma once

#include "gridreg/gridfield.hpp"
#include "gridreg/volume.hpp"

#include <Eigen/Core>

#include <string>

namespace gridreg {

/// How samples outside [0, dim-1] are resolved.
///   clamp: coordinates are clamped to the volume (edge replication).
///   zero:  corners outside the volume contribute 0 (zero padding).
enum class BoundaryPolicy { clamp, zero };

std::string to_string(BoundaryPolicy policy);
BoundaryPolicy parse_boundary(const std::string& name);

/// Trilinear sample of x-fastest `data` at continuous voxel position `p`.
/// When `gradient` is non-null it receives the derivative of the sample with
/// respect to p (zero along clamped axes).
template <typename Scalar>
Scalar sample_trilinear(const Eigen::ArrayXf& data, const Dims3& dims, const Eigen::Matrix<Scalar, 3, 1>& p,
                        BoundaryPolicy policy, Eigen::Matrix<Scalar, 3, 1>* gradient = nullptr);

/// Pull-back warp values output(x) = image(x + u(x)) with optional per-voxel
/// derivatives d output(x) / d u(x).
template <typename Scalar>
struct WarpedValues {
    Eigen::Array<Scalar, Eigen::Dynamic, 1> values;
    Field3<Scalar> gradient; // empty unless requested
};

template <typename Scalar>
WarpedValues<Scalar> warp_values(const Eigen::ArrayXf& image, const Dims3& dims, const DenseField<Scalar>& field,
                                 BoundaryPolicy policy, bool with_gradient = false);

template <typename Scalar>
Volume warp_volume(const Volume& moving, const DenseField<Scalar>& field, BoundaryPolicy policy = BoundaryPolicy::clamp);

/// Soft warp of a mask; values stay in [0,1] and are not re-binarised.
template <typename Scalar>
MaskVolume warp_mask(const MaskVolume& mask, const DenseField<Scalar>& field,
                     BoundaryPolicy policy = BoundaryPolicy::clamp);

} // namespace gridreg
