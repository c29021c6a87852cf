#pragma once

#include "gridreg/gridfield.hpp"
#include "gridreg/volume.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <vector>

namespace gridreg {

/// Analytic phantom: a soft ellipsoidal organ over a band-limited cosine texture.
struct PhantomModel {
    Dims3 dims;
    Eigen::Vector3d center;
    Eigen::Vector3d radii;
    /// Eight cosine components: wave vector (cycles per volume), phase and amplitude.
    std::array<Eigen::Vector3d, 8> waves;
    std::array<double, 8> phases{};
    std::array<double, 8> amplitudes{};

    /// Band-limited texture in [-1, 1].
    double texture(const Eigen::Vector3d& p) const;
    /// Normalised ellipsoid radius; <= 1 inside the organ.
    double radius(const Eigen::Vector3d& p) const;
    bool inside(const Eigen::Vector3d& p) const { return radius(p) <= 1.0; }
    /// Image intensity in [0, 1] at a continuous voxel position.
    double intensity(const Eigen::Vector3d& p) const;
};

struct Phantom {
    PhantomModel model;
    Volume image;
    MaskVolume mask;
    LandmarkSet landmarks;
};

/// Seeded phantom with 8 landmarks at texture extrema inside the organ. Needs dims >= 16.
Phantom make_phantom(const Dims3& dims, std::uint64_t seed);

/// Smooth random ground-truth field on `grid`: i.i.d. uniform control displacements in
/// [-max_disp, max_disp], one neighbour-averaging pass, then rescaled so the peak component is
/// max_disp again. Throws when max_disp exceeds
/// a third of the control spacing or the trilinear dense field folds.
GriddedField<double> make_gt_field(const ControlGrid& grid, double max_disp, std::uint64_t seed);

/// A registration problem with known answer: fixed(x) = phantom(x + gt(x)) and
/// moving = phantom, so the pull-back field `gt` maps fixed onto moving exactly.
struct SynthPair {
    Volume fixed;
    Volume moving;
    MaskVolume fixed_mask;
    MaskVolume moving_mask;
    LandmarkSet fixed_landmarks;
    LandmarkSet moving_landmarks;
    GriddedField<double> gt;
    DenseField<double> gt_dense;
    std::uint64_t seed = 0;
    double intensity_noise = 0.0;
    double label_noise = 0.0;
};

/// Builds a pair from a phantom and a trilinear ground-truth field.
/// Gaussian noise of std `intensity_noise` is added to both images and
/// `label_noise` (in [0,1]) of each mask's boundary voxels are flipped.
SynthPair make_pair(const Phantom& phantom, const GriddedField<double>& gt, double intensity_noise,
                    double label_noise, std::uint64_t seed);

struct SynthSuiteSpec {
    int count = 10;
    Dims3 dims{32, 32, 32};
    Dims3 gt_grid{5, 5, 5};
    double max_disp = 2.0;
    double intensity_noise = 0.0;
    double label_noise = 0.0;
    std::uint64_t seed = 0;
};

/// `count` independent pairs; pair i uses phantom/field/noise seeds derived from (seed, i).
std::vector<SynthPair> make_suite(const SynthSuiteSpec& spec);

/// Mean endpoint error in voxels between two dense fields.
double endpoint_error(const DenseField<double>& a, const DenseField<double>& b);

} // namespace gridreg
