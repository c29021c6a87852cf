#pragma once

#include "gridreg/gridfield.hpp"
#include "gridreg/volume.hpp"

#include <Eigen/Core>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gridreg {

struct JacobianReport {
    double mean_log_det = 0.0;   // over interior voxels with det > 0
    double std_log_det = 0.0;
    double folding_rate = 0.0;   // percent of interior voxels with det < 0
    long long excluded = 0;      // interior voxels with det <= 0
    long long evaluated = 0;     // interior voxels inspected
};

struct MetricReport {
    std::optional<double> dice;
    std::optional<double> landmark_distance_mm;
    std::optional<double> mask_centroid_distance_mm;
    JacobianReport jacobian;
    std::optional<double> p_value;
    std::optional<double> q_value;
};

/// Dice of the masks binarised at 0.5; 1 when both are empty.
double dice_score(const MaskVolume& a, const MaskVolume& b);

/// Intensity-weighted centroid in voxel coordinates. Throws for an empty mask.
Eigen::Vector3d mask_centroid(const MaskVolume& m);

/// Distance in mm between the centroids of two masks.
double centroid_distance(const MaskVolume& a, const MaskVolume& b, const Eigen::Vector3d& spacing);
/// Mean Euclidean distance in mm between index-paired landmarks.
double centroid_distance(const LandmarkSet& a, const LandmarkSet& b, const Eigen::Vector3d& spacing);

/// Maps fixed-space points p to p + u(p), sampling u trilinearly.
template <typename Scalar>
LandmarkSet landmark_transfer(const LandmarkSet& points, const DenseField<Scalar>& field);

/// Statistics of det(I + grad u) with central differences on interior voxels.
template <typename Scalar>
JacobianReport jacobian_stats(const DenseField<Scalar>& field);

/// Per-voxel Jacobian determinants (interior only, boundary voxels hold NaN).
Eigen::ArrayXd jacobian_determinants(const DenseField<double>& field);

// --- statistics ---

/// Regularised incomplete beta function I_x(a, b).
double incomplete_beta(double a, double b, double x);

/// Upper tail P(T > t) of Student's t with `dof` degrees of freedom.
double student_t_sf(double t, double dof);

/// One paired comparison between method A and method B over the same cases.
struct PairedSamples {
    std::string family;
    std::string name;
    std::vector<double> a;
    std::vector<double> b;
};

struct PairedTestResult {
    std::string family;
    std::string name;
    std::size_t n = 0;
    double mean_difference = 0.0; // mean of a - b
    double t_statistic = 0.0;     // +/-inf under zero variance
    double p_value = 1.0;         // one-sided, H1: mean(a - b) > 0
    double q_value = 1.0;         // BH-FDR within the family
};

/// One-sided paired t-test of H1: mean(a - b) > 0.
/// Zero variance of the differences gives p = 0 when the mean difference is
/// positive and p = 1 otherwise.
PairedTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

/// Benjamini-Hochberg step-up q-values, in input order.
std::vector<double> benjamini_hochberg(std::span<const double> p_values);

/// Paired tests for every comparison, with BH correction inside each family.
std::vector<PairedTestResult> paired_tests(std::span<const PairedSamples> comparisons);

} // namespace gridreg
