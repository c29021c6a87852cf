#pragma once

#include "gridreg/gridfield.hpp"
#include "gridreg/volume.hpp"
#include "gridreg/warp.hpp"

#include <Eigen/Core>

#include <optional>
#include <span>
#include <vector>

namespace gridreg {

/// Reference bending-energy weight from the clinical sweep. It applies to
/// normalised-coordinate displacements and is far too strong for voxel units;
/// kept for documentation and CLI presets.
inline constexpr double kReferenceBendingWeight = 2e5;

struct LossWeights {
    double lambda0 = 1.0;   // uncertainty penalty on log sigma^2
    double lambda1 = 1.0;   // similarity / uncertainty term
    double lambda2 = 1.0;   // Dice term (forced to 0 without masks)
    double lambda3 = 0.01;  // bending energy
    double epsilon = 1e-5;  // Dice smoothing
    int mc_samples = 4;     // Monte-Carlo samples S

    void validate() const;
};

/// Mean squared intensity difference over the voxel domain.
double mse_sim(const Volume& warped, const Volume& fixed);

/// Uncertainty-weighted similarity, summed over voxels (not normalised):
///   (1/S) sum_s sum_x l_s(x) / (2 sigma2(x)) + lambda0 sum_x log sigma2(x)
/// with l_s the squared intensity difference of sample s.
double uncertainty_loss(std::span<const Volume> warped_samples, const Volume& fixed,
                        const Eigen::ArrayXd& sigma2_dense, const LossWeights& weights);

/// Reparameterised draw mu + sqrt(sigma2) * noise; the result carries no eta.
template <typename Scalar>
GriddedField<Scalar> mc_sample_field(const GriddedField<Scalar>& f, const Field3<Scalar>& noise);

/// Dense per-voxel variance: the mean of the three component variances at each
/// control point, lifted with the field's kernel and floored at kVarianceFloor.
Eigen::ArrayXd dense_variance(const GriddedField<double>& f, const Upsampler& up);

/// Soft Dice loss 1 - 2 sum(f w) / (sum f + sum w + eps).
double dice_loss(const MaskVolume& warped, const MaskVolume& fixed, double epsilon);

/// Mean over interior voxels of sum_c [ sum_r (d2 u_c/dr2)^2 + 2 sum_{r<s} (d2 u_c/dr ds)^2 ],
/// with central second differences. Needs every dim >= 3.
template <typename Scalar>
double bending_energy(const DenseField<Scalar>& field);

/// Gradient of bending_energy with respect to every voxel displacement.
Field3<double> bending_energy_gradient(const DenseField<double>& field);

/// A fixed/moving pair with optional masks. References must outlive the pair.
struct RegistrationPair {
    const Volume& fixed;
    const Volume& moving;
    const MaskVolume* fixed_mask = nullptr;
    const MaskVolume* moving_mask = nullptr;
    BoundaryPolicy boundary = BoundaryPolicy::clamp;

    bool has_masks() const { return fixed_mask != nullptr && moving_mask != nullptr; }
    void validate() const;
};

struct LossBreakdown {
    double total = 0.0;
    double similarity = 0.0; // normalised uncertainty term, or plain MSE for non-Bayesian fields
    double dice = 0.0;
    double bending = 0.0;
};

struct LossGradient {
    LossBreakdown loss;
    Field3<double> d_mu;
    std::optional<Field3<double>> d_eta;
};

/// Weighted objective lambda1*similarity + lambda2*dice + lambda3*bending.
///
/// For Bayesian fields `noise` holds the S standard-normal draws (3 x G each);
/// the similarity term is the uncertainty loss divided by the voxel count and
/// Dice/bending use the mean field. Non-Bayesian fields use plain MSE.
LossBreakdown total_loss(const RegistrationPair& pair, const GriddedField<double>& field, const InterpKernel& kernel,
                         const LossWeights& weights, std::span<const Field3<double>> noise = {});

/// total_loss together with its exact gradient w.r.t. mu (and eta in Bayesian mode).
LossGradient grad_total_wrt_grid(const RegistrationPair& pair, const GriddedField<double>& field,
                                 const InterpKernel& kernel, const LossWeights& weights,
                                 std::span<const Field3<double>> noise = {});

/// Same as grad_total_wrt_grid with a prebuilt upsampler (reused across iterations).
LossGradient evaluate_loss(const RegistrationPair& pair, const GriddedField<double>& field, const Upsampler& up,
                           const LossWeights& weights, std::span<const Field3<double>> noise, bool with_gradient);

/// S standard-normal 3 x G draws keyed by (seed, counter).
std::vector<Field3<double>> draw_noise(Eigen::Index grid_size, int samples, std::uint64_t seed, std::uint64_t counter);

} // namespace gridreg
