#pragma once

#include "gridreg/adam.hpp"
#include "gridreg/gridfield.hpp"
#include "gridreg/losses.hpp"
#include "gridreg/metrics.hpp"
#include "gridreg/synth.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace gridreg {

/// Learning rate used for pairwise registration, in voxels per Adam step.
inline constexpr double kPairwiseLearningRate = 0.5;
/// Learning rate used for network weights.
inline constexpr double kNetworkLearningRate = 1e-4;

struct RegistrationConfig {
    Dims3 grid_dims{5, 5, 5};
    InterpKernel kernel = InterpKernel::trilinear();
    bool bayesian = false;
    LossWeights weights;
    AdamConfig adam{kPairwiseLearningRate};
    /// Step learning rate is lr / (1 + iter / lr_decay); 0 keeps it constant.
    double lr_decay = 50.0;
    int max_iters = 300;
    /// Stop once the loss changed by less than tol (relative) over the last 10 iterations.
    double tol = 1e-5;
    /// Optional two-stage schedule: the first half of the iterations on a 5^3 grid.
    bool coarse_to_fine = false;
    std::uint64_t seed = 0;

    void validate() const;
};

struct RegistrationResult {
    GriddedField<double> field;       // best iterate
    std::vector<LossBreakdown> trace; // one entry per iteration, evaluated before the step
    int iterations = 0;
    DenseField<double> dense;
    MetricReport metrics;
};

/// Per-iteration callback (iteration, loss) for log lines.
using IterationLog = std::function<void(int, const LossBreakdown&)>;

/// Adam descent over the control-point parameters starting from the identity.
/// Returns the iterate with the lowest recorded loss.
RegistrationResult register_pair(const RegistrationPair& pair, const RegistrationConfig& cfg,
                                 const IterationLog& log = {});

struct DofSweepRow {
    Dims3 grid;
    double dice = 0.0;           // mean warped-mask Dice
    double endpoint_error = 0.0; // mean dense endpoint error vs ground truth, voxels
    double folding = 0.0;        // mean folding rate, percent
    double bending = 0.0;        // mean bending energy of the recovered field
};

/// Registers every pair at every grid and averages the accuracy per grid.
/// With use_masks the (possibly noisy) masks enter the loss through the Dice term.
std::vector<DofSweepRow> dof_sweep(std::span<const SynthPair> pairs, std::span<const Dims3> grids,
                                   const RegistrationConfig& base, bool use_masks = true);

} // namespace gridreg
