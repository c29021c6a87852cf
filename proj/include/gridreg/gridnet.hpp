#pragma once

#include "gridreg/adam.hpp"
#include "gridreg/autodiff.hpp"
#include "gridreg/gridfield.hpp"
#include "gridreg/losses.hpp"
#include "gridreg/synth.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace gridreg {

/// Grid sizes sampled during grid-adaptive training.
std::vector<Dims3> default_grid_set();

struct GridNetConfig {
    Dims3 input_dims{32, 32, 32};
    int levels = 3;           // encoder layers L
    int base_channels = 8;    // C; layer l has C * 2^(l-1) channels
    int heads = 4;            // H
    int head_dim = 16;        // d
    int pe_frequencies = 8;   // sin/cos pairs per axis; C_pe = 6 * pe_frequencies
    int decoder_channels = 64; // C_d at every decoder layer
    /// Initial weight tying query and token position encodings in W_Q/W_K; 0 disables.
    double locality_gain = 3.0;

    int pe_channels() const { return 6 * pe_frequencies; }
    /// Query width: coordinate encoding plus grid-size encoding.
    int query_channels() const { return 2 * pe_channels(); }
    int token_channels() const { return 8 * base_channels; }
    /// Key/value input width: projected tokens, decoder state and token position encoding.
    int key_channels() const { return token_channels() + decoder_channels + pe_channels(); }
    /// Tokens per scale: the coarsest feature map's voxel count.
    Eigen::Index token_count() const;

    void validate() const;
};

/// Sinusoidal encodings of normalised control coordinates, cached per grid size.
class PositionalEncodingCache {
public:
    explicit PositionalEncodingCache(int frequencies) : frequencies_(frequencies) {}

    /// G x (6F) coordinate encoding psi(R); computed once per grid.
    const ad::Tensor<double>& coordinates(const Dims3& grid);
    /// 6F grid-size encoding phi(g / 16).
    ad::Tensor<double> grid_size(const Dims3& grid) const;
    /// G x (12F) queries psi(R) concatenated with phi(g) on every row.
    ad::Tensor<double> queries(const Dims3& grid);

    /// Number of coordinate encodings computed (cache misses).
    int computations() const { return computations_; }

private:
    int frequencies_;
    int computations_ = 0;
    std::map<std::array<int, 3>, ad::Tensor<double>> cache_;
};

/// Sinusoidal features sin(2^k pi v), cos(2^k pi v), k < frequencies, for each entry of v.
Eigen::RowVectorXd sinusoidal_encoding(const Eigen::Vector3d& v, int frequencies);

/// Multi-head scaled dot-product attention of G queries over N tokens.
/// wq: Cq x Hd, wk/wv: Ct x Hd, wo: Hd x Cout. Attention matrices (G x N per head)
/// are appended to `attention` when it is non-null.
template <typename Scalar>
ad::Var<Scalar> cross_attention(ad::Var<Scalar> queries, ad::Var<Scalar> tokens, ad::Var<Scalar> wq,
                                ad::Var<Scalar> wk, ad::Var<Scalar> wv, ad::Var<Scalar> wo, int heads, int head_dim,
                                std::vector<ad::Var<Scalar>>* attention = nullptr);

/// Encoder, per-scale token projectors, cross-attention grid decoder and a
/// zero-initialised head producing (mu, eta) per control point.
class GridNet {
public:
    GridNet(const GridNetConfig& cfg, std::uint64_t seed);

    const GridNetConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    std::vector<ad::Parameter<float>>& parameters() { return params_; }
    const std::vector<ad::Parameter<float>>& parameters() const { return params_; }
    std::size_t parameter_count() const;
    PositionalEncodingCache& pe_cache() const { return pe_cache_; }

    /// Builds the forward graph from parameter leaves (in parameters() order).
    /// Returns the G x 6 head output: columns 0-2 are mu, 3-5 eta.
    template <typename Scalar>
    ad::Var<Scalar> forward_graph(ad::Tape<Scalar>& tape, const std::vector<ad::Var<Scalar>>& params,
                                  const Volume& fixed, const Volume& moving, const Dims3& grid_dims,
                                  std::vector<ad::Var<Scalar>>* attention = nullptr) const;

    /// Inference in 32-bit: Bayesian field on the requested grid.
    GriddedField<float> forward(const Volume& fixed, const Volume& moving, const Dims3& grid_dims) const;

    /// N_p x C_pe encoding of the token centres, in the same normalised frame as the queries.
    ad::Tensor<double> token_encoding() const;

    /// Raw parameter bytes in manifest order (for identity checks).
    std::vector<char> parameter_bytes() const;

private:
    void seed_locality();

    GridNetConfig cfg_;
    std::uint64_t seed_;
    std::vector<ad::Parameter<float>> params_;
    mutable PositionalEncodingCache pe_cache_;
};

/// Splits a G x 6 head output into a Bayesian gridded field.
template <typename Scalar>
GriddedField<Scalar> head_to_field(const ad::Tensor<Scalar>& out, const ControlGrid& grid);

/// Tape node whose value is the registration loss of the head output and whose
/// adjoint comes from the analytic loss gradient. Non-Bayesian mode ignores eta.
template <typename Scalar>
ad::Var<Scalar> registration_loss(ad::Var<Scalar> head, const RegistrationPair& pair, const Upsampler& up,
                                  const LossWeights& weights, bool bayesian, std::span<const Field3<double>> noise);

struct TrainConfig {
    AdamConfig adam{1e-4};
    int batch_size = 4;
    int epochs = 40;
    /// Hard cap on optimiser steps; 0 means epochs * ceil(pairs / batch).
    int max_steps = 0;
    std::vector<Dims3> grids = default_grid_set();
    LossWeights weights;
    bool bayesian = true;
    bool use_masks = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainHistory {
    std::vector<double> step_loss;   // mean batch loss per step
    std::vector<Dims3> step_grid;    // grid drawn at each step
    std::vector<double> val_loss;    // [0] before training, then after every epoch
    int steps = 0;
};

using TrainLog = std::function<void(int epoch, int step, double train_loss, double val_loss)>;

/// Mean deterministic (mu-only) total loss over pairs and grids.
double validation_loss(const GridNet& net, std::span<const SynthPair> pairs, std::span<const Dims3> grids,
                       const LossWeights& weights, bool use_masks = true);

/// Grid-adaptive training: each step draws one grid uniformly from cfg.grids.
TrainHistory train(GridNet& net, std::span<const SynthPair> train_pairs, std::span<const SynthPair> val_pairs,
                   const TrainConfig& cfg, const TrainLog& log = {});

struct GridScore {
    Dims3 grid;
    double dice = 0.0;
    double endpoint_error = 0.0;
    double loss = 0.0;
};

struct GridSelection {
    Dims3 chosen;
    std::vector<GridScore> table;
};

/// Anything that maps (pair, grid) to a field over that grid.
using FieldPredictor = std::function<GriddedField<double>(const SynthPair&, const Dims3&)>;

/// Argmax of mean validation Dice over `grids`; ties go to the coarser grid.
GridSelection select_grid(const FieldPredictor& predict, std::span<const SynthPair> val_pairs,
                          std::span<const Dims3> grids, const LossWeights& weights = {});
GridSelection select_grid(const GridNet& net, std::span<const SynthPair> val_pairs, std::span<const Dims3> grids,
                          const LossWeights& weights = {});

/// Checkpoint: JSON manifest (config, seed, parameter shapes) + raw f32 payload.
void save_checkpoint(const GridNet& net, const std::filesystem::path& path);
GridNet load_checkpoint(const std::filesystem::path& path);

} // namespace gridreg
