#include "gridreg/optimize.hpp"

#include "gridreg/warp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace gridreg {

void RegistrationConfig::validate() const {
    if ((grid_dims < 2).any()) {
        throw std::invalid_argument("grid_dim must be ≥ 2, got " + to_string(grid_dims));
    }
    kernel.validate();
    weights.validate();
    adam.validate();
    if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");
    if (!(tol >= 0.0)) throw std::invalid_argument("tol must be >= 0");
    if (!(lr_decay >= 0.0)) throw std::invalid_argument("lr_decay must be >= 0");
}

namespace {

struct StageOutcome {
    GriddedField<double> best;
    double best_loss;
    int iterations;
};

StageOutcome run_stage(const RegistrationPair& pair, GriddedField<double> field, const RegistrationConfig& cfg,
                       int max_iters, int iter_offset, std::vector<LossBreakdown>& trace, const IterationLog& log) {
    const Upsampler up(field.grid, cfg.kernel);
    AdamState<double> mu_state(field.mu.size());
    AdamState<double> eta_state(field.bayesian() ? field.eta->size() : 0);
    StageOutcome out{field, std::numeric_limits<double>::infinity(), 0};
    std::vector<double> history;
    for (int it = 0; it < max_iters; ++it) {
        const int global = iter_offset + it;
        std::vector<Field3<double>> noise;
        if (field.bayesian()) {
            noise = draw_noise(field.grid.size(), cfg.weights.mc_samples, cfg.seed, std::uint64_t(global));
        }
        LossGradient g = evaluate_loss(pair, field, up, cfg.weights, noise, true);
        trace.push_back(g.loss);
        history.push_back(g.loss.total);
        ++out.iterations;
        if (log) {
            log(global, g.loss);
        }
        if (g.loss.total < out.best_loss) {
            out.best_loss = g.loss.total;
            out.best = field;
        }
        if (history.size() > 10) {
            const double before = history[history.size() - 11];
            // raw loss, not the running best: after an overshoot the loss is still falling
            const double change = std::abs(before - history.back()) / std::max(std::abs(before), 1e-300);
            if (change < cfg.tol) {
                break;
            }
        }
        AdamConfig step_cfg = cfg.adam;
        if (cfg.lr_decay > 0.0) {
            step_cfg.lr = cfg.adam.lr / (1.0 + double(global) / cfg.lr_decay);
        }
        mu_state.update(field.mu, g.d_mu, step_cfg, it + 1);
        if (field.bayesian()) {
            eta_state.update(*field.eta, *g.d_eta, step_cfg, it + 1);
        }
    }
    return out;
}

} // namespace

RegistrationResult register_pair(const RegistrationPair& pair, const RegistrationConfig& cfg, const IterationLog& log) {
    cfg.validate();
    pair.validate();
    const Dims3 dims = pair.fixed.dims();
    const ControlGrid grid = make_control_grid(dims, cfg.grid_dims);

    RegistrationResult result;
    if (cfg.coarse_to_fine && (cfg.grid_dims > 5).any()) {
        const Dims3 coarse = cfg.grid_dims.min(5);
        const int first = std::max(1, cfg.max_iters / 2);
        auto stage1 = run_stage(pair, GriddedField<double>::zeros(make_control_grid(dims, coarse), cfg.bayesian), cfg,
                                first, 0, result.trace, log);
        GriddedField<double> start = prolong(stage1.best, cfg.grid_dims, cfg.kernel);
        if (cfg.bayesian) {
            start.eta = Field3<double>::Zero(3, grid.size());
        }
        auto stage2 = run_stage(pair, start, cfg, std::max(1, cfg.max_iters - stage1.iterations), stage1.iterations,
                                result.trace, log);
        result.field = stage2.best;
        result.iterations = stage1.iterations + stage2.iterations;
    } else {
        auto stage = run_stage(pair, GriddedField<double>::zeros(grid, cfg.bayesian), cfg, cfg.max_iters, 0,
                               result.trace, log);
        result.field = stage.best;
        result.iterations = stage.iterations;
    }
    result.field.validate();
    result.dense = upsample(result.field, dims, cfg.kernel);
    if (pair.has_masks()) {
        result.metrics.dice = dice_score(*pair.fixed_mask, warp_mask(*pair.moving_mask, result.dense, pair.boundary));
        result.metrics.mask_centroid_distance_mm =
            centroid_distance(*pair.fixed_mask, warp_mask(*pair.moving_mask, result.dense, pair.boundary),
                              pair.fixed.spacing());
    }
    if ((dims >= 3).all()) {
        result.metrics.jacobian = jacobian_stats(result.dense);
    }
    return result;
}

std::vector<DofSweepRow> dof_sweep(std::span<const SynthPair> pairs, std::span<const Dims3> grids,
                                   const RegistrationConfig& base, bool use_masks) {
    if (pairs.empty() || grids.empty()) {
        throw std::invalid_argument("dof_sweep needs at least one pair and one grid");
    }
    std::vector<DofSweepRow> rows;
    for (const auto& g : grids) {
        RegistrationConfig cfg = base;
        cfg.grid_dims = g;
        DofSweepRow row{g};
        for (const auto& p : pairs) {
            const RegistrationPair pair{p.fixed, p.moving, use_masks ? &p.fixed_mask : nullptr,
                                        use_masks ? &p.moving_mask : nullptr};
            const auto r = register_pair(pair, cfg);
            row.dice += dice_score(p.fixed_mask, warp_mask(p.moving_mask, r.dense));
            row.endpoint_error += endpoint_error(r.dense, p.gt_dense);
            row.folding += r.metrics.jacobian.folding_rate;
            row.bending += bending_energy(r.dense);
        }
        const double n = double(pairs.size());
        row.dice /= n;
        row.endpoint_error /= n;
        row.folding /= n;
        row.bending /= n;
        rows.push_back(row);
    }
    return rows;
}

} // namespace gridreg
