// gridreg command-line entry point.
#include "cli_support.hpp"

#include "gridreg/gridnet.hpp"
#include "gridreg/metrics.hpp"
#include "gridreg/optimize.hpp"
#include "gridreg/parallel.hpp"
#include "gridreg/synth.hpp"
#include "gridreg/warp.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace gridreg;
using namespace gridreg::cli;

namespace {

struct Outcome {
    ojson report;
    ojson inputs = ojson::object();
    ojson outputs = ojson::object();
    fs::path manifest; // default manifest location; empty means none unless --manifest
};

struct Command {
    CLI::App* app;
    std::function<Outcome()> run;
};

fs::path beside(const std::string& out) {
    return fs::path(out + ".manifest.json");
}

// --- shared flag groups ---

struct LossFlags {
    double lambda0 = 1.0, lambda1 = 1.0, lambda2 = 1.0, lambda3 = 0.01, epsilon = 1e-5;
    int mc_samples = 4;

    void add(CLI::App* sub) {
        sub->add_option("--lambda0", lambda0, "Weight of the log-variance penalty");
        sub->add_option("--lambda1", lambda1, "Similarity weight");
        sub->add_option("--lambda2", lambda2, "Dice weight (ignored without masks)");
        sub->add_option("--lambda3", lambda3, "Bending-energy weight");
        sub->add_option("--epsilon", epsilon, "Dice smoothing");
        sub->add_option("--mc-samples", mc_samples, "Monte-Carlo samples in Bayesian mode");
    }

    LossWeights weights() const {
        LossWeights w{lambda0, lambda1, lambda2, lambda3, epsilon, mc_samples};
        try {
            w.validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        return w;
    }
};

struct KernelFlags {
    std::string kind = "trilinear";
    double sigma = 0.5;

    void add(CLI::App* sub, const std::string& names = "--kernel,--upsample") {
        sub->add_option(names, kind, "Interpolation kernel")
            ->check(CLI::IsMember({"trilinear", "bspline", "gaussian"}));
        sub->add_option("--gaussian-sigma", sigma, "Gaussian kernel std in control-cell widths");
    }

    InterpKernel kernel() const {
        InterpKernel k{parse_kernel_kind(kind), sigma};
        try {
            k.validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        return k;
    }
};

struct SuiteFlags {
    std::string dims = "32";
    std::string gt_grid = "5";
    double max_disp = 2.0;

    void add(CLI::App* sub) {
        sub->add_option("--dims", dims, "Synthetic volume size n or a,b,c");
        sub->add_option("--gt-grid", gt_grid, "Ground-truth control grid");
        sub->add_option("--max-disp", max_disp, "Peak ground-truth displacement, voxels");
    }

    SynthSuiteSpec spec(int count, std::uint64_t seed) const {
        SynthSuiteSpec s;
        s.count = count;
        s.dims = parse_dims(dims, "--dims");
        s.gt_grid = parse_grid(gt_grid, "--gt-grid");
        s.max_disp = max_disp;
        s.seed = seed;
        if (count < 1) throw UsageError("pair count must be >= 1");
        if ((s.dims < 16).any()) throw UsageError("--dims must be >= 16 on every axis");
        return s;
    }
};

std::vector<SynthPair> make_suite_checked(const SynthSuiteSpec& spec) {
    try {
        return make_suite(spec);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

ojson dims_json(const Dims3& d) {
    return ojson::array({d(0), d(1), d(2)});
}

ojson opt_json(const std::optional<double>& v) {
    return v ? ojson(*v) : ojson(nullptr);
}

ojson jacobian_json(const JacobianReport& j) {
    return {{"mean_log_det", j.mean_log_det}, {"std_log_det", j.std_log_det}, {"folding_rate", j.folding_rate},
            {"excluded", j.excluded},         {"evaluated", j.evaluated}};
}

ojson metrics_json(const MetricReport& m) {
    ojson out;
    out["dice"] = opt_json(m.dice);
    out["landmark_distance_mm"] = opt_json(m.landmark_distance_mm);
    out["mask_centroid_distance_mm"] = opt_json(m.mask_centroid_distance_mm);
    out["jacobian"] = jacobian_json(m.jacobian);
    out["p_value"] = opt_json(m.p_value);
    out["q_value"] = opt_json(m.q_value);
    return out;
}

/// Dense field from either field file kind.
DenseField<double> load_any_field(const fs::path& path, const InterpKernel& kernel) {
    if (is_gridded_field_file(path)) {
        const auto f = load_field(path).cast<double>();
        return upsample(f, f.grid.image_dims, kernel);
    }
    return load_dense_field(path).cast<double>();
}

void check_same_dims(const Dims3& a, const Dims3& b, const std::string& what) {
    if (!(a == b).all()) {
        throw std::runtime_error(what + ": dims " + to_string(a) + " vs " + to_string(b));
    }
}

// --- subcommands ---

struct SynthCmd {
    std::string out_dir;
    int count = 1;
    double intensity_noise = 0.0, label_noise = 0.0;
    SuiteFlags suite;

    Command setup(CLI::App& app, const Common& common) {
        auto* sub = app.add_subcommand("synth", "Write seeded phantom pairs with ground-truth fields");
        sub->add_option("--out-dir", out_dir, "Output directory (one pair_NNN subdirectory per pair)");
        sub->add_option("--count", count, "Number of pairs");
        suite.add(sub);
        sub->add_option("--intensity-noise", intensity_noise, "Gaussian intensity noise std");
        sub->add_option("--label-noise", label_noise, "Fraction of boundary mask voxels flipped");
        return {sub, [this, sub, &common] {
                    require(sub, {"--out-dir"});
                    auto spec = suite.spec(count, common.seed);
                    spec.intensity_noise = intensity_noise;
                    spec.label_noise = label_noise;
                    const auto pairs = make_suite_checked(spec);
                    Outcome o;
                    o.report = ojson::array();
                    for (std::size_t i = 0; i < pairs.size(); ++i) {
                        char name[32];
                        std::snprintf(name, sizeof(name), "pair_%03zu", i);
                        const fs::path dir = fs::path(out_dir) / name;
                        save_synth_pair(pairs[i], dir);
                        const auto& gt = pairs[i].gt_dense.u;
                        o.report.push_back({{"pair", name},
                                            {"seed", pairs[i].seed},
                                            {"mean_gt_displacement", gt.colwise().norm().mean()},
                                            {"landmarks", pairs[i].fixed_landmarks.size()}});
                    }
                    o.outputs["out_dir"] = out_dir;
                    o.manifest = fs::path(out_dir) / "manifest.json";
                    return o;
                }};
    }
};

struct RegisterCmd {
    std::string fixed, moving, fixed_mask, moving_mask, grid = "5,5,5", boundary = "clamp";
    std::string out_field, out_warped, out_dense;
    bool bayesian = false, coarse_to_fine = false, verbose = false;
    int iters = 300;
    double lr = kPairwiseLearningRate, lr_decay = 50.0, tol = 1e-5;
    KernelFlags kernel;
    LossFlags loss;

    Command setup(CLI::App& app, const Common& common) {
        auto* sub = app.add_subcommand("register", "Pairwise registration by Adam on the control grid");
        sub->add_option("--fixed", fixed, "Fixed volume");
        sub->add_option("--moving", moving, "Moving volume");
        sub->add_option("--fixed-mask", fixed_mask, "Fixed mask (enables the Dice term)");
        sub->add_option("--moving-mask", moving_mask, "Moving mask");
        sub->add_option("--grid", grid, "Control grid g or gx,gy,gz");
        kernel.add(sub);
        add_switch(sub, "--bayesian", bayesian, "Optimise per-control-point variances too");
        sub->add_option("--iters", iters, "Maximum iterations");
        sub->add_option("--lr", lr, "Adam learning rate, voxels per step");
        sub->add_option("--lr-decay", lr_decay, "Learning rate lr / (1 + it / decay); 0 disables");
        sub->add_option("--tol", tol, "Relative loss drop over 10 iterations that stops the run");
        add_switch(sub, "--coarse-to-fine", coarse_to_fine, "Start on a 5^3 grid for half the iterations");
        sub->add_option("--boundary", boundary, "Warp boundary policy")->check(CLI::IsMember({"clamp", "zero"}));
        loss.add(sub);
        sub->add_option("--out-field", out_field, "Gridded field output");
        sub->add_option("--out-warped", out_warped, "Warped moving volume output");
        sub->add_option("--out-dense", out_dense, "Dense displacement field output");
        add_switch(sub, "--verbose", verbose, "Per-iteration log line on stderr");
        return {sub, [this, sub, &common] { return run(sub, common); }};
    }

    Outcome run(CLI::App* sub, const Common& common) {
        require(sub, {"--fixed", "--moving"});
        if (fixed_mask.empty() != moving_mask.empty()) {
            throw UsageError("--fixed-mask and --moving-mask go together");
        }
        RegistrationConfig cfg;
        cfg.grid_dims = parse_grid(grid);
        cfg.kernel = kernel.kernel();
        cfg.bayesian = bayesian;
        cfg.weights = loss.weights();
        cfg.adam.lr = lr;
        cfg.lr_decay = lr_decay;
        cfg.max_iters = iters;
        cfg.tol = tol;
        cfg.coarse_to_fine = coarse_to_fine;
        cfg.seed = common.seed;
        try {
            cfg.validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }

        const Volume f = load_volume(fixed);
        const Volume m = load_volume(moving);
        check_same_dims(f.dims(), m.dims(), "fixed/moving");
        std::optional<MaskVolume> fm, mm;
        if (!fixed_mask.empty()) {
            fm = load_mask(fixed_mask);
            mm = load_mask(moving_mask);
        }
        const RegistrationPair pair{f, m, fm ? &*fm : nullptr, mm ? &*mm : nullptr, parse_boundary(boundary)};
        IterationLog log;
        if (verbose) {
            log = [](int it, const LossBreakdown& l) {
                std::cerr << "iter " << it << " total " << l.total << " sim " << l.similarity << " dice " << l.dice
                          << " bend " << l.bending << "\n";
            };
        }
        const auto r = register_pair(pair, cfg, log);

        Outcome o;
        o.inputs = {{"fixed", fixed}, {"moving", moving}};
        if (fm) {
            o.inputs["fixed_mask"] = fixed_mask;
            o.inputs["moving_mask"] = moving_mask;
        }
        if (!out_field.empty()) {
            save_field(r.field.cast<float>(), out_field);
            o.outputs["field"] = out_field;
        }
        if (!out_warped.empty()) {
            save_volume(warp_volume(m, r.dense, pair.boundary), out_warped);
            o.outputs["warped"] = out_warped;
        }
        if (!out_dense.empty()) {
            save_dense_field(r.dense.cast<float>(), f.spacing(), out_dense);
            o.outputs["dense"] = out_dense;
        }
        double best = r.trace.front().total;
        for (const auto& t : r.trace) best = std::min(best, t.total);
        o.report = {{"grid", dims_json(cfg.grid_dims)},
                    {"kernel", to_string(cfg.kernel.kind)},
                    {"iterations", r.iterations},
                    {"initial_loss", r.trace.front().total},
                    {"final_loss", best},
                    {"metrics", metrics_json(r.metrics)}};
        for (const auto& p : {out_field, out_warped, out_dense}) {
            if (!p.empty()) {
                o.manifest = beside(p);
                break;
            }
        }
        return o;
    }
};

struct NetFlags {
    int levels = 3, base_channels = 8, heads = 4, head_dim = 16, pe_frequencies = 8, decoder_channels = 64;
    double locality_gain = 3.0;

    void add(CLI::App* sub) {
        sub->add_option("--levels", levels, "Encoder layers");
        sub->add_option("--base-channels", base_channels, "Channels of the first encoder layer");
        sub->add_option("--heads", heads, "Attention heads");
        sub->add_option("--head-dim", head_dim, "Per-head width");
        sub->add_option("--pe-frequencies", pe_frequencies, "Sinusoid frequencies per axis");
        sub->add_option("--decoder-channels", decoder_channels, "Decoder state width");
        sub->add_option("--locality-gain", locality_gain, "Initial query/key position coupling; 0 disables");
    }
};

/// Training/validation pairs from --data or generated from the seed.
struct PairSource {
    std::string data;
    int pairs = 20;
    SuiteFlags suite;

    void add(CLI::App* sub, int default_pairs) {
        pairs = default_pairs;
        sub->add_option("--data", data, "Directory of pair_NNN subdirectories written by synth");
        sub->add_option("--pairs", pairs, "Generated pairs when --data is absent");
        suite.add(sub);
    }

    std::vector<SynthPair> load(std::uint64_t seed, int extra = 0) const {
        if (!data.empty()) {
            std::vector<SynthPair> out;
            for (const auto& d : list_pair_dirs(data)) out.push_back(load_synth_pair(d));
            if (out.empty()) throw std::runtime_error("no pair_* directories in " + data);
            return out;
        }
        return make_suite_checked(suite.spec(pairs + extra, seed));
    }
};

struct TrainCmd {
    std::string out, grids = "5,8,10,15";
    int val_pairs = 5, epochs = 40, steps = 0, batch = 4;
    double lr = kNetworkLearningRate;
    bool bayesian = true, use_masks = true;
    NetFlags net;
    PairSource source;
    LossFlags loss;

    Command setup(CLI::App& app, const Common& common) {
        auto* sub = app.add_subcommand("train", "Grid-adaptive training of the grid decoder network");
        sub->add_option("--out", out, "Checkpoint output");
        source.add(sub, 20);
        sub->add_option("--val-pairs", val_pairs, "Validation pairs held out from the end of the set");
        sub->add_option("--grids", grids, "Grid sizes sampled per step");
        sub->add_option("--epochs", epochs, "Passes over the training pairs");
        sub->add_option("--steps", steps, "Hard cap on optimiser steps; 0 means no cap");
        sub->add_option("--batch", batch, "Pairs per step");
        sub->add_option("--lr", lr, "Adam learning rate");
        add_switch(sub, "--bayesian,!--no-bayesian", bayesian, "Train the variance head with the uncertainty loss");
        add_switch(sub, "--masks,!--no-masks", use_masks, "Use masks in the Dice term");
        net.add(sub);
        loss.add(sub);
        return {sub, [this, sub, &common] { return run(sub, common); }};
    }

    Outcome run(CLI::App* sub, const Common& common) {
        require(sub, {"--out"});
        TrainConfig tc;
        tc.adam.lr = lr;
        tc.batch_size = batch;
        tc.epochs = epochs;
        tc.max_steps = steps;
        tc.grids = parse_grid_list(grids, "--grids");
        tc.weights = loss.weights();
        tc.bayesian = bayesian;
        tc.use_masks = use_masks;
        tc.seed = common.seed;
        try {
            tc.validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        if (val_pairs < 1) throw UsageError("--val-pairs must be >= 1");
        auto all = source.load(common.seed, source.data.empty() ? val_pairs : 0);
        if (int(all.size()) <= val_pairs) {
            throw std::runtime_error("need more than --val-pairs pairs, got " + std::to_string(all.size()));
        }
        const std::span<const SynthPair> everything(all);
        const auto train_set = everything.first(all.size() - std::size_t(val_pairs));
        const auto val_set = everything.last(std::size_t(val_pairs));

        GridNetConfig nc;
        nc.input_dims = all.front().fixed.dims();
        nc.levels = net.levels;
        nc.base_channels = net.base_channels;
        nc.heads = net.heads;
        nc.head_dim = net.head_dim;
        nc.pe_frequencies = net.pe_frequencies;
        nc.decoder_channels = net.decoder_channels;
        nc.locality_gain = net.locality_gain;
        try {
            nc.validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        GridNet model(nc, common.seed);
        const auto history = train(model, train_set, val_set, tc, [](int epoch, int step, double tl, double vl) {
            std::cerr << "epoch " << epoch << " step " << step << " train " << tl << " val " << vl << "\n";
        });
        save_checkpoint(model, out);

        Outcome o;
        o.report = ojson::array();
        for (std::size_t e = 0; e < history.val_loss.size(); ++e) {
            o.report.push_back({{"epoch", e}, {"val_loss", history.val_loss[e]}});
        }
        if (!source.data.empty()) o.inputs["data"] = source.data;
        o.outputs["checkpoint"] = out;
        o.manifest = beside(out);
        return o;
    }
};

struct InferCmd {
    std::string checkpoint, fixed, moving, grid = "5,5,5", out_field, out_warped, boundary = "clamp";
    KernelFlags kernel;

    Command setup(CLI::App& app, const Common&) {
        auto* sub = app.add_subcommand("infer", "Predict a gridded field with a trained checkpoint");
        sub->add_option("--checkpoint", checkpoint, "Checkpoint written by train");
        sub->add_option("--fixed", fixed, "Fixed volume");
        sub->add_option("--moving", moving, "Moving volume");
        sub->add_option("--grid", grid, "Control grid g or gx,gy,gz");
        kernel.add(sub);
        sub->add_option("--boundary", boundary, "Warp boundary policy")->check(CLI::IsMember({"clamp", "zero"}));
        sub->add_option("--out-field", out_field, "Gridded field output (mu and eta)");
        sub->add_option("--out-warped", out_warped, "Warped moving volume output");
        return {sub, [this, sub] { return run(sub); }};
    }

    Outcome run(CLI::App* sub) {
        require(sub, {"--checkpoint", "--fixed", "--moving"});
        const Dims3 g = parse_grid(grid);
        const InterpKernel k = kernel.kernel();
        const GridNet model = load_checkpoint(checkpoint);
        const Volume f = load_volume(fixed);
        const Volume m = load_volume(moving);
        check_same_dims(f.dims(), model.config().input_dims, "fixed/checkpoint input");
        check_same_dims(m.dims(), f.dims(), "fixed/moving");
        const auto field = model.forward(f, m, g);
        const auto dense = upsample(field.cast<double>(), f.dims(), k);

        Outcome o;
        o.inputs = {{"checkpoint", checkpoint}, {"fixed", fixed}, {"moving", moving}};
        if (!out_field.empty()) {
            save_field(field, out_field);
            o.outputs["field"] = out_field;
            o.manifest = beside(out_field);
        }
        if (!out_warped.empty()) {
            save_volume(warp_volume(m, dense, parse_boundary(boundary)), out_warped);
            o.outputs["warped"] = out_warped;
            if (o.manifest.empty()) o.manifest = beside(out_warped);
        }
        o.report = {{"grid", dims_json(g)},
                    {"max_abs_mu", double(field.mu.cwiseAbs().maxCoeff())},
                    {"mean_sigma2", double(field.sigma2().mean())},
                    {"jacobian", jacobian_json(jacobian_stats(dense))}};
        return o;
    }
};

struct SelectGridCmd {
    std::string checkpoint, grids = "5,8,10,15";
    PairSource source;
    LossFlags loss;

    Command setup(CLI::App& app, const Common& common) {
        auto* sub = app.add_subcommand("select-grid", "Pick the grid with the best validation Dice");
        sub->add_option("--checkpoint", checkpoint, "Checkpoint written by train");
        source.add(sub, 5);
        sub->add_option("--grids", grids, "Candidate grid sizes");
        loss.add(sub);
        return {sub, [this, sub, &common] { return run(sub, common); }};
    }

    Outcome run(CLI::App* sub, const Common& common) {
        require(sub, {"--checkpoint"});
        const auto candidates = parse_grid_list(grids, "--grids");
        const auto weights = loss.weights();
        const GridNet model = load_checkpoint(checkpoint);
        const auto pairs = source.load(common.seed);
        const auto sel = select_grid(model, pairs, candidates, weights);
        Outcome o;
        o.report = ojson::array();
        for (const auto& s : sel.table) {
            o.report.push_back({{"grid", to_string(s.grid)},
                                {"dice", s.dice},
                                {"endpoint_error", s.endpoint_error},
                                {"loss", s.loss},
                                {"chosen", (s.grid == sel.chosen).all()}});
        }
        o.inputs["checkpoint"] = checkpoint;
        if (!source.data.empty()) o.inputs["data"] = source.data;
        return o;
    }
};

struct WarpCmd {
    std::string moving, field, out, boundary = "clamp";
    KernelFlags kernel;

    Command setup(CLI::App& app, const Common&) {
        auto* sub = app.add_subcommand("warp", "Pull-back warp of a volume by a gridded or dense field");
        sub->add_option("--moving", moving, "Volume to warp");
        sub->add_option("--field", field, "Gridded or dense field");
        sub->add_option("--out", out, "Warped volume output");
        sub->add_option("--boundary", boundary, "Boundary policy")->check(CLI::IsMember({"clamp", "zero"}));
        kernel.add(sub);
        return {sub, [this, sub] {
                    require(sub, {"--moving", "--field", "--out"});
                    const InterpKernel k = kernel.kernel();
                    const Volume m = load_volume(moving);
                    const auto dense = load_any_field(field, k);
                    check_same_dims(dense.dims, m.dims(), "field/moving");
                    const Volume w = warp_volume(m, dense, parse_boundary(boundary));
                    save_volume(w, out);
                    Outcome o;
                    o.inputs = {{"moving", moving}, {"field", field}};
                    o.outputs["warped"] = out;
                    o.report = {{"dims", dims_json(w.dims())},
                                {"min", double(w.data().minCoeff())},
                                {"max", double(w.data().maxCoeff())}};
                    o.manifest = beside(out);
                    return o;
                }};
    }
};

struct UpsampleCmd {
    std::string field, out;
    KernelFlags kernel;

    Command setup(CLI::App& app, const Common&) {
        auto* sub = app.add_subcommand("upsample", "Lift a gridded field to a dense displacement field");
        sub->add_option("--field", field, "Gridded field");
        sub->add_option("--out", out, "Dense field output");
        kernel.add(sub, "--upsample,--kernel");
        return {sub, [this, sub] {
                    require(sub, {"--field", "--out"});
                    const InterpKernel k = kernel.kernel();
                    const auto f = load_field(field).cast<double>();
                    const auto dense = upsample(f, f.grid.image_dims, k);
                    save_dense_field(dense.cast<float>(), Eigen::Vector3d::Ones(), out);
                    Outcome o;
                    o.inputs["field"] = field;
                    o.outputs["dense"] = out;
                    o.report = {{"grid", dims_json(f.grid.grid_dims)},
                                {"dims", dims_json(dense.dims)},
                                {"kernel", to_string(k.kind)},
                                {"max_displacement", dense.u.colwise().norm().maxCoeff()},
                                {"jacobian", jacobian_json(jacobian_stats(dense))}};
                    o.manifest = beside(out);
                    return o;
                }};
    }
};

struct EvalCmd {
    std::string field, fixed_mask, moving_mask, fixed_landmarks, moving_landmarks, spacing = "1,1,1";
    KernelFlags kernel;

    Command setup(CLI::App& app, const Common&) {
        auto* sub = app.add_subcommand("eval", "Metric report for a registration field");
        sub->add_option("--field", field, "Gridded or dense field");
        kernel.add(sub);
        sub->add_option("--fixed-mask", fixed_mask, "Fixed mask");
        sub->add_option("--moving-mask", moving_mask, "Moving mask, warped by the field");
        sub->add_option("--fixed-landmarks", fixed_landmarks, "Fixed landmarks, mapped by the field");
        sub->add_option("--moving-landmarks", moving_landmarks, "Corresponding moving landmarks");
        sub->add_option("--spacing", spacing, "Voxel spacing in mm when no mask supplies it");
        return {sub, [this, sub] { return run(sub); }};
    }

    Outcome run(CLI::App* sub) {
        require(sub, {"--field"});
        if (fixed_mask.empty() != moving_mask.empty()) {
            throw UsageError("--fixed-mask and --moving-mask go together");
        }
        if (fixed_landmarks.empty() != moving_landmarks.empty()) {
            throw UsageError("--fixed-landmarks and --moving-landmarks go together");
        }
        const auto sp = parse_double_list(spacing, "--spacing");
        if (sp.size() != 3) throw UsageError("--spacing: expected sx,sy,sz");
        Eigen::Vector3d mm(sp[0], sp[1], sp[2]);
        const auto dense = load_any_field(field, kernel.kernel());

        Outcome o;
        o.inputs["field"] = field;
        MetricReport report;
        if (!fixed_mask.empty()) {
            const MaskVolume fm = load_mask(fixed_mask);
            const MaskVolume mvol = load_mask(moving_mask);
            check_same_dims(fm.dims(), dense.dims, "mask/field");
            mm = fm.spacing();
            const MaskVolume warped = warp_mask(mvol, dense);
            report.dice = dice_score(fm, warped);
            report.mask_centroid_distance_mm = centroid_distance(fm, warped, mm);
            o.inputs["fixed_mask"] = fixed_mask;
            o.inputs["moving_mask"] = moving_mask;
        }
        if (!fixed_landmarks.empty()) {
            const auto fl = load_landmarks(fixed_landmarks, dense.dims, BoundsPolicy::warn);
            const auto ml = load_landmarks(moving_landmarks, dense.dims, BoundsPolicy::warn);
            report.landmark_distance_mm = centroid_distance(landmark_transfer(fl, dense), ml, mm);
            o.inputs["fixed_landmarks"] = fixed_landmarks;
            o.inputs["moving_landmarks"] = moving_landmarks;
        }
        report.jacobian = jacobian_stats(dense);
        o.report = metrics_json(report);
        return o;
    }
};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    return out;
}

struct StatsCmd {
    std::string input, out;

    Command setup(CLI::App& app, const Common&) {
        auto* sub = app.add_subcommand("stats", "One-sided paired t-tests with BH-FDR per family");
        sub->add_option("--input", input, "Long-format CSV: family,comparison,case,a,b");
        sub->add_option("--out", out, "CSV output of the p/q table");
        return {sub, [this, sub] { return run(sub); }};
    }

    Outcome run(CLI::App* sub) {
        require(sub, {"--input"});
        std::ifstream in(input);
        if (!in) throw std::runtime_error("cannot open " + input);
        std::vector<PairedSamples> groups;
        std::map<std::pair<std::string, std::string>, std::size_t> index;
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto cells = split_csv_line(line);
            if (cells.empty() || (cells.size() == 1 && cells[0].empty())) continue;
            if (line_no == 1 && cells[0] == "family") continue;
            if (cells.size() != 5) {
                throw std::runtime_error(input + ":" + std::to_string(line_no) + ": expected 5 columns");
            }
            const auto key = std::make_pair(cells[0], cells[1]);
            auto it = index.find(key);
            if (it == index.end()) {
                it = index.emplace(key, groups.size()).first;
                groups.push_back({cells[0], cells[1], {}, {}});
            }
            try {
                groups[it->second].a.push_back(std::stod(cells[3]));
                groups[it->second].b.push_back(std::stod(cells[4]));
            } catch (const std::exception&) {
                throw std::runtime_error(input + ":" + std::to_string(line_no) + ": bad number");
            }
        }
        const auto results = paired_tests(groups);
        Outcome o;
        o.report = ojson::array();
        for (const auto& r : results) {
            o.report.push_back({{"family", r.family},
                                {"comparison", r.name},
                                {"n", r.n},
                                {"mean_diff", r.mean_difference},
                                {"t", r.t_statistic},
                                {"p", r.p_value},
                                {"q", r.q_value}});
        }
        o.inputs["input"] = input;
        if (!out.empty()) {
            io::write_text_atomic(out, to_csv(o.report));
            o.outputs["table"] = out;
            o.manifest = beside(out);
        }
        return o;
    }
};

struct DofSweepCmd {
    std::string grids = "5,8,10,15", noise = "0", out;
    int pairs = 5, iters = 300;
    bool mask_loss = true;
    SuiteFlags suite;
    KernelFlags kernel;
    LossFlags loss;

    Command setup(CLI::App& app, const Common& common) {
        auto* sub = app.add_subcommand("dof-sweep", "Accuracy versus control-grid size and label noise");
        sub->add_option("--grids", grids, "Grid sizes");
        sub->add_option("--noise", noise, "Label-noise levels; intensity noise std is 0.2 x level");
        sub->add_option("--pairs", pairs, "Synthetic pairs per noise level");
        suite.add(sub);
        sub->add_option("--iters", iters, "Maximum iterations per registration");
        add_switch(sub, "--mask-loss,!--no-mask-loss", mask_loss, "Register with the (noisy) masks in the loss");
        kernel.add(sub);
        // soft Dice on warped binary masks outweighs MSE at lambda2 = 1 and drags the field off the truth
        loss.lambda2 = 0.01;
        loss.add(sub);
        sub->add_option("--out", out, "CSV output");
        return {sub, [this, sub, &common] { return run(sub, common); }};
    }

    Outcome run(CLI::App*, const Common& common) {
        const auto gs = parse_grid_list(grids, "--grids");
        const auto levels = parse_double_list(noise, "--noise");
        RegistrationConfig cfg;
        cfg.kernel = kernel.kernel();
        cfg.weights = loss.weights();
        cfg.max_iters = iters;
        cfg.seed = common.seed;
        try {
            cfg.validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        Outcome o;
        o.report = ojson::array();
        for (const double level : levels) {
            if (!(level >= 0.0 && level <= 1.0)) throw UsageError("--noise levels must lie in [0, 1]");
            auto spec = suite.spec(pairs, common.seed);
            spec.label_noise = level;
            spec.intensity_noise = 0.2 * level;
            const auto set = make_suite_checked(spec);
            for (const auto& g : gs) {
                if ((g > spec.dims).any()) throw UsageError("grid " + to_string(g) + " exceeds the volume");
            }
            for (const auto& row : dof_sweep(set, gs, cfg, mask_loss)) {
                o.report.push_back({{"noise", level},
                                    {"grid", to_string(row.grid)},
                                    {"dof", 3 * voxel_count(row.grid)},
                                    {"dice", row.dice},
                                    {"endpoint_error", row.endpoint_error},
                                    {"folding", row.folding},
                                    {"bending", row.bending}});
            }
        }
        if (!out.empty()) {
            io::write_text_atomic(out, to_csv(o.report));
            o.outputs["table"] = out;
            o.manifest = beside(out);
        }
        return o;
    }
};

int usage_error(const CLI::App& app, const std::string& msg) {
    std::cerr << "error: " << msg << "\n";
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Control-grid deformable registration toolkit", "gridreg"};
    app.set_version_flag("--version", GRIDREG_VERSION);
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    Common common;
    SynthCmd synth_cmd;
    RegisterCmd register_cmd;
    TrainCmd train_cmd;
    InferCmd infer_cmd;
    SelectGridCmd select_cmd;
    WarpCmd warp_cmd;
    UpsampleCmd upsample_cmd;
    EvalCmd eval_cmd;
    StatsCmd stats_cmd;
    DofSweepCmd sweep_cmd;

    std::vector<Command> commands;
    commands.push_back(synth_cmd.setup(app, common));
    commands.push_back(register_cmd.setup(app, common));
    commands.push_back(train_cmd.setup(app, common));
    commands.push_back(infer_cmd.setup(app, common));
    commands.push_back(select_cmd.setup(app, common));
    commands.push_back(warp_cmd.setup(app, common));
    commands.push_back(upsample_cmd.setup(app, common));
    commands.push_back(eval_cmd.setup(app, common));
    commands.push_back(stats_cmd.setup(app, common));
    commands.push_back(sweep_cmd.setup(app, common));
    for (auto& c : commands) {
        add_common(c.app, common);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return usage_error(app, e.what());
    }

    const auto* chosen = app.get_subcommands().front();
    const auto cmd = std::find_if(commands.begin(), commands.end(), [&](const Command& c) { return c.app == chosen; });
    try {
        if (!common.config.empty()) {
            merge_config(cmd->app, common.config);
        }
        set_thread_count(common.threads);
        const auto start = std::chrono::steady_clock::now();
        const Outcome o = cmd->run();
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

        emit_report(o.report, common.report, common.report_out);
        const fs::path manifest_path = !common.manifest.empty() ? fs::path(common.manifest) : o.manifest;
        if (!manifest_path.empty()) {
            RunManifest m;
            m.subcommand = chosen->get_name();
            m.config = resolved_options(chosen);
            m.seed = common.seed;
            m.inputs = o.inputs;
            m.outputs = o.outputs;
            if (!common.report_out.empty()) m.outputs["report"] = common.report_out;
            m.seconds = seconds;
            m.write(manifest_path);
        }
    } catch (const UsageError& e) {
        return usage_error(app, e.what());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
