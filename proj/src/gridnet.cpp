#include "gridreg/gridnet.hpp"

#include "gridreg/metrics.hpp"
#include "gridreg/rng.hpp"
#include "gridreg/warp.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gridreg {

using nlohmann::json;

std::vector<Dims3> default_grid_set() {
    return {Dims3(5, 5, 5), Dims3(8, 8, 8), Dims3(10, 10, 10), Dims3(15, 15, 15)};
}

Eigen::Index GridNetConfig::token_count() const {
    const int f = 1 << levels;
    return Eigen::Index(input_dims(0) / f) * (input_dims(1) / f) * (input_dims(2) / f);
}

void GridNetConfig::validate() const {
    if (levels < 1 || levels > 8) throw std::invalid_argument("encoder levels must lie in [1, 8]");
    if (base_channels < 1 || heads < 1 || head_dim < 1 || pe_frequencies < 1 || decoder_channels < 1) {
        throw std::invalid_argument("network widths must be >= 1");
    }
    const int f = 1 << levels;
    if ((input_dims < f).any() || (input_dims.unaryExpr([f](int d) { return d % f; }) != 0).any()) {
        throw std::invalid_argument("input dims " + to_string(input_dims) + " must be divisible by 2^L = " +
                                    std::to_string(f));
    }
}

// --- positional encodings ---

Eigen::RowVectorXd sinusoidal_encoding(const Eigen::Vector3d& v, int frequencies) {
    constexpr double pi = 3.14159265358979323846;
    Eigen::RowVectorXd out(6 * frequencies);
    Eigen::Index c = 0;
    for (int a = 0; a < 3; ++a) {
        for (int k = 0; k < frequencies; ++k) {
            const double arg = std::ldexp(pi, k) * v(a);
            out(c++) = std::sin(arg);
            out(c++) = std::cos(arg);
        }
    }
    return out;
}

const ad::Tensor<double>& PositionalEncodingCache::coordinates(const Dims3& grid) {
    const std::array<int, 3> key{grid(0), grid(1), grid(2)};
    if (auto it = cache_.find(key); it != cache_.end()) {
        return it->second;
    }
    ++computations_;
    const Eigen::Index count = voxel_count(grid);
    ad::Tensor<double> t = ad::Tensor<double>::zeros({count, Eigen::Index(6 * frequencies_)});
    auto m = t.matrix();
    for (int k = 0; k < grid(2); ++k) {
        for (int j = 0; j < grid(1); ++j) {
            for (int i = 0; i < grid(0); ++i) {
                const Eigen::Vector3d r(double(i) / (grid(0) - 1), double(j) / (grid(1) - 1), double(k) / (grid(2) - 1));
                m.row(linear_index(grid, i, j, k)) = sinusoidal_encoding(r, frequencies_);
            }
        }
    }
    return cache_.emplace(key, std::move(t)).first->second;
}

ad::Tensor<double> PositionalEncodingCache::grid_size(const Dims3& grid) const {
    const Eigen::RowVectorXd e = sinusoidal_encoding(grid.cast<double>().matrix() / 16.0, frequencies_);
    return ad::Tensor<double>({e.size()}, e.transpose().array());
}

ad::Tensor<double> PositionalEncodingCache::queries(const Dims3& grid) {
    const auto& coords = coordinates(grid);
    const auto size_code = grid_size(grid);
    const Eigen::Index c = coords.dim(1);
    ad::Tensor<double> q = ad::Tensor<double>::zeros({coords.dim(0), 2 * c});
    q.matrix().leftCols(c) = coords.matrix();
    q.matrix().rightCols(c).rowwise() = size_code.data.matrix().transpose();
    return q;
}

// --- attention ---

template <typename Scalar>
ad::Var<Scalar> cross_attention(ad::Var<Scalar> queries, ad::Var<Scalar> tokens, ad::Var<Scalar> wq,
                                ad::Var<Scalar> wk, ad::Var<Scalar> wv, ad::Var<Scalar> wo, int heads, int head_dim,
                                std::vector<ad::Var<Scalar>>* attention) {
    const Eigen::Index hd = Eigen::Index(heads) * head_dim;
    auto check = [](bool ok, const std::string& what, const ad::Shape& a, const ad::Shape& b) {
        if (!ok) {
            throw std::invalid_argument("cross_attention: width mismatch between " + what + " " + ad::to_string(a) +
                                        " and " + ad::to_string(b));
        }
    };
    check(queries.shape().size() == 2 && wq.shape().size() == 2 && queries.shape()[1] == wq.shape()[0], "queries",
          queries.shape(), wq.shape());
    check(tokens.shape().size() == 2 && wk.shape().size() == 2 && tokens.shape()[1] == wk.shape()[0], "tokens",
          tokens.shape(), wk.shape());
    check(wv.shape() == wk.shape(), "W_K", wk.shape(), wv.shape());
    check(wq.shape()[1] == hd && wk.shape()[1] == hd, "W_Q/W_K and H*d", wq.shape(), {hd});
    check(wo.shape().size() == 2 && wo.shape()[0] == hd, "W_O and H*d", wo.shape(), {hd});

    const auto q = ad::matmul(queries, wq);
    const auto k = ad::matmul(tokens, wk);
    const auto v = ad::matmul(tokens, wv);
    const Scalar inv_sqrt_d = Scalar(1.0 / std::sqrt(double(head_dim)));
    std::vector<ad::Var<Scalar>> outs;
    for (int h = 0; h < heads; ++h) {
        const Eigen::Index off = Eigen::Index(h) * head_dim;
        const auto qh = ad::slice_cols(q, off, head_dim);
        const auto kh = ad::slice_cols(k, off, head_dim);
        const auto vh = ad::slice_cols(v, off, head_dim);
        const auto a = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt_d));
        if (attention) {
            attention->push_back(a);
        }
        outs.push_back(ad::matmul(a, vh));
    }
    return ad::matmul(heads == 1 ? outs.front() : ad::concat_channels(outs), wo);
}

// --- network ---

namespace {

ad::Tensor<float> init_tensor(const ad::Shape& shape, ad::Init init, Eigen::Index fan_in, Eigen::Index fan_out,
                              std::mt19937_64& rng) {
    const Eigen::Index n = ad::shape_size(shape);
    Eigen::ArrayXd v = Eigen::ArrayXd::Zero(n);
    switch (init) {
    case ad::Init::zeros:
        break;
    case ad::Init::he_normal:
        fill_standard_normal(v, rng);
        v *= std::sqrt(2.0 / double(fan_in));
        break;
    case ad::Init::xavier_uniform: {
        const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
        for (Eigen::Index i = 0; i < n; ++i) {
            v(i) = uniform_real(rng, -limit, limit);
        }
        break;
    }
    }
    return ad::Tensor<float>(shape, v.cast<float>());
}

int channels_at(const GridNetConfig& cfg, int level) {
    return level == 0 ? 2 : cfg.base_channels << (level - 1);
}

} // namespace

GridNet::GridNet(const GridNetConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), seed_(seed), pe_cache_(cfg.pe_frequencies) {
    cfg_.validate();
    const int levels = cfg_.levels;
    const Eigen::Index cp = cfg_.token_channels();
    const Eigen::Index cd = cfg_.decoder_channels;
    const Eigen::Index hd = Eigen::Index(cfg_.heads) * cfg_.head_dim;
    const Eigen::Index cq = cfg_.query_channels();
    const Eigen::Index ct = cfg_.key_channels();

    auto add = [this](std::string name, ad::Shape shape, ad::Init init, Eigen::Index fan_in, Eigen::Index fan_out) {
        auto rng = make_engine(seed_, Stream::init_params, params_.size());
        params_.push_back({std::move(name), init_tensor(shape, init, fan_in, fan_out, rng), init});
    };
    for (int l = 1; l <= levels; ++l) {
        const Eigen::Index ci = channels_at(cfg_, l - 1), co = channels_at(cfg_, l);
        add("enc" + std::to_string(l) + ".w", {co, ci, 3, 3, 3}, ad::Init::he_normal, ci * 27, co * 27);
        add("enc" + std::to_string(l) + ".b", {co}, ad::Init::zeros, 1, 1);
    }
    for (int l = 1; l <= levels; ++l) {
        const Eigen::Index ci = channels_at(cfg_, l);
        const Eigen::Index k = Eigen::Index(1) << (levels - l);
        add("proj" + std::to_string(l) + ".w", {cp, ci, k, k, k}, ad::Init::he_normal, ci * k * k * k, cp);
        add("proj" + std::to_string(l) + ".b", {cp}, ad::Init::zeros, 1, 1);
    }
    for (int l = levels; l >= 1; --l) {
        const std::string p = "dec" + std::to_string(l) + ".";
        add(p + "wq", {cq, hd}, ad::Init::xavier_uniform, cq, hd);
        add(p + "wk", {ct, hd}, ad::Init::xavier_uniform, ct, hd);
        add(p + "wv", {ct, hd}, ad::Init::xavier_uniform, ct, hd);
        add(p + "wo", {hd, cd}, ad::Init::xavier_uniform, hd, cd);
        if (l > 1) {
            add(p + "wtok", {ct, cd}, ad::Init::he_normal, ct, cd);
        }
    }
    if (cfg_.locality_gain > 0.0) {
        seed_locality();
    }
    add("head.w", {cd, 6}, ad::Init::zeros, cd, 6);
    add("head.b", {6}, ad::Init::zeros, 1, 1);
}

void GridNet::seed_locality() {
    // q.k then contains sum_axis sum_k cos(2^k pi (r_query - r_token)) over the two lowest
    // frequencies, which peaks when the token centre sits on the control point
    const int f2 = 2 * cfg_.pe_frequencies;
    const Eigen::Index key_offset = cfg_.token_channels() + cfg_.decoder_channels;
    const float gain = static_cast<float>(cfg_.locality_gain);
    for (auto& prm : params_) {
        const bool is_q = prm.name.ends_with(".wq");
        const bool is_k = prm.name.ends_with(".wk");
        if (!is_q && !is_k) continue;
        auto m = prm.value.matrix();
        for (int h = 0; h < cfg_.heads; ++h) {
            int col = h * cfg_.head_dim;
            for (int a = 0; a < 3; ++a) {
                for (int c = 0; c < std::min(4, f2); ++c) {
                    if (col >= (h + 1) * cfg_.head_dim) break;
                    const Eigen::Index row = (is_q ? 0 : key_offset) + a * f2 + c;
                    m.col(col).setZero();
                    m(row, col) = gain;
                    ++col;
                }
            }
        }
    }
}

std::size_t GridNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        n += static_cast<std::size_t>(p.value.size());
    }
    return n;
}

template <typename Scalar>
ad::Var<Scalar> GridNet::forward_graph(ad::Tape<Scalar>& tape, const std::vector<ad::Var<Scalar>>& params,
                                       const Volume& fixed, const Volume& moving, const Dims3& grid_dims,
                                       std::vector<ad::Var<Scalar>>* attention) const {
    if (params.size() != params_.size()) {
        throw std::invalid_argument("forward_graph: expected " + std::to_string(params_.size()) + " parameters, got " +
                                    std::to_string(params.size()));
    }
    if (!fixed.same_geometry(moving) || !(fixed.dims() == cfg_.input_dims).all()) {
        throw std::invalid_argument("network expects two volumes of dims " + to_string(cfg_.input_dims) + ", got " +
                                    to_string(fixed.dims()) + " and " + to_string(moving.dims()));
    }
    make_control_grid(fixed.dims(), grid_dims);

    std::map<std::string, ad::Var<Scalar>> p;
    for (std::size_t i = 0; i < params.size(); ++i) {
        p.emplace(params_[i].name, params[i]);
    }
    const Dims3& d = fixed.dims();
    const Eigen::Index n = voxel_count(d);
    typename ad::Tensor<Scalar>::Array input(2 * n);
    input.head(n) = fixed.data().template cast<Scalar>();
    input.tail(n) = moving.data().template cast<Scalar>();
    auto h = tape.constant(ad::Tensor<Scalar>({2, d(2), d(1), d(0)}, std::move(input)), "input");

    const int levels = cfg_.levels;
    std::vector<ad::Var<Scalar>> projected;
    for (int l = 1; l <= levels; ++l) {
        const std::string s = std::to_string(l);
        h = ad::relu(ad::conv3d(h, p.at("enc" + s + ".w"), p.at("enc" + s + ".b"), {3, 2, 1}));
        const int k = 1 << (levels - l);
        projected.push_back(ad::tokens(ad::conv3d(h, p.at("proj" + s + ".w"), p.at("proj" + s + ".b"), {k, k, 0})));
    }

    const auto queries = tape.constant(pe_cache_.queries(grid_dims).template cast<Scalar>(), "queries");
    const auto token_pe = tape.constant(token_encoding().template cast<Scalar>(), "token_pe");
    auto state = tape.constant(ad::Tensor<Scalar>::zeros({cfg_.token_count(), Eigen::Index(cfg_.decoder_channels)}),
                               "decoder_state");
    std::optional<ad::Var<Scalar>> z;
    // bottom (coarsest) to top
    for (int l = levels; l >= 1; --l) {
        const std::string s = "dec" + std::to_string(l) + ".";
        const auto t = ad::concat_channels<Scalar>({projected[static_cast<std::size_t>(l - 1)], state, token_pe});
        const auto o = cross_attention(queries, t, p.at(s + "wq"), p.at(s + "wk"), p.at(s + "wv"), p.at(s + "wo"),
                                       cfg_.heads, cfg_.head_dim, attention);
        z = z ? ad::add(*z, o) : o;
        if (l > 1) {
            state = ad::relu(ad::matmul(t, p.at(s + "wtok")));
        }
    }
    return ad::add(ad::matmul(ad::relu(*z), p.at("head.w")), p.at("head.b"));
}

template <typename Scalar>
GriddedField<Scalar> head_to_field(const ad::Tensor<Scalar>& out, const ControlGrid& grid) {
    if (out.rank() != 2 || out.dim(0) != grid.size() || out.dim(1) != 6) {
        throw std::invalid_argument("head output " + ad::to_string(out.shape) + " does not match " +
                                    std::to_string(grid.size()) + " control points x 6");
    }
    GriddedField<Scalar> f{grid, out.matrix().leftCols(3).transpose(), std::nullopt};
    f.eta = out.matrix().rightCols(3).transpose();
    return f;
}

ad::Tensor<double> GridNet::token_encoding() const {
    const int f = 1 << cfg_.levels;
    const Dims3 t = cfg_.input_dims / f;
    ad::Tensor<double> out = ad::Tensor<double>::zeros({voxel_count(t), Eigen::Index(cfg_.pe_channels())});
    auto m = out.matrix();
    for (int k = 0; k < t(2); ++k) {
        for (int j = 0; j < t(1); ++j) {
            for (int i = 0; i < t(0); ++i) {
                // centre of the input block each token summarises, normalised like control coordinates
                const Eigen::Vector3d idx(i, j, k);
                const Eigen::Vector3d centre =
                    ((idx.array() + 0.5) * f - 0.5) / (cfg_.input_dims.cast<double>() - 1.0);
                m.row(linear_index(t, i, j, k)) = sinusoidal_encoding(centre, cfg_.pe_frequencies);
            }
        }
    }
    return out;
}

GriddedField<float> GridNet::forward(const Volume& fixed, const Volume& moving, const Dims3& grid_dims) const {
    ad::Tape<float> tape;
    std::vector<ad::Var<float>> leaves;
    for (const auto& prm : params_) {
        leaves.push_back(tape.constant(prm.value, prm.name));
    }
    const auto out = forward_graph(tape, leaves, fixed, moving, grid_dims);
    return head_to_field(out.value(), make_control_grid(fixed.dims(), grid_dims));
}

std::vector<char> GridNet::parameter_bytes() const {
    std::vector<char> bytes;
    for (const auto& prm : params_) {
        const auto b = io::encode_f32(prm.value.data.data(), static_cast<std::size_t>(prm.value.size()));
        bytes.insert(bytes.end(), b.begin(), b.end());
    }
    return bytes;
}

template <typename Scalar>
ad::Var<Scalar> registration_loss(ad::Var<Scalar> head, const RegistrationPair& pair, const Upsampler& up,
                                  const LossWeights& weights, bool bayesian, std::span<const Field3<double>> noise) {
    GriddedField<double> field = head_to_field(head.value(), up.grid()).template cast<double>();
    if (!bayesian) {
        field.eta.reset();
    }
    const LossGradient g = evaluate_loss(pair, field, up, weights, bayesian ? noise : std::span<const Field3<double>>{},
                                         true);
    ad::Tensor<Scalar> adjoint = ad::Tensor<Scalar>::zeros(head.shape());
    adjoint.matrix().leftCols(3) = g.d_mu.transpose().template cast<Scalar>();
    if (g.d_eta) {
        adjoint.matrix().rightCols(3) = g.d_eta->transpose().template cast<Scalar>();
    }
    return ad::custom<Scalar>(
        {head}, ad::Tensor<Scalar>::scalar(Scalar(g.loss.total)),
        [adjoint = std::move(adjoint)](const ad::Tensor<Scalar>& upstream) {
            return std::vector<ad::Tensor<Scalar>>{
                ad::Tensor<Scalar>(adjoint.shape, adjoint.data * upstream.data(0))};
        },
        "registration_loss");
}

// --- training ---

void TrainConfig::validate() const {
    adam.validate();
    weights.validate();
    if (batch_size < 1 || epochs < 1 || max_steps < 0) {
        throw std::invalid_argument("batch size and epochs must be >= 1");
    }
    if (grids.empty()) throw std::invalid_argument("training grid set is empty");
    for (const auto& g : grids) {
        if ((g < 2).any()) throw std::invalid_argument("grid_dim must be ≥ 2, got " + to_string(g));
    }
}

namespace {

RegistrationPair as_pair(const SynthPair& p, bool use_masks) {
    return RegistrationPair{p.fixed, p.moving, use_masks ? &p.fixed_mask : nullptr,
                            use_masks ? &p.moving_mask : nullptr};
}

const Upsampler& cached_upsampler(std::map<std::array<int, 3>, Upsampler>& cache, const Dims3& image,
                                  const Dims3& grid) {
    const std::array<int, 3> key{grid(0), grid(1), grid(2)};
    auto it = cache.find(key);
    if (it == cache.end()) {
        it = cache.emplace(key, Upsampler(make_control_grid(image, grid), InterpKernel::trilinear())).first;
    }
    return it->second;
}

} // namespace

double validation_loss(const GridNet& net, std::span<const SynthPair> pairs, std::span<const Dims3> grids,
                       const LossWeights& weights, bool use_masks) {
    if (pairs.empty() || grids.empty()) {
        throw std::invalid_argument("validation needs at least one pair and one grid");
    }
    double total = 0.0;
    for (const auto& p : pairs) {
        for (const auto& g : grids) {
            GriddedField<double> f = net.forward(p.fixed, p.moving, g).cast<double>();
            f.eta.reset();
            total += total_loss(as_pair(p, use_masks), f, InterpKernel::trilinear(), weights).total;
        }
    }
    return total / double(pairs.size() * grids.size());
}

TrainHistory train(GridNet& net, std::span<const SynthPair> train_pairs, std::span<const SynthPair> val_pairs,
                   const TrainConfig& cfg, const TrainLog& log) {
    cfg.validate();
    if (train_pairs.size() < 8) {
        throw std::invalid_argument("training needs at least 8 pairs, got " + std::to_string(train_pairs.size()));
    }
    const Dims3 image = net.config().input_dims;
    const int n = static_cast<int>(train_pairs.size());
    const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int total_steps = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * steps_per_epoch;

    auto& params = net.parameters();
    std::vector<AdamState<float>> states(params.size());
    std::map<std::array<int, 3>, Upsampler> upsamplers;

    TrainHistory hist;
    if (!val_pairs.empty()) {
        hist.val_loss.push_back(validation_loss(net, val_pairs, cfg.grids, cfg.weights, cfg.use_masks));
    }
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int step = 0; step < total_steps; ++step) {
        const int epoch = step / steps_per_epoch;
        if (step % steps_per_epoch == 0) {
            std::iota(order.begin(), order.end(), 0);
            auto shuffle_rng = make_engine(cfg.seed, Stream::batch_sampler, std::uint64_t(epoch));
            std::shuffle(order.begin(), order.end(), shuffle_rng);
        }
        auto grid_rng = make_engine(cfg.seed, Stream::grid_sampler, std::uint64_t(step));
        const auto pick = static_cast<std::size_t>(grid_rng() % cfg.grids.size());
        const Dims3 grid = cfg.grids[pick];
        const Upsampler& up = cached_upsampler(upsamplers, image, grid);

        std::vector<ad::Tensor<float>> grads;
        for (const auto& prm : params) {
            grads.push_back(ad::Tensor<float>::zeros(prm.value.shape));
        }
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const int slot = (step % steps_per_epoch) * cfg.batch_size + b;
            const SynthPair& pair = train_pairs[static_cast<std::size_t>(order[static_cast<std::size_t>(slot % n)])];
            ad::Tape<float> tape;
            std::vector<ad::Var<float>> leaves;
            for (const auto& prm : params) {
                leaves.push_back(tape.leaf(prm.value, prm.name));
            }
            const auto head = net.forward_graph(tape, leaves, pair.fixed, pair.moving, grid);
            const auto noise = draw_noise(up.grid().size(), cfg.weights.mc_samples, cfg.seed,
                                          std::uint64_t(step) * std::uint64_t(cfg.batch_size) + std::uint64_t(b));
            ad::Var<float> loss;
            try {
                loss = registration_loss(head, as_pair(pair, cfg.use_masks), up, cfg.weights, cfg.bayesian, noise);
            } catch (const std::exception& e) {
                throw std::runtime_error("training diverged at step " + std::to_string(step) + ": " + e.what());
            }
            tape.backward(loss);
            batch_loss += loss.value().data(0);
            for (std::size_t i = 0; i < params.size(); ++i) {
                grads[i].data += tape.grad(leaves[i]).data;
            }
        }
        batch_loss /= cfg.batch_size;
        for (std::size_t i = 0; i < params.size(); ++i) {
            grads[i].data /= float(cfg.batch_size);
            states[i].update(params[i].value.data, grads[i].data, cfg.adam, step + 1);
            if (!params[i].value.data.allFinite()) {
                throw std::runtime_error("training diverged at step " + std::to_string(step) + ": parameter " +
                                         params[i].name + " is not finite");
            }
        }
        hist.step_loss.push_back(batch_loss);
        hist.step_grid.push_back(grid);
        hist.steps = step + 1;

        const bool epoch_end = (step + 1) % steps_per_epoch == 0 || step + 1 == total_steps;
        double val = std::numeric_limits<double>::quiet_NaN();
        if (epoch_end && !val_pairs.empty()) {
            val = validation_loss(net, val_pairs, cfg.grids, cfg.weights, cfg.use_masks);
            hist.val_loss.push_back(val);
        }
        if (log && epoch_end) {
            log(epoch, step, batch_loss, val);
        }
    }
    return hist;
}

// --- grid selection ---

GridSelection select_grid(const FieldPredictor& predict, std::span<const SynthPair> val_pairs,
                          std::span<const Dims3> grids, const LossWeights& weights) {
    if (val_pairs.empty()) throw std::invalid_argument("select_grid needs at least one validation pair");
    if (grids.empty()) throw std::invalid_argument("select_grid needs at least one grid");
    GridSelection sel;
    for (const auto& g : grids) {
        GridScore score{g};
        for (const auto& p : val_pairs) {
            GriddedField<double> f = predict(p, g);
            f.eta.reset();
            const auto dense = upsample_trilinear(f, p.fixed.dims());
            score.dice += dice_score(p.fixed_mask, warp_mask(p.moving_mask, dense));
            score.endpoint_error += endpoint_error(dense, p.gt_dense);
            score.loss += total_loss(as_pair(p, true), f, InterpKernel::trilinear(), weights).total;
        }
        const double n = double(val_pairs.size());
        score.dice /= n;
        score.endpoint_error /= n;
        score.loss /= n;
        sel.table.push_back(score);
    }
    // coarser grids first so ties keep the coarser one
    std::vector<std::size_t> idx(sel.table.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return voxel_count(sel.table[a].grid) < voxel_count(sel.table[b].grid);
    });
    std::size_t best = idx.front();
    for (auto i : idx) {
        if (sel.table[i].dice > sel.table[best].dice + 1e-12) {
            best = i;
        }
    }
    sel.chosen = sel.table[best].grid;
    return sel;
}

GridSelection select_grid(const GridNet& net, std::span<const SynthPair> val_pairs, std::span<const Dims3> grids,
                          const LossWeights& weights) {
    return select_grid([&net](const SynthPair& p, const Dims3& g) { return net.forward(p.fixed, p.moving, g).cast<double>(); },
                       val_pairs, grids, weights);
}

// --- checkpoints ---

namespace {

json dims_json(const Dims3& d) { return json::array({d(0), d(1), d(2)}); }

Dims3 json_dims(const json& j) {
    if (!j.is_array() || j.size() != 3) throw std::runtime_error("checkpoint: expected a 3-element dims array");
    return Dims3(j[0].get<int>(), j[1].get<int>(), j[2].get<int>());
}

} // namespace

void save_checkpoint(const GridNet& net, const std::filesystem::path& path) {
    const auto& c = net.config();
    json manifest;
    manifest["kind"] = "gridnet_checkpoint";
    manifest["version"] = 1;
    manifest["seed"] = net.seed();
    manifest["config"] = {{"input_dims", dims_json(c.input_dims)}, {"levels", c.levels},
                          {"base_channels", c.base_channels},  {"heads", c.heads},
                          {"head_dim", c.head_dim},            {"pe_frequencies", c.pe_frequencies},
                          {"decoder_channels", c.decoder_channels}};
    const auto payload = io::payload_path(path);
    manifest["payload"] = payload.filename().string();
    manifest["dtype"] = "f32";
    json entries = json::array();
    std::size_t offset = 0;
    for (const auto& prm : net.parameters()) {
        entries.push_back({{"name", prm.name}, {"shape", prm.value.shape}, {"offset", offset},
                           {"count", prm.value.size()}});
        offset += static_cast<std::size_t>(prm.value.size());
    }
    manifest["parameters"] = entries;
    const auto bytes = net.parameter_bytes();
    io::write_bytes_atomic(payload, bytes.data(), bytes.size());
    io::write_text_atomic(io::header_path(path), manifest.dump(2) + "\n");
}

GridNet load_checkpoint(const std::filesystem::path& path) {
    const auto hpath = io::header_path(path);
    const json m = json::parse(io::read_text(hpath));
    if (m.value("kind", "") != "gridnet_checkpoint") {
        throw std::runtime_error(hpath.string() + " is not a gridnet checkpoint");
    }
    const json& jc = m.at("config");
    GridNetConfig cfg;
    cfg.input_dims = json_dims(jc.at("input_dims"));
    cfg.levels = jc.at("levels").get<int>();
    cfg.base_channels = jc.at("base_channels").get<int>();
    cfg.heads = jc.at("heads").get<int>();
    cfg.head_dim = jc.at("head_dim").get<int>();
    cfg.pe_frequencies = jc.at("pe_frequencies").get<int>();
    cfg.decoder_channels = jc.at("decoder_channels").get<int>();
    GridNet net(cfg, m.at("seed").get<std::uint64_t>());

    const auto values = io::decode_f32(io::read_bytes(hpath.parent_path() / m.at("payload").get<std::string>()));
    auto& params = net.parameters();
    const json& entries = m.at("parameters");
    if (entries.size() != params.size()) {
        throw std::runtime_error("checkpoint lists " + std::to_string(entries.size()) + " parameters, network has " +
                                 std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const json& e = entries[i];
        const auto shape = e.at("shape").get<ad::Shape>();
        if (e.at("name").get<std::string>() != params[i].name || shape != params[i].value.shape) {
            throw std::runtime_error("checkpoint parameter " + std::to_string(i) + " (" + e.at("name").get<std::string>() +
                                     " " + ad::to_string(shape) + ") does not match " + params[i].name + " " +
                                     ad::to_string(params[i].value.shape));
        }
        const auto offset = e.at("offset").get<std::size_t>();
        const auto count = static_cast<std::size_t>(params[i].value.size());
        if (offset + count > values.size()) {
            throw std::runtime_error("checkpoint payload too short for parameter " + params[i].name);
        }
        params[i].value.data = Eigen::Map<const Eigen::ArrayXf>(values.data() + offset, Eigen::Index(count));
        if (!params[i].value.data.allFinite()) {
            throw std::runtime_error("checkpoint parameter " + params[i].name + " holds non-finite values");
        }
    }
    return net;
}

template ad::Var<float> cross_attention(ad::Var<float>, ad::Var<float>, ad::Var<float>, ad::Var<float>,
                                        ad::Var<float>, ad::Var<float>, int, int, std::vector<ad::Var<float>>*);
template ad::Var<double> cross_attention(ad::Var<double>, ad::Var<double>, ad::Var<double>, ad::Var<double>,
                                         ad::Var<double>, ad::Var<double>, int, int, std::vector<ad::Var<double>>*);
template ad::Var<float> GridNet::forward_graph(ad::Tape<float>&, const std::vector<ad::Var<float>>&, const Volume&,
                                               const Volume&, const Dims3&, std::vector<ad::Var<float>>*) const;
template ad::Var<double> GridNet::forward_graph(ad::Tape<double>&, const std::vector<ad::Var<double>>&, const Volume&,
                                                const Volume&, const Dims3&, std::vector<ad::Var<double>>*) const;
template GriddedField<float> head_to_field(const ad::Tensor<float>&, const ControlGrid&);
template GriddedField<double> head_to_field(const ad::Tensor<double>&, const ControlGrid&);
template ad::Var<float> registration_loss(ad::Var<float>, const RegistrationPair&, const Upsampler&,
                                          const LossWeights&, bool, std::span<const Field3<double>>);
template ad::Var<double> registration_loss(ad::Var<double>, const RegistrationPair&, const Upsampler&,
                                           const LossWeights&, bool, std::span<const Field3<double>>);

} // namespace gridreg
