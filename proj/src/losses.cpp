#include "gridreg/losses.hpp"

#include "gridreg/rng.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace gridreg {

void LossWeights::validate() const {
    if (!(lambda0 >= 0.0 && lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0)) {
        throw std::invalid_argument("loss weights must be >= 0");
    }
    if (!(epsilon > 0.0)) {
        throw std::invalid_argument("Dice epsilon must be > 0");
    }
    if (mc_samples < 1) {
        throw std::invalid_argument("Monte-Carlo sample count must be >= 1");
    }
}

namespace {

void require_same_dims(const Dims3& a, const Dims3& b, const char* what) {
    if (!(a == b).all()) {
        throw std::invalid_argument(std::string(what) + ": dims " + to_string(a) + " and " + to_string(b) + " differ");
    }
}

} // namespace

double mse_sim(const Volume& warped, const Volume& fixed) {
    require_same_dims(warped.dims(), fixed.dims(), "mse_sim");
    const Eigen::ArrayXd d = warped.data().cast<double>() - fixed.data().cast<double>();
    return d.square().sum() / double(d.size());
}

double uncertainty_loss(std::span<const Volume> warped_samples, const Volume& fixed,
                        const Eigen::ArrayXd& sigma2_dense, const LossWeights& weights) {
    if (warped_samples.empty()) {
        throw std::invalid_argument("uncertainty_loss needs at least one warped sample");
    }
    if (sigma2_dense.size() != fixed.size()) {
        throw std::invalid_argument("uncertainty_loss: variance field size does not match the volume");
    }
    if (!(sigma2_dense > 0.0).all()) {
        throw std::invalid_argument("uncertainty_loss: variance must be > 0 everywhere");
    }
    const Eigen::ArrayXd f = fixed.data().cast<double>();
    double data_term = 0.0;
    for (const auto& w : warped_samples) {
        require_same_dims(w.dims(), fixed.dims(), "uncertainty_loss");
        const Eigen::ArrayXd r = w.data().cast<double>() - f;
        data_term += (r.square() / (2.0 * sigma2_dense)).sum();
    }
    data_term /= double(warped_samples.size());
    return data_term + weights.lambda0 * sigma2_dense.log().sum();
}

template <typename Scalar>
GriddedField<Scalar> mc_sample_field(const GriddedField<Scalar>& f, const Field3<Scalar>& noise) {
    if (!f.bayesian()) {
        throw std::invalid_argument("mc_sample_field needs a Bayesian field (eta present)");
    }
    if (noise.cols() != f.mu.cols()) {
        throw std::invalid_argument("noise shape does not match the grid");
    }
    const Field3<Scalar> sigma = f.sigma2().cwiseSqrt();
    return GriddedField<Scalar>{f.grid, f.mu + sigma.cwiseProduct(noise), std::nullopt};
}

template GriddedField<float> mc_sample_field(const GriddedField<float>&, const Field3<float>&);
template GriddedField<double> mc_sample_field(const GriddedField<double>&, const Field3<double>&);

Eigen::ArrayXd dense_variance(const GriddedField<double>& f, const Upsampler& up) {
    const Eigen::RowVectorXd mean_var = f.sigma2().colwise().mean();
    const Eigen::RowVectorXd dense = up.apply(mean_var);
    return dense.transpose().array().max(kVarianceFloor);
}

double dice_loss(const MaskVolume& warped, const MaskVolume& fixed, double epsilon) {
    require_same_dims(warped.dims(), fixed.dims(), "dice_loss");
    const Eigen::ArrayXd w = warped.data().cast<double>();
    const Eigen::ArrayXd f = fixed.data().cast<double>();
    return 1.0 - 2.0 * (f * w).sum() / (f.sum() + w.sum() + epsilon);
}

namespace {

// Visits every interior voxel with the six second-difference stencils for one component.
template <typename Scalar, typename Fn>
void for_each_interior(const DenseField<Scalar>& field, Fn&& fn) {
    const Dims3& d = field.dims;
    const Eigen::Index sx = 1, sy = d(0), sz = Eigen::Index(d(0)) * d(1);
    for (Eigen::Index k = 1; k + 1 < d(2); ++k) {
        for (Eigen::Index j = 1; j + 1 < d(1); ++j) {
            for (Eigen::Index i = 1; i + 1 < d(0); ++i) {
                fn(linear_index(d, i, j, k), sx, sy, sz);
            }
        }
    }
}

template <typename Scalar>
void check_bending_dims(const DenseField<Scalar>& field) {
    if ((field.dims < 3).any()) {
        throw std::invalid_argument("bending energy needs dims >= 3 on every axis, got " + to_string(field.dims));
    }
}

} // namespace

template <typename Scalar>
double bending_energy(const DenseField<Scalar>& field) {
    check_bending_dims(field);
    const auto interior = double(field.dims(0) - 2) * double(field.dims(1) - 2) * double(field.dims(2) - 2);
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        const auto u = [&](Eigen::Index n) { return double(field.u(c, n)); };
        for_each_interior(field, [&](Eigen::Index n, Eigen::Index sx, Eigen::Index sy, Eigen::Index sz) {
            const double dxx = u(n + sx) - 2.0 * u(n) + u(n - sx);
            const double dyy = u(n + sy) - 2.0 * u(n) + u(n - sy);
            const double dzz = u(n + sz) - 2.0 * u(n) + u(n - sz);
            const double dxy = 0.25 * (u(n + sx + sy) - u(n + sx - sy) - u(n - sx + sy) + u(n - sx - sy));
            const double dxz = 0.25 * (u(n + sx + sz) - u(n + sx - sz) - u(n - sx + sz) + u(n - sx - sz));
            const double dyz = 0.25 * (u(n + sy + sz) - u(n + sy - sz) - u(n - sy + sz) + u(n - sy - sz));
            total += dxx * dxx + dyy * dyy + dzz * dzz + 2.0 * (dxy * dxy + dxz * dxz + dyz * dyz);
        });
    }
    return total / interior;
}

template double bending_energy(const DenseField<float>&);
template double bending_energy(const DenseField<double>&);

Field3<double> bending_energy_gradient(const DenseField<double>& field) {
    check_bending_dims(field);
    const auto interior = double(field.dims(0) - 2) * double(field.dims(1) - 2) * double(field.dims(2) - 2);
    Field3<double> g = Field3<double>::Zero(3, field.u.cols());
    for (int c = 0; c < 3; ++c) {
        const auto u = [&](Eigen::Index n) { return field.u(c, n); };
        auto scatter_pure = [&](Eigen::Index n, Eigen::Index s, double coeff) {
            g(c, n + s) += coeff;
            g(c, n) -= 2.0 * coeff;
            g(c, n - s) += coeff;
        };
        auto scatter_mixed = [&](Eigen::Index n, Eigen::Index a, Eigen::Index b, double coeff) {
            g(c, n + a + b) += coeff;
            g(c, n + a - b) -= coeff;
            g(c, n - a + b) -= coeff;
            g(c, n - a - b) += coeff;
        };
        for_each_interior(field, [&](Eigen::Index n, Eigen::Index sx, Eigen::Index sy, Eigen::Index sz) {
            const double dxx = u(n + sx) - 2.0 * u(n) + u(n - sx);
            const double dyy = u(n + sy) - 2.0 * u(n) + u(n - sy);
            const double dzz = u(n + sz) - 2.0 * u(n) + u(n - sz);
            const double dxy = 0.25 * (u(n + sx + sy) - u(n + sx - sy) - u(n - sx + sy) + u(n - sx - sy));
            const double dxz = 0.25 * (u(n + sx + sz) - u(n + sx - sz) - u(n - sx + sz) + u(n - sx - sz));
            const double dyz = 0.25 * (u(n + sy + sz) - u(n + sy - sz) - u(n - sy + sz) + u(n - sy - sz));
            scatter_pure(n, sx, 2.0 * dxx / interior);
            scatter_pure(n, sy, 2.0 * dyy / interior);
            scatter_pure(n, sz, 2.0 * dzz / interior);
            // d/du of 2*(0.25*S)^2 is 4*(0.25*S)*0.25 = dxy per stencil entry
            scatter_mixed(n, sx, sy, dxy / interior);
            scatter_mixed(n, sx, sz, dxz / interior);
            scatter_mixed(n, sy, sz, dyz / interior);
        });
    }
    return g;
}

void RegistrationPair::validate() const {
    require_same_dims(fixed.dims(), moving.dims(), "registration pair");
    if ((fixed_mask == nullptr) != (moving_mask == nullptr)) {
        throw std::invalid_argument("registration pair needs both masks or neither");
    }
    if (fixed_mask) {
        require_same_dims(fixed_mask->dims(), fixed.dims(), "fixed mask");
        require_same_dims(moving_mask->dims(), fixed.dims(), "moving mask");
    }
}

LossGradient evaluate_loss(const RegistrationPair& pair, const GriddedField<double>& field, const Upsampler& up,
                           const LossWeights& weights, std::span<const Field3<double>> noise, bool with_gradient) {
    pair.validate();
    weights.validate();
    field.validate();
    if (!(field.grid == up.grid())) {
        throw std::invalid_argument("field grid does not match the upsampler grid");
    }
    if (!(field.grid.image_dims == pair.fixed.dims()).all()) {
        throw std::invalid_argument("field image dims " + to_string(field.grid.image_dims) + " differ from volume dims " +
                                    to_string(pair.fixed.dims()));
    }
    const Dims3 dims = pair.fixed.dims();
    const double n_vox = double(voxel_count(dims));
    const double lambda2 = pair.has_masks() ? weights.lambda2 : 0.0;

    LossGradient out;
    const DenseField<double> mean_field{dims, up.apply(field.mu)};
    // gradient w.r.t. the mean dense field, pulled back through the upsampler at the end
    Field3<double> d_mean;
    if (with_gradient) {
        d_mean = Field3<double>::Zero(3, mean_field.u.cols());
    }
    const Eigen::ArrayXd fixed = pair.fixed.data().cast<double>();

    if (!field.bayesian()) {
        const auto w = warp_values(pair.moving.data(), dims, mean_field, pair.boundary, with_gradient);
        const Eigen::ArrayXd r = w.values - fixed;
        out.loss.similarity = r.square().sum() / n_vox;
        if (with_gradient && weights.lambda1 != 0.0) {
            const Eigen::RowVectorXd coeff = (weights.lambda1 * 2.0 / n_vox) * r.transpose().matrix();
            d_mean += w.gradient * coeff.asDiagonal();
        }
    } else {
        if (noise.empty()) {
            throw std::invalid_argument("Bayesian loss needs at least one Monte-Carlo noise draw");
        }
        const double s_count = double(noise.size());
        const Field3<double> var_grid = field.sigma2();
        const Field3<double> sd_grid = var_grid.cwiseSqrt();
        const Eigen::ArrayXd var_dense = dense_variance(field, up);
        Eigen::ArrayXd residual_sum = Eigen::ArrayXd::Zero(var_dense.size());
        Field3<double> d_var_grid = Field3<double>::Zero(3, field.mu.cols());
        Field3<double> d_mu_samples = Field3<double>::Zero(3, field.mu.cols());
        for (const auto& eps : noise) {
            if (eps.cols() != field.mu.cols()) {
                throw std::invalid_argument("noise shape does not match the grid");
            }
            const Field3<double> mu_s = field.mu + sd_grid.cwiseProduct(eps);
            const DenseField<double> sample{dims, up.apply(mu_s)};
            const auto w = warp_values(pair.moving.data(), dims, sample, pair.boundary, with_gradient);
            const Eigen::ArrayXd r = w.values - fixed;
            residual_sum += r.square();
            if (with_gradient && weights.lambda1 != 0.0) {
                const Eigen::ArrayXd coeff = weights.lambda1 / (n_vox * s_count) * r / var_dense;
                const Field3<double> g_dense = w.gradient * coeff.matrix().asDiagonal();
                const Field3<double> g_grid = up.adjoint(g_dense);
                d_mu_samples += g_grid;
                d_var_grid += g_grid.cwiseProduct(eps).cwiseQuotient(2.0 * sd_grid);
            }
        }
        const double data_term = (residual_sum / (2.0 * var_dense)).sum() / s_count;
        const double log_term = weights.lambda0 * var_dense.log().sum();
        out.loss.similarity = (data_term + log_term) / n_vox;

        if (with_gradient && weights.lambda1 != 0.0) {
            // the lifted variance is a convex combination of floored values, so its own floor never binds
            const Eigen::ArrayXd d_var_dense =
                weights.lambda1 / n_vox *
                (-(residual_sum / s_count) / (2.0 * var_dense.square()) + weights.lambda0 / var_dense);
            const Eigen::RowVectorXd d_mean_var = up.adjoint(d_var_dense.transpose().matrix());
            d_var_grid.rowwise() += d_mean_var / 3.0;

            const Field3<double>& eta = *field.eta;
            const Field3<double> d_eta = d_var_grid.binaryExpr(eta, [](double dv, double e) {
                return softplus(e) > kVarianceFloor ? dv * sigmoid(e) : 0.0;
            });
            out.d_mu = d_mu_samples;
            out.d_eta = d_eta;
        } else if (with_gradient) {
            out.d_mu = Field3<double>::Zero(3, field.mu.cols());
            out.d_eta = Field3<double>::Zero(3, field.mu.cols());
        }
    }

    if (lambda2 > 0.0) {
        const auto w = warp_values(pair.moving_mask->data(), dims, mean_field, pair.boundary, with_gradient);
        const Eigen::ArrayXd warped = w.values.cwiseMax(0.0).cwiseMin(1.0);
        const Eigen::ArrayXd f = pair.fixed_mask->data().cast<double>();
        const double inter = (f * warped).sum();
        const double denom = f.sum() + warped.sum() + weights.epsilon;
        out.loss.dice = 1.0 - 2.0 * inter / denom;
        if (with_gradient) {
            const Eigen::ArrayXd coeff = lambda2 * (-2.0 * f / denom + 2.0 * inter / (denom * denom));
            d_mean += w.gradient * coeff.matrix().asDiagonal();
        }
    }

    if (weights.lambda3 > 0.0) {
        out.loss.bending = bending_energy(mean_field);
        if (with_gradient) {
            d_mean += weights.lambda3 * bending_energy_gradient(mean_field);
        }
    }

    out.loss.total =
        weights.lambda1 * out.loss.similarity + lambda2 * out.loss.dice + weights.lambda3 * out.loss.bending;

    if (!std::isfinite(out.loss.total)) {
        std::string term = !std::isfinite(out.loss.similarity) ? "similarity"
                           : !std::isfinite(out.loss.dice)     ? "dice"
                                                               : "bending";
        throw std::runtime_error("non-finite loss in the " + term + " term");
    }

    if (with_gradient) {
        const Field3<double> from_mean = up.adjoint(d_mean);
        if (field.bayesian()) {
            out.d_mu += from_mean;
        } else {
            out.d_mu = from_mean;
        }
    }
    return out;
}

LossBreakdown total_loss(const RegistrationPair& pair, const GriddedField<double>& field, const InterpKernel& kernel,
                         const LossWeights& weights, std::span<const Field3<double>> noise) {
    const Upsampler up(field.grid, kernel);
    return evaluate_loss(pair, field, up, weights, noise, false).loss;
}

LossGradient grad_total_wrt_grid(const RegistrationPair& pair, const GriddedField<double>& field,
                                 const InterpKernel& kernel, const LossWeights& weights,
                                 std::span<const Field3<double>> noise) {
    const Upsampler up(field.grid, kernel);
    return evaluate_loss(pair, field, up, weights, noise, true);
}

std::vector<Field3<double>> draw_noise(Eigen::Index grid_size, int samples, std::uint64_t seed, std::uint64_t counter) {
    auto engine = make_engine(seed, Stream::mc_samples, counter);
    std::vector<Field3<double>> out;
    out.reserve(static_cast<std::size_t>(samples));
    for (int s = 0; s < samples; ++s) {
        Field3<double> eps(3, grid_size);
        fill_standard_normal(eps, engine);
        out.push_back(std::move(eps));
    }
    return out;
}

} // namespace gridreg
