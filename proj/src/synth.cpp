#include "gridreg/synth.hpp"

#include "gridreg/metrics.hpp"
#include "gridreg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gridreg {

namespace {
constexpr double kTwoPi = 6.283185307179586;
}

double PhantomModel::texture(const Eigen::Vector3d& p) const {
    const Eigen::Vector3d q = p.cwiseQuotient(dims.cast<double>().matrix());
    double t = 0.0;
    for (std::size_t m = 0; m < waves.size(); ++m) {
        t += amplitudes[m] * std::cos(kTwoPi * waves[m].dot(q) + phases[m]);
    }
    return t;
}

double PhantomModel::radius(const Eigen::Vector3d& p) const {
    return (p - center).cwiseQuotient(radii).norm();
}

double PhantomModel::intensity(const Eigen::Vector3d& p) const {
    // one-voxel soft edge on the organ boundary
    const double edge = (1.0 - radius(p)) * radii.mean();
    const double organ = 1.0 / (1.0 + std::exp(-edge));
    return 0.3 + 0.3 * organ + 0.3 * texture(p);
}

Phantom make_phantom(const Dims3& dims, std::uint64_t seed) {
    if ((dims < 16).any()) {
        throw std::invalid_argument("phantom dims must be >= 16 per axis, got " + to_string(dims));
    }
    auto rng = make_engine(seed, Stream::phantom);
    const Eigen::Vector3d extent = dims.cast<double>().matrix();
    PhantomModel model;
    model.dims = dims;
    for (int a = 0; a < 3; ++a) {
        model.center(a) = extent(a) * uniform_real(rng, 0.45, 0.55);
        model.radii(a) = extent(a) * uniform_real(rng, 0.30, 0.42);
    }
    double amp_total = 0.0;
    for (std::size_t m = 0; m < model.waves.size(); ++m) {
        Eigen::Vector3d k;
        do {
            for (int a = 0; a < 3; ++a) {
                k(a) = std::floor(uniform_real(rng, -3.0, 4.0));
            }
        } while (k.isZero());
        model.waves[m] = k;
        model.phases[m] = uniform_real(rng, 0.0, kTwoPi);
        model.amplitudes[m] = uniform_real(rng, 0.5, 1.0);
        amp_total += model.amplitudes[m];
    }
    for (auto& a : model.amplitudes) {
        a /= amp_total;
    }

    const auto n = voxel_count(dims);
    Eigen::ArrayXf image(n), mask(n);
    Eigen::ArrayXd tex(n);
    for (int k = 0; k < dims(2); ++k) {
        for (int j = 0; j < dims(1); ++j) {
            for (int i = 0; i < dims(0); ++i) {
                const Eigen::Vector3d p(i, j, k);
                const auto idx = linear_index(dims, i, j, k);
                image(idx) = static_cast<float>(model.intensity(p));
                mask(idx) = model.inside(p) ? 1.0f : 0.0f;
                tex(idx) = model.texture(p);
            }
        }
    }

    // landmarks: local texture extrema well inside the organ, strongest first
    struct Candidate {
        double strength;
        Eigen::Vector3d p;
    };
    std::vector<Candidate> candidates;
    for (int k = 1; k + 1 < dims(2); ++k) {
        for (int j = 1; j + 1 < dims(1); ++j) {
            for (int i = 1; i + 1 < dims(0); ++i) {
                const Eigen::Vector3d p(i, j, k);
                if (model.radius(p) > 0.8) {
                    continue;
                }
                const double v = tex(linear_index(dims, i, j, k));
                bool is_max = true, is_min = true;
                for (int dz = -1; dz <= 1; ++dz) {
                    for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            if (dx == 0 && dy == 0 && dz == 0) continue;
                            const double w = tex(linear_index(dims, i + dx, j + dy, k + dz));
                            is_max = is_max && v > w;
                            is_min = is_min && v < w;
                        }
                    }
                }
                if (is_max || is_min) {
                    candidates.push_back({std::abs(v), p});
                }
            }
        }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.strength > b.strength; });
    LandmarkSet landmarks;
    double separation = std::clamp(0.4 * model.radii.minCoeff(), 1.0, 4.0);
    auto far_enough = [&](const Eigen::Vector3d& p) {
        return std::all_of(landmarks.points.begin(), landmarks.points.end(),
                           [&](const Eigen::Vector3d& q) { return (p - q).norm() >= separation; });
    };
    for (const auto& c : candidates) {
        if (landmarks.size() == 8) break;
        if (far_enough(c.p)) {
            landmarks.points.push_back(c.p);
        }
    }
    // too few extrema: fill with random organ voxels
    for (int attempt = 1; landmarks.size() < 8; ++attempt) {
        if (attempt % 200 == 0) {
            separation *= 0.75;
        }
        Eigen::Vector3d p;
        for (int a = 0; a < 3; ++a) {
            p(a) = std::round(model.center(a) + uniform_real(rng, -0.6, 0.6) * model.radii(a));
        }
        if (model.radius(p) <= 0.8 && far_enough(p)) {
            landmarks.points.push_back(p);
        }
    }
    for (std::size_t m = 0; m < landmarks.points.size(); ++m) {
        landmarks.ids.push_back("L" + std::to_string(m + 1));
    }

    return Phantom{model, Volume(dims, Eigen::Vector3d::Ones(), std::move(image)),
                   MaskVolume(dims, Eigen::Vector3d::Ones(), std::move(mask)), std::move(landmarks)};
}

GriddedField<double> make_gt_field(const ControlGrid& grid, double max_disp, std::uint64_t seed) {
    if (!(max_disp >= 0.0)) {
        throw std::invalid_argument("max_disp must be >= 0");
    }
    const double limit = std::min({grid.spacing(0), grid.spacing(1), grid.spacing(2)}) / 3.0;
    if (max_disp > limit) {
        throw std::invalid_argument("max_disp " + std::to_string(max_disp) + " exceeds a third of the control spacing (" +
                                    std::to_string(limit) + " voxels); the field could fold");
    }
    auto rng = make_engine(seed, Stream::gt_field);
    Field3<double> raw(3, grid.size());
    for (Eigen::Index n = 0; n < raw.cols(); ++n) {
        for (int c = 0; c < 3; ++c) {
            raw(c, n) = uniform_real(rng, -max_disp, max_disp);
        }
    }
    const Dims3& g = grid.grid_dims;
    Field3<double> smooth(3, grid.size());
    for (int k = 0; k < g(2); ++k) {
        for (int j = 0; j < g(1); ++j) {
            for (int i = 0; i < g(0); ++i) {
                Eigen::Vector3d acc = raw.col(linear_index(g, i, j, k));
                int count = 1;
                const int offsets[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
                for (const auto& o : offsets) {
                    const int a = i + o[0], b = j + o[1], c = k + o[2];
                    if (a < 0 || b < 0 || c < 0 || a >= g(0) || b >= g(1) || c >= g(2)) continue;
                    acc += raw.col(linear_index(g, a, b, c));
                    ++count;
                }
                smooth.col(linear_index(g, i, j, k)) = acc / double(count);
            }
        }
    }
    // smoothing shrinks the amplitude; restore the requested peak displacement
    const double peak = smooth.cwiseAbs().maxCoeff();
    if (peak > 0.0) {
        smooth *= max_disp / peak;
    }
    GriddedField<double> f{grid, smooth, std::nullopt};
    if ((grid.image_dims >= 3).all()) {
        const auto jac = jacobian_stats(upsample_trilinear(f, grid.image_dims));
        if (jac.folding_rate > 0.0) {
            throw std::runtime_error("generated ground-truth field folds; lower max_disp");
        }
    }
    return f;
}

namespace {

Eigen::Vector3d invert_point(const GriddedField<double>& gt, const Eigen::Vector3d& target) {
    // fixed point of p = target - gt(p); contraction because |grad gt| < 1
    Eigen::Vector3d p = target;
    const auto kernel = InterpKernel::trilinear();
    for (int it = 0; it < 200; ++it) {
        const Eigen::Vector3d next = target - evaluate_at(gt, kernel, p);
        if ((next - p).norm() < 1e-12) {
            return next;
        }
        p = next;
    }
    return p;
}

MaskVolume flip_boundary(const MaskVolume& m, double rate, std::mt19937_64& rng) {
    if (rate == 0.0) {
        return m;
    }
    const Dims3& d = m.dims();
    std::vector<Eigen::Index> boundary;
    for (int k = 0; k < d(2); ++k) {
        for (int j = 0; j < d(1); ++j) {
            for (int i = 0; i < d(0); ++i) {
                const float v = m(i, j, k);
                const int offsets[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
                for (const auto& o : offsets) {
                    const int a = i + o[0], b = j + o[1], c = k + o[2];
                    if (a < 0 || b < 0 || c < 0 || a >= d(0) || b >= d(1) || c >= d(2)) continue;
                    if (m(a, b, c) != v) {
                        boundary.push_back(linear_index(d, i, j, k));
                        break;
                    }
                }
            }
        }
    }
    std::shuffle(boundary.begin(), boundary.end(), rng);
    const auto flips = static_cast<std::size_t>(std::llround(rate * double(boundary.size())));
    Eigen::ArrayXf data = m.data();
    for (std::size_t n = 0; n < flips; ++n) {
        data(boundary[n]) = 1.0f - data(boundary[n]);
    }
    return MaskVolume(d, m.spacing(), std::move(data));
}

Volume add_noise(const Volume& v, double sigma, std::mt19937_64& rng) {
    if (sigma == 0.0) {
        return v;
    }
    Eigen::ArrayXd noise(v.size());
    fill_standard_normal(noise, rng);
    Eigen::ArrayXf data = v.data() + (sigma * noise).cast<float>();
    return Volume(v.dims(), v.spacing(), std::move(data));
}

} // namespace

SynthPair make_pair(const Phantom& phantom, const GriddedField<double>& gt, double intensity_noise,
                    double label_noise, std::uint64_t seed) {
    if (!(label_noise >= 0.0 && label_noise <= 1.0)) {
        throw std::invalid_argument("label noise rate must lie in [0,1]");
    }
    if (!(intensity_noise >= 0.0)) {
        throw std::invalid_argument("intensity noise must be >= 0");
    }
    const Dims3& dims = phantom.image.dims();
    if (!(gt.grid.image_dims == dims).all()) {
        throw std::invalid_argument("ground-truth grid image dims " + to_string(gt.grid.image_dims) +
                                    " differ from phantom dims " + to_string(dims));
    }
    const auto gt_dense = upsample_trilinear(gt, dims);

    const auto n = voxel_count(dims);
    Eigen::ArrayXf fixed(n), fixed_mask(n);
    for (int k = 0; k < dims(2); ++k) {
        for (int j = 0; j < dims(1); ++j) {
            for (int i = 0; i < dims(0); ++i) {
                const auto idx = linear_index(dims, i, j, k);
                const Eigen::Vector3d q = Eigen::Vector3d(i, j, k) + gt_dense.u.col(idx);
                fixed(idx) = static_cast<float>(phantom.model.intensity(q));
                fixed_mask(idx) = phantom.model.inside(q) ? 1.0f : 0.0f;
            }
        }
    }

    LandmarkSet fixed_landmarks = phantom.landmarks;
    const Eigen::Vector3d hi = (dims - 1).cast<double>().matrix();
    for (auto& p : fixed_landmarks.points) {
        p = invert_point(gt, p).cwiseMax(Eigen::Vector3d::Zero()).cwiseMin(hi);
    }

    auto noise_rng = make_engine(seed, Stream::intensity_noise);
    auto label_rng = make_engine(seed, Stream::label_noise);
    const Volume fixed_volume(dims, phantom.image.spacing(), std::move(fixed));
    const MaskVolume fixed_mask_volume(dims, phantom.image.spacing(), std::move(fixed_mask));

    return SynthPair{add_noise(fixed_volume, intensity_noise, noise_rng),
                     add_noise(phantom.image, intensity_noise, noise_rng),
                     flip_boundary(fixed_mask_volume, label_noise, label_rng),
                     flip_boundary(phantom.mask, label_noise, label_rng),
                     std::move(fixed_landmarks),
                     phantom.landmarks,
                     gt,
                     gt_dense,
                     seed,
                     intensity_noise,
                     label_noise};
}

std::vector<SynthPair> make_suite(const SynthSuiteSpec& spec) {
    if (spec.count < 1) {
        throw std::invalid_argument("synthetic suite needs at least one pair");
    }
    const ControlGrid grid = make_control_grid(spec.dims, spec.gt_grid);
    std::vector<SynthPair> pairs;
    pairs.reserve(static_cast<std::size_t>(spec.count));
    for (int i = 0; i < spec.count; ++i) {
        const std::uint64_t s = mix64(spec.seed * 1000003ull + std::uint64_t(i));
        const auto phantom = make_phantom(spec.dims, s);
        const auto gt = make_gt_field(grid, spec.max_disp, s);
        pairs.push_back(make_pair(phantom, gt, spec.intensity_noise, spec.label_noise, s));
    }
    return pairs;
}

double endpoint_error(const DenseField<double>& a, const DenseField<double>& b) {
    if (!(a.dims == b.dims).all()) {
        throw std::invalid_argument("endpoint_error: field dims differ");
    }
    return (a.u - b.u).colwise().norm().mean();
}

} // namespace gridreg
