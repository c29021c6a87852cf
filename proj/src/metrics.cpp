#include "gridreg/metrics.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace gridreg {

double dice_score(const MaskVolume& a, const MaskVolume& b) {
    if (!a.same_geometry(b)) {
        throw std::invalid_argument("dice_score: dims " + to_string(a.dims()) + " and " + to_string(b.dims()) +
                                    " differ");
    }
    const auto ba = (a.data() >= 0.5f);
    const auto bb = (b.data() >= 0.5f);
    const auto size_a = ba.count();
    const auto size_b = bb.count();
    if (size_a + size_b == 0) {
        return 1.0;
    }
    const auto overlap = (ba && bb).count();
    return 2.0 * double(overlap) / double(size_a + size_b);
}

Eigen::Vector3d mask_centroid(const MaskVolume& m) {
    const Dims3& d = m.dims();
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    double mass = 0.0;
    for (Eigen::Index k = 0; k < d(2); ++k) {
        for (Eigen::Index j = 0; j < d(1); ++j) {
            for (Eigen::Index i = 0; i < d(0); ++i) {
                const double s = m(i, j, k);
                if (s != 0.0) {
                    acc += s * Eigen::Vector3d(double(i), double(j), double(k));
                    mass += s;
                }
            }
        }
    }
    if (!(mass > 0.0)) {
        throw std::invalid_argument("centroid of an empty mask is undefined");
    }
    return acc / mass;
}

double centroid_distance(const MaskVolume& a, const MaskVolume& b, const Eigen::Vector3d& spacing) {
    if (!a.same_geometry(b)) {
        throw std::invalid_argument("centroid_distance: mask dims differ");
    }
    return ((mask_centroid(a) - mask_centroid(b)).cwiseProduct(spacing)).norm();
}

double centroid_distance(const LandmarkSet& a, const LandmarkSet& b, const Eigen::Vector3d& spacing) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("centroid_distance: landmark counts differ (" + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
    }
    if (a.size() == 0) {
        throw std::invalid_argument("centroid_distance: empty landmark sets");
    }
    double total = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) {
        total += (a.points[n] - b.points[n]).cwiseProduct(spacing).norm();
    }
    return total / double(a.size());
}

namespace {

template <typename Scalar>
Eigen::Vector3d sample_field(const DenseField<Scalar>& f, const Eigen::Vector3d& p) {
    const Dims3& d = f.dims;
    Eigen::Index lo[3];
    double t[3];
    for (int a = 0; a < 3; ++a) {
        if (d(a) == 1) {
            lo[a] = 0;
            t[a] = 0.0;
            continue;
        }
        lo[a] = std::min<Eigen::Index>(static_cast<Eigen::Index>(std::floor(p(a))), d(a) - 2);
        t[a] = p(a) - double(lo[a]);
    }
    Eigen::Vector3d out = Eigen::Vector3d::Zero();
    for (int dz = 0; dz < 2; ++dz) {
        for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
                const double w = (dx ? t[0] : 1.0 - t[0]) * (dy ? t[1] : 1.0 - t[1]) * (dz ? t[2] : 1.0 - t[2]);
                if (w == 0.0) {
                    continue;
                }
                const auto n = linear_index(d, std::min<Eigen::Index>(lo[0] + dx, d(0) - 1),
                                            std::min<Eigen::Index>(lo[1] + dy, d(1) - 1),
                                            std::min<Eigen::Index>(lo[2] + dz, d(2) - 1));
                out += w * f.u.col(n).template cast<double>();
            }
        }
    }
    return out;
}

} // namespace

template <typename Scalar>
LandmarkSet landmark_transfer(const LandmarkSet& points, const DenseField<Scalar>& field) {
    validate(points);
    check_bounds(points, field.dims, BoundsPolicy::error);
    LandmarkSet out = points;
    for (auto& p : out.points) {
        p += sample_field(field, p);
    }
    return out;
}

template LandmarkSet landmark_transfer(const LandmarkSet&, const DenseField<float>&);
template LandmarkSet landmark_transfer(const LandmarkSet&, const DenseField<double>&);

Eigen::ArrayXd jacobian_determinants(const DenseField<double>& field) {
    const Dims3& d = field.dims;
    if ((d < 3).any()) {
        throw std::invalid_argument("jacobian needs dims >= 3 on every axis, got " + to_string(d));
    }
    Eigen::ArrayXd det = Eigen::ArrayXd::Constant(voxel_count(d), std::numeric_limits<double>::quiet_NaN());
    const Eigen::Index step[3] = {1, d(0), Eigen::Index(d(0)) * d(1)};
    for (Eigen::Index k = 1; k + 1 < d(2); ++k) {
        for (Eigen::Index j = 1; j + 1 < d(1); ++j) {
            for (Eigen::Index i = 1; i + 1 < d(0); ++i) {
                const auto n = linear_index(d, i, j, k);
                Eigen::Matrix3d jac = Eigen::Matrix3d::Identity();
                for (int a = 0; a < 3; ++a) {
                    jac.col(a) += 0.5 * (field.u.col(n + step[a]) - field.u.col(n - step[a]));
                }
                det(n) = jac.determinant();
            }
        }
    }
    return det;
}

template <typename Scalar>
JacobianReport jacobian_stats(const DenseField<Scalar>& field) {
    const Eigen::ArrayXd det = jacobian_determinants(field.template cast<double>());
    JacobianReport r;
    double sum = 0.0, sum_sq = 0.0;
    long long positive = 0, negative = 0;
    for (Eigen::Index n = 0; n < det.size(); ++n) {
        const double v = det(n);
        if (std::isnan(v)) {
            continue;
        }
        ++r.evaluated;
        if (v > 0.0) {
            const double l = std::log(v);
            sum += l;
            sum_sq += l * l;
            ++positive;
        } else {
            ++r.excluded;
            if (v < 0.0) {
                ++negative;
            }
        }
    }
    if (positive > 0) {
        r.mean_log_det = sum / double(positive);
        r.std_log_det = std::sqrt(std::max(0.0, sum_sq / double(positive) - r.mean_log_det * r.mean_log_det));
    }
    r.folding_rate = r.evaluated > 0 ? 100.0 * double(negative) / double(r.evaluated) : 0.0;
    return r;
}

template JacobianReport jacobian_stats(const DenseField<float>&);
template JacobianReport jacobian_stats(const DenseField<double>&);

namespace {

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
    constexpr int max_iter = 500;
    constexpr double eps = 1e-16;
    constexpr double tiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) {
            break;
        }
    }
    return h;
}

} // namespace

double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0 && b > 0.0)) {
        throw std::invalid_argument("incomplete_beta needs a, b > 0");
    }
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                             b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * beta_continued_fraction(a, b, x) / a;
    }
    return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_sf(double t, double dof) {
    if (!(dof > 0.0)) {
        throw std::invalid_argument("student_t_sf needs dof > 0");
    }
    if (std::isinf(t)) {
        return t > 0 ? 0.0 : 1.0;
    }
    const double x = dof / (dof + t * t);
    const double tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, x);
    return t >= 0.0 ? tail : 1.0 - tail;
}

PairedTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("paired test: sample lengths differ (" + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
    }
    if (a.size() < 2) {
        throw std::invalid_argument("paired test needs at least 2 cases");
    }
    const std::size_t n = a.size();
    Eigen::ArrayXd diff(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        diff(static_cast<Eigen::Index>(i)) = a[i] - b[i];
    }
    PairedTestResult r;
    r.n = n;
    r.mean_difference = diff.mean();
    const double var = (diff - r.mean_difference).square().sum() / double(n - 1);
    // variance at rounding level of the mean counts as zero
    const double scale = std::max(1.0, diff.abs().maxCoeff());
    if (var <= 1e-28 * scale * scale) {
        if (r.mean_difference > 0.0) {
            r.t_statistic = std::numeric_limits<double>::infinity();
            r.p_value = 0.0;
        } else {
            r.t_statistic = r.mean_difference < 0.0 ? -std::numeric_limits<double>::infinity() : 0.0;
            r.p_value = 1.0;
        }
        return r;
    }
    r.t_statistic = r.mean_difference / std::sqrt(var / double(n));
    r.p_value = student_t_sf(r.t_statistic, double(n - 1));
    return r;
}

std::vector<double> benjamini_hochberg(std::span<const double> p_values) {
    const std::size_t m = p_values.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return p_values[i] < p_values[j]; });
    std::vector<double> q(m);
    double running = 1.0;
    for (std::size_t r = m; r-- > 0;) {
        const std::size_t idx = order[r];
        running = std::min(running, p_values[idx] * double(m) / double(r + 1));
        q[idx] = running;
    }
    return q;
}

std::vector<PairedTestResult> paired_tests(std::span<const PairedSamples> comparisons) {
    std::vector<PairedTestResult> results;
    results.reserve(comparisons.size());
    std::map<std::string, std::vector<std::size_t>> families;
    for (const auto& c : comparisons) {
        auto r = paired_t_test(c.a, c.b);
        r.family = c.family;
        r.name = c.name;
        families[c.family].push_back(results.size());
        results.push_back(std::move(r));
    }
    for (const auto& [family, members] : families) {
        std::vector<double> p;
        for (auto i : members) {
            p.push_back(results[i].p_value);
        }
        const auto q = benjamini_hochberg(p);
        for (std::size_t k = 0; k < members.size(); ++k) {
            results[members[k]].q_value = q[k];
        }
    }
    return results;
}

} // namespace gridreg
