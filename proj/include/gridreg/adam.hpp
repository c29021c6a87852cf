#pragma once

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>

namespace gridreg {

struct AdamConfig {
    double lr = 0.5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
            throw std::invalid_argument("Adam betas must lie in [0, 1)");
        }
        if (!(eps > 0.0)) throw std::invalid_argument("Adam eps must be > 0");
    }
};

/// Adam moments for one parameter block of any dense shape.
template <typename Scalar>
class AdamState {
public:
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

    AdamState() = default;
    explicit AdamState(Eigen::Index size) : m_(Array::Zero(size)), v_(Array::Zero(size)) {}

    /// In-place update x -= lr * mhat / (sqrt(vhat) + eps); `step` counts from 1.
    template <typename Derived, typename GradDerived>
    void update(Eigen::DenseBase<Derived>& x, const Eigen::DenseBase<GradDerived>& grad, const AdamConfig& cfg,
                long step) {
        if (m_.size() != x.size()) {
            m_ = Array::Zero(x.size());
            v_ = Array::Zero(x.size());
        }
        const Scalar b1 = Scalar(cfg.beta1), b2 = Scalar(cfg.beta2);
        const Scalar c1 = Scalar(1.0 - std::pow(cfg.beta1, double(step)));
        const Scalar c2 = Scalar(1.0 - std::pow(cfg.beta2, double(step)));
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const Scalar g = grad.derived().coeff(i);
            m_(i) = b1 * m_(i) + (Scalar(1) - b1) * g;
            v_(i) = b2 * v_(i) + (Scalar(1) - b2) * g * g;
            const Scalar mhat = m_(i) / c1;
            const Scalar vhat = v_(i) / c2;
            x.derived().coeffRef(i) -= Scalar(cfg.lr) * mhat / (std::sqrt(vhat) + Scalar(cfg.eps));
        }
    }

private:
    Array m_;
    Array v_;
};

} // namespace gridreg
