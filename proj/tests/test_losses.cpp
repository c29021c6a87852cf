#include "oracles.hpp"

#include "gridreg/losses.hpp"
#include "gridreg/warp.hpp"

#include <doctest.h>

#include <cmath>

using namespace gridreg;

namespace {

Volume smooth_volume(const Dims3& dims, double phase) {
    Eigen::ArrayXf data(voxel_count(dims));
    for (int z = 0; z < dims(2); ++z)
        for (int y = 0; y < dims(1); ++y)
            for (int x = 0; x < dims(0); ++x)
                data(linear_index(dims, x, y, z)) =
                    float(0.5 + 0.25 * std::sin(0.9 * x + phase) * std::cos(0.7 * y - phase) + 0.1 * std::sin(0.8 * z));
    return Volume(dims, Eigen::Vector3d::Ones(), data);
}

MaskVolume ball(const Dims3& dims, const Eigen::Vector3d& c, double r) {
    Eigen::ArrayXf data(voxel_count(dims));
    for (int z = 0; z < dims(2); ++z)
        for (int y = 0; y < dims(1); ++y)
            for (int x = 0; x < dims(0); ++x)
                data(linear_index(dims, x, y, z)) = (Eigen::Vector3d(x, y, z) - c).norm() <= r ? 1.0f : 0.0f;
    return MaskVolume(dims, Eigen::Vector3d::Ones(), data);
}

Volume one_voxel(float v) {
    return Volume(Dims3::Ones(), Eigen::Vector3d::Ones(), Eigen::ArrayXf::Constant(1, v));
}

/// Central-difference check of the analytic gradient of total_loss w.r.t. mu and eta.
void check_gradient(const RegistrationPair& pair, const GriddedField<double>& field, const InterpKernel& kernel,
                    const LossWeights& w, std::span<const Field3<double>> noise) {
    const auto g = grad_total_wrt_grid(pair, field, kernel, w, noise);
    using Mat = Field3<double>;
    const auto num_mu = oracle::central_difference<Mat>(
        [&](const Mat& mu) {
            auto f = field;
            f.mu = mu;
            return total_loss(pair, f, kernel, w, noise).total;
        },
        field.mu, 1e-6);
    CHECK(oracle::rel_error(g.d_mu, num_mu) <= 1e-4);
    if (field.bayesian()) {
        const auto num_eta = oracle::central_difference<Mat>(
            [&](const Mat& eta) {
                auto f = field;
                f.eta = eta;
                return total_loss(pair, f, kernel, w, noise).total;
            },
            *field.eta, 1e-6);
        REQUIRE(g.d_eta.has_value());
        CHECK(oracle::rel_error(*g.d_eta, num_eta) <= 1e-4);
    }
}

} // namespace

TEST_CASE("mse examples") {
    const Dims3 d = Dims3::Constant(2);
    const Volume a(d, Eigen::Vector3d::Ones(), Eigen::ArrayXf::Zero(8));
    CHECK(mse_sim(a, a) == 0.0);
    CHECK(mse_sim(Volume(d, Eigen::Vector3d::Ones(), Eigen::ArrayXf::Ones(8)), a) == 1.0);
    Eigen::ArrayXf diff = Eigen::ArrayXf::Zero(8);
    diff(0) = 1;
    diff(7) = 1;
    CHECK(mse_sim(Volume(d, Eigen::Vector3d::Ones(), diff), a) == 0.25);
}

TEST_CASE("uncertainty loss examples") {
    LossWeights w;
    w.lambda0 = 1.0;
    const Volume fixed = one_voxel(0.0f);
    const std::vector<Volume> sample{one_voxel(float(std::sqrt(2.0)))};
    CHECK(uncertainty_loss(sample, fixed, Eigen::ArrayXd::Constant(1, 2.0), w) ==
          doctest::Approx(1.19315).epsilon(1e-5));

    const Dims3 d(3, 2, 2);
    const Volume f(d, Eigen::Vector3d::Ones(), Eigen::ArrayXf::Zero(12));
    Eigen::ArrayXf r(12);
    for (int i = 0; i < 12; ++i) r(i) = float(0.1 * i);
    const std::vector<Volume> samples{Volume(d, Eigen::Vector3d::Ones(), r), Volume(d, Eigen::Vector3d::Ones(), -r)};
    w.lambda0 = 3.0;
    const double mean_l = (r.cast<double>().square()).sum();
    CHECK(uncertainty_loss(samples, f, Eigen::ArrayXd::Ones(12), w) == doctest::Approx(mean_l / 2.0));
    w.lambda0 = 0.7;
    CHECK(uncertainty_loss(std::vector<Volume>{f}, f, Eigen::ArrayXd::Constant(12, std::exp(1.0)), w) ==
          doctest::Approx(0.7 * 12));
}

TEST_CASE("reparameterised samples") {
    auto f = GriddedField<double>::zeros(make_control_grid(Dims3::Constant(8), Dims3::Constant(2)), true);
    f.mu.setConstant(0.3);
    CHECK(mc_sample_field(f, Field3<double>(Field3<double>::Zero(3, 8))).mu == f.mu);
    CHECK(!mc_sample_field(f, Field3<double>(Field3<double>::Zero(3, 8))).bayesian());

    f.mu.setZero();
    (*f.eta)(0, 2) = std::log(std::expm1(4.0)); // softplus = 4
    Field3<double> eps = Field3<double>::Zero(3, 8);
    eps(0, 2) = 1.0;
    CHECK(mc_sample_field(f, eps).mu(0, 2) == doctest::Approx(2.0));

    f.eta->setConstant(-50.0); // floor
    auto rng = make_engine(1, Stream::test);
    Field3<double> e(3, 8);
    fill_standard_normal(e, rng);
    CHECK(((mc_sample_field(f, e).mu - f.mu).array().abs() <= 1.000001e-3 * e.array().abs() + 1e-15).all());
}

TEST_CASE("dice loss examples") {
    const Dims3 d(4, 4, 2);
    auto block = [&](int x0, int x1) {
        Eigen::ArrayXf v = Eigen::ArrayXf::Zero(32);
        for (int z = 0; z < 2; ++z)
            for (int y = 0; y < 2; ++y)
                for (int x = x0; x < x1; ++x) v(linear_index(d, x, y, z)) = 1.0f;
        return MaskVolume(d, Eigen::Vector3d::Ones(), v);
    };
    const MaskVolume a = block(0, 2), b = block(1, 3), c = block(2, 4);
    CHECK(dice_loss(a, a, 1e-5) < 1e-6);
    CHECK(dice_loss(a, c, 1e-5) == doctest::Approx(1.0));
    CHECK(dice_loss(a, b, 1e-12) == doctest::Approx(0.5).epsilon(1e-10));
}

TEST_CASE("bending energy examples and gradient") {
    const Dims3 d(7, 6, 5);
    CHECK(bending_energy(DenseField<double>::zeros(d)) == 0.0);
    Eigen::Matrix3d a;
    a << 0.1, -0.2, 0.05, 0.3, 0.0, 0.1, -0.1, 0.2, 0.4;
    CHECK(std::abs(bending_energy(DenseField<double>::affine(d, a, Eigen::Vector3d(1, 2, 3)))) < 1e-20);

    auto quad = DenseField<double>::zeros(d);
    for (int z = 0; z < d(2); ++z)
        for (int y = 0; y < d(1); ++y)
            for (int x = 0; x < d(0); ++x) quad.u(0, linear_index(d, x, y, z)) = double(x * x);
    CHECK(bending_energy(quad) == doctest::Approx(4.0));

    auto rng = make_engine(3, Stream::test);
    auto f = DenseField<double>::zeros(Dims3(5, 4, 4));
    fill_standard_normal(f.u, rng);
    using Mat = Field3<double>;
    const auto num = oracle::central_difference<Mat>(
        [&](const Mat& u) { return bending_energy(DenseField<double>{f.dims, u}); }, f.u, 1e-5);
    CHECK(oracle::rel_error(bending_energy_gradient(f), num) < 1e-8);
    CHECK_THROWS(bending_energy(DenseField<double>::zeros(Dims3(2, 5, 5))));
}

TEST_CASE("total loss special cases") {
    const Dims3 d = Dims3::Constant(8);
    const Volume v = smooth_volume(d, 0.2);
    const auto grid = make_control_grid(d, Dims3::Constant(3));
    LossWeights w;
    w.lambda2 = 0.0;
    w.lambda3 = 0.0;
    const RegistrationPair same{v, v};
    const auto zero = GriddedField<double>::zeros(grid);
    CHECK(total_loss(same, zero, InterpKernel::trilinear(), w).total == 0.0);
    const auto g = grad_total_wrt_grid(same, zero, InterpKernel::trilinear(), w);
    CHECK(g.d_mu.isZero());

    // bending only, affine control field: trilinear interpolation of affine nodes is affine
    LossWeights bend{1.0, 0.0, 0.0, 1.0, 1e-5, 4};
    auto aff = GriddedField<double>::zeros(grid);
    const Eigen::MatrixX3d c = grid.coords();
    for (Eigen::Index i = 0; i < grid.size(); ++i) aff.mu.col(i) = 0.05 * c.row(i).transpose() + Eigen::Vector3d(1, 0, -1);
    CHECK(std::abs(total_loss(same, aff, InterpKernel::trilinear(), bend).total) < 1e-20);

    // term-sum oracle
    const Volume moving = smooth_volume(d, 0.9);
    const MaskVolume fm = ball(d, {3.5, 3.5, 3.5}, 2.5), mm = ball(d, {4.0, 3.2, 3.6}, 2.7);
    const RegistrationPair pair{v, moving, &fm, &mm};
    LossWeights all{1.0, 0.8, 0.6, 0.3, 1e-5, 4};
    const auto f = oracle::random_field(grid, 5, 0.6);
    const auto dense = upsample_trilinear(f, d);
    const double expect = 0.8 * mse_sim(warp_volume(moving, dense), v) + 0.6 * dice_loss(warp_mask(mm, dense), fm, 1e-5) +
                          0.3 * bending_energy(dense);
    const auto got = total_loss(pair, f, InterpKernel::trilinear(), all);
    CHECK(got.total == doctest::Approx(expect).epsilon(1e-6));

    // doubling mu doubles the dense field the loss sees
    auto f2 = f;
    f2.mu *= 2.0;
    LossWeights only_bend{1.0, 0.0, 0.0, 1.0, 1e-5, 4};
    CHECK(total_loss(same, f2, InterpKernel::trilinear(), only_bend).bending ==
          doctest::Approx(4.0 * total_loss(same, f, InterpKernel::trilinear(), only_bend).bending));

    // the Dice term is dropped without masks
    CHECK(total_loss(RegistrationPair{v, moving}, f, InterpKernel::trilinear(), all).dice == 0.0);
}

TEST_CASE("analytic loss gradients match central differences") {
    const Dims3 d = Dims3::Constant(8);
    const Volume fixed = smooth_volume(d, 0.1), moving = smooth_volume(d, 0.6);
    const MaskVolume fm = ball(d, {3.5, 3.5, 3.5}, 2.5), mm = ball(d, {3.8, 3.4, 3.3}, 2.8);
    const RegistrationPair with_masks{fixed, moving, &fm, &mm};
    const RegistrationPair without{fixed, moving};
    const LossWeights w{1.0, 1.0, 0.5, 0.2, 1e-5, 3};

    for (const auto& k : {InterpKernel::trilinear(), InterpKernel::bspline(), InterpKernel::gaussian(0.6)}) {
        const Dims3 g = k.kind == KernelKind::bspline3 ? Dims3::Constant(4) : Dims3::Constant(3);
        const auto grid = make_control_grid(d, g);
        CAPTURE(to_string(k.kind));
        check_gradient(with_masks, oracle::random_field(grid, 21, 0.7), k, w, {});
        check_gradient(without, oracle::random_field(grid, 22, 0.7), k, w, {});
        const auto noise = draw_noise(grid.size(), w.mc_samples, 7, 0);
        check_gradient(with_masks, oracle::random_field(grid, 23, 0.5, true), k, w, noise);
    }
    const RegistrationPair zero_pair{fixed, moving, nullptr, nullptr, BoundaryPolicy::zero};
    check_gradient(zero_pair, oracle::random_field(make_control_grid(d, Dims3::Constant(3)), 24, 0.7),
                   InterpKernel::trilinear(), w, {});
}

TEST_CASE("noise draws are keyed by seed and counter") {
    const auto a = draw_noise(27, 4, 3, 10), b = draw_noise(27, 4, 3, 10), c = draw_noise(27, 4, 3, 11);
    REQUIRE(a.size() == 4);
    CHECK(a[2] == b[2]);
    CHECK(a[0] != c[0]);
    CHECK(a[0] != a[1]);
}

TEST_CASE("loss weight validation") {
    LossWeights w;
    w.lambda3 = -1;
    CHECK_THROWS(w.validate());
    w = LossWeights{};
    w.mc_samples = 0;
    CHECK_THROWS(w.validate());
    w = LossWeights{};
    w.epsilon = 0;
    CHECK_THROWS(w.validate());
}
