#include "oracles.hpp"

#include "gridreg/metrics.hpp"

#include <doctest.h>

#include <Eigen/LU>

#include <cmath>
#include <numbers>

using namespace gridreg;

namespace {

MaskVolume cube(const Dims3& dims, const Eigen::Array3i& lo, const Eigen::Array3i& hi,
                const Eigen::Vector3d& spacing = Eigen::Vector3d::Ones()) {
    Eigen::ArrayXf data = Eigen::ArrayXf::Zero(voxel_count(dims));
    for (int z = lo(2); z < hi(2); ++z)
        for (int y = lo(1); y < hi(1); ++y)
            for (int x = lo(0); x < hi(0); ++x) data(linear_index(dims, x, y, z)) = 1.0f;
    return MaskVolume(dims, spacing, data);
}

} // namespace

TEST_CASE("dice examples") {
    const Dims3 d = Dims3::Constant(8);
    const MaskVolume a = cube(d, {1, 1, 1}, {5, 5, 5});
    CHECK(dice_score(a, a) == 1.0);
    CHECK(dice_score(a, cube(d, {5, 5, 5}, {8, 8, 8})) == 0.0);
    CHECK(dice_score(a, cube(d, {3, 1, 1}, {7, 5, 5})) == doctest::Approx(0.5));
    const MaskVolume empty = cube(d, {0, 0, 0}, {0, 0, 0});
    CHECK(dice_score(empty, empty) == 1.0);
    // soft values are binarised at 0.5
    Eigen::ArrayXf soft = a.data() * 0.6f;
    CHECK(dice_score(MaskVolume(d, Eigen::Vector3d::Ones(), soft), a) == 1.0);
    CHECK_THROWS(dice_score(a, cube(Dims3::Constant(7), {0, 0, 0}, {1, 1, 1})));
}

TEST_CASE("centroid distances") {
    const Dims3 d = Dims3::Constant(12);
    const MaskVolume a = cube(d, {1, 2, 2}, {5, 6, 6}), b = cube(d, {4, 2, 2}, {8, 6, 6});
    CHECK((mask_centroid(a) - Eigen::Vector3d(2.5, 3.5, 3.5)).norm() < 1e-12);
    CHECK(centroid_distance(a, b, Eigen::Vector3d::Ones()) == doctest::Approx(3.0));
    CHECK(centroid_distance(a, cube(d, {3, 2, 2}, {7, 6, 6}), Eigen::Vector3d(1.5, 1, 1)) == doctest::Approx(3.0));
    CHECK_THROWS(mask_centroid(cube(d, {0, 0, 0}, {0, 0, 0})));

    LandmarkSet p{{Eigen::Vector3d(0, 0, 0), Eigen::Vector3d(1, 1, 1)}, {"a", "b"}};
    LandmarkSet q{{Eigen::Vector3d(3, 4, 0), Eigen::Vector3d(1, 1, 2)}, {"a", "b"}};
    CHECK(centroid_distance(p, q, Eigen::Vector3d::Ones()) == doctest::Approx(3.0));
    CHECK(centroid_distance(p, q, Eigen::Vector3d(1, 1, 2)) == doctest::Approx(3.5));
    q.points.pop_back();
    q.ids.pop_back();
    CHECK_THROWS(centroid_distance(p, q, Eigen::Vector3d::Ones()));
}

TEST_CASE("landmark transfer") {
    const Dims3 d = Dims3::Constant(6);
    auto f = DenseField<double>::zeros(d);
    f.u.row(0).setConstant(1.0);
    const LandmarkSet p{{Eigen::Vector3d(2, 2, 2), Eigen::Vector3d(0.5, 4.0, 1.25)}, {"a", "b"}};
    const auto moved = landmark_transfer(p, f);
    CHECK(moved.points[0] == Eigen::Vector3d(3, 2, 2));
    CHECK((moved.points[1] - Eigen::Vector3d(1.5, 4.0, 1.25)).norm() < 1e-12);
    CHECK(moved.ids == p.ids);

    // affine field is reproduced exactly between voxels
    Eigen::Matrix3d a;
    a << 0.1, 0.0, 0.2, 0.0, -0.1, 0.0, 0.05, 0.0, 0.0;
    const auto aff = DenseField<double>::affine(d, a, Eigen::Vector3d(0.5, 0, -0.5));
    const Eigen::Vector3d x(1.3, 2.7, 3.9);
    const auto t = landmark_transfer(LandmarkSet{{x}, {"x"}}, aff);
    CHECK((t.points[0] - (x + a * x + Eigen::Vector3d(0.5, 0, -0.5))).norm() < 1e-12);
}

TEST_CASE("jacobian statistics") {
    const Dims3 d = Dims3::Constant(7);
    CHECK(jacobian_stats(DenseField<double>::zeros(d)).mean_log_det == 0.0);

    Eigen::Matrix3d a = Eigen::Matrix3d::Zero();
    a(0, 0) = 0.1;
    const auto stretch = jacobian_stats(DenseField<double>::affine(d, a, Eigen::Vector3d::Zero()));
    CHECK(stretch.mean_log_det == doctest::Approx(0.09531).epsilon(1e-4));
    CHECK(stretch.folding_rate == 0.0);
    CHECK(stretch.evaluated == 125);

    a(0, 0) = -2.0;
    const auto fold = jacobian_stats(DenseField<double>::affine(d, a, Eigen::Vector3d::Zero()));
    CHECK(fold.folding_rate == 100.0);
    CHECK(fold.excluded == 125);

    Eigen::Matrix3d m;
    m << 0.05, 0.1, -0.02, 0.0, 0.2, 0.03, -0.1, 0.0, -0.05;
    const auto gen = jacobian_stats(DenseField<double>::affine(d, m, Eigen::Vector3d(1, 2, 3)));
    CHECK(gen.std_log_det <= 1e-9);
    CHECK(gen.mean_log_det == doctest::Approx(std::log((Eigen::Matrix3d::Identity() + m).determinant())));

    const auto dets = jacobian_determinants(DenseField<double>::zeros(d));
    CHECK(std::isnan(dets(0)));
    CHECK(dets(linear_index(d, 3, 3, 3)) == 1.0);
    CHECK_THROWS(jacobian_stats(DenseField<double>::zeros(Dims3(2, 5, 5))));
}

TEST_CASE("student t tail") {
    for (double t : {-3.0, -0.5, 0.0, 0.3, 1.0, 2.5, 10.0}) {
        CAPTURE(t);
        CHECK(std::abs(student_t_sf(t, 1.0) - (0.5 - std::atan(t) / std::numbers::pi)) < 1e-8);
        CHECK(std::abs(student_t_sf(t, 2.0) - (0.5 - t / (2.0 * std::sqrt(2.0 + t * t)))) < 1e-8);
    }
    CHECK(student_t_sf(2.228, 10.0) == doctest::Approx(0.025).epsilon(1e-3));
    CHECK(incomplete_beta(1.0, 1.0, 0.3) == doctest::Approx(0.3));
    CHECK(incomplete_beta(2.5, 1.0, 0.4) == doctest::Approx(std::pow(0.4, 2.5)));
    CHECK_THROWS(student_t_sf(1.0, 0.0));
}

TEST_CASE("benjamini hochberg") {
    const std::vector<double> p{0.01, 0.02, 0.04};
    const auto q = benjamini_hochberg(p);
    CHECK(q[0] == doctest::Approx(0.03));
    CHECK(q[1] == doctest::Approx(0.03));
    CHECK(q[2] == doctest::Approx(0.04));
    const std::vector<double> shuffled{0.04, 0.01, 0.02};
    const auto qs = benjamini_hochberg(shuffled);
    CHECK(qs[0] == doctest::Approx(0.04));
    CHECK(qs[1] == doctest::Approx(0.03));
    const std::vector<double> high{0.9, 0.8};
    CHECK(benjamini_hochberg(high)[0] <= 1.0);
}

TEST_CASE("paired t tests") {
    std::vector<double> a(12), b(12);
    for (int i = 0; i < 12; ++i) {
        b[std::size_t(i)] = 0.5 + 0.01 * i;
        a[std::size_t(i)] = b[std::size_t(i)] + 0.1;
    }
    const auto constant = paired_t_test(a, b);
    CHECK(constant.p_value < 1e-6);
    CHECK(constant.mean_difference == doctest::Approx(0.1));
    CHECK(paired_t_test(b, b).p_value == 1.0);
    CHECK(paired_t_test(b, a).p_value == 1.0);

    // hand-computed: diffs 1, 2, 3 -> mean 2, sd 1, t = 2 sqrt(3), dof 2
    const std::vector<double> x{1, 2, 3}, zero{0, 0, 0};
    const auto r = paired_t_test(x, zero);
    CHECK(r.t_statistic == doctest::Approx(2.0 * std::sqrt(3.0)));
    const double t = r.t_statistic;
    CHECK(r.p_value == doctest::Approx(0.5 - t / (2.0 * std::sqrt(2.0 + t * t))));
    CHECK_THROWS(paired_t_test(std::vector<double>{1.0}, std::vector<double>{0.0}));

    const std::vector<PairedSamples> fam{{"f", "one", x, zero}, {"f", "two", a, b}, {"g", "three", x, zero}};
    const auto res = paired_tests(fam);
    REQUIRE(res.size() == 3);
    CHECK(res[2].q_value == doctest::Approx(res[2].p_value));
    CHECK(res[0].q_value == doctest::Approx(res[0].p_value)); // largest p of its family keeps rank n
}
