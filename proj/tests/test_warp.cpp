#include "oracles.hpp"

#include "gridreg/warp.hpp"

#include <doctest.h>

using namespace gridreg;

namespace {

Volume random_volume(const Dims3& dims, std::uint64_t seed) {
    auto rng = make_engine(seed, Stream::test);
    Eigen::ArrayXf data(voxel_count(dims));
    for (Eigen::Index i = 0; i < data.size(); ++i) data(i) = float(uniform_real(rng, 0.0, 1.0));
    return Volume(dims, Eigen::Vector3d::Ones(), data);
}

DenseField<double> constant_field(const Dims3& dims, const Eigen::Vector3d& v) {
    auto f = DenseField<double>::zeros(dims);
    f.u.colwise() = v;
    return f;
}

MaskVolume cube(const Dims3& dims, const Eigen::Array3i& lo, const Eigen::Array3i& hi) {
    Eigen::ArrayXf data = Eigen::ArrayXf::Zero(voxel_count(dims));
    for (int z = lo(2); z < hi(2); ++z)
        for (int y = lo(1); y < hi(1); ++y)
            for (int x = lo(0); x < hi(0); ++x) data(linear_index(dims, x, y, z)) = 1.0f;
    return MaskVolume(dims, Eigen::Vector3d::Ones(), data);
}

} // namespace

TEST_CASE("identity warp returns the input") {
    const Dims3 dims(6, 5, 7);
    const Volume v = random_volume(dims, 1);
    CHECK((warp_volume(v, DenseField<double>::zeros(dims)).data() == v.data()).all());
    CHECK((warp_volume(v, DenseField<double>::zeros(dims), BoundaryPolicy::zero).data() == v.data()).all());
    const MaskVolume m = cube(dims, {1, 1, 1}, {4, 3, 5});
    CHECK((warp_mask(m, DenseField<double>::zeros(dims)).data() == m.data()).all());
}

TEST_CASE("integer shift under clamp") {
    const Dims3 dims(6, 4, 3);
    const Volume v = random_volume(dims, 2);
    const Volume w = warp_volume(v, constant_field(dims, {1, 0, 0}));
    for (int z = 0; z < 3; ++z)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 6; ++x) CHECK(w(x, y, z) == v(std::min(x + 1, 5), y, z));

    const MaskVolume m = cube(dims, {1, 0, 0}, {3, 4, 3});
    const MaskVolume shifted = warp_mask(m, constant_field(dims, {1, 0, 0}));
    CHECK((shifted.data() == cube(dims, {0, 0, 0}, {2, 4, 3}).data()).all());
}

TEST_CASE("half-voxel shift on a ramp") {
    const Dims3 dims(8, 3, 3);
    const Volume ramp = oracle::ramp_volume(dims, {1, 0, 0});
    const Volume w = warp_volume(ramp, constant_field(dims, {0.5, 0, 0}));
    for (int x = 0; x < 7; ++x) CHECK(w(x, 1, 1) == doctest::Approx(x + 0.5));
    CHECK(w(7, 1, 1) == 7.0f); // clamped at the edge
}

TEST_CASE("zero padding outside the volume") {
    const Dims3 dims(5, 5, 5);
    const Volume ones(dims, Eigen::Vector3d::Ones(), Eigen::ArrayXf::Ones(125));
    const Volume w = warp_volume(ones, constant_field(dims, {0.25, 0, 0}), BoundaryPolicy::zero);
    CHECK(w(4, 2, 2) == doctest::Approx(0.75));
    CHECK(w(1, 2, 2) == 1.0f);
    const Volume far = warp_volume(ones, constant_field(dims, {10, 0, 0}), BoundaryPolicy::zero);
    CHECK((far.data() == 0.0f).all());
    const MaskVolume all = warp_mask(MaskVolume(dims, Eigen::Vector3d::Ones(), Eigen::ArrayXf::Ones(125)),
                                     constant_field(dims, {2.3, -1.7, 9.0}));
    CHECK((all.data() == 1.0f).all());
}

TEST_CASE("range preservation and soft masks") {
    const Dims3 dims(9, 8, 7);
    const Volume v = random_volume(dims, 3);
    auto rng = make_engine(4, Stream::test);
    DenseField<double> f = DenseField<double>::zeros(dims);
    for (Eigen::Index i = 0; i < f.u.size(); ++i) f.u(i) = uniform_real(rng, -3.0, 3.0);
    const Volume w = warp_volume(v, f);
    CHECK(w.data().minCoeff() >= v.data().minCoeff());
    CHECK(w.data().maxCoeff() <= v.data().maxCoeff());
    const MaskVolume m = warp_mask(cube(dims, {2, 2, 2}, {6, 6, 5}), f);
    CHECK(m.data().minCoeff() >= 0.0f);
    CHECK(m.data().maxCoeff() <= 1.0f);
}

TEST_CASE("sample gradient matches central differences away from kinks") {
    const Dims3 dims(7, 6, 5);
    const Volume v = random_volume(dims, 5);
    auto rng = make_engine(6, Stream::test);
    for (int t = 0; t < 20; ++t) {
        Eigen::Vector3d p;
        for (int a = 0; a < 3; ++a) {
            // fractional part kept away from integers so the trilinear sample is smooth there
            p(a) = std::floor(uniform_real(rng, 0.0, dims(a) - 1.5)) + uniform_real(rng, 0.1, 0.9);
        }
        for (auto policy : {BoundaryPolicy::clamp, BoundaryPolicy::zero}) {
            Eigen::Vector3d g;
            sample_trilinear<double>(v.data(), dims, p, policy, &g);
            Eigen::Vector3d n;
            for (int a = 0; a < 3; ++a) {
                Eigen::Vector3d hi = p, lo = p;
                hi(a) += 1e-6;
                lo(a) -= 1e-6;
                n(a) = (sample_trilinear<double>(v.data(), dims, hi, policy) -
                        sample_trilinear<double>(v.data(), dims, lo, policy)) /
                       2e-6;
            }
            CHECK(oracle::rel_error(g, n) < 1e-6);
        }
    }
}

TEST_CASE("warp_values gradient is per-voxel sample gradient") {
    const Dims3 dims(6, 6, 6);
    const Volume v = random_volume(dims, 7);
    auto f = constant_field(dims, {0.3, -0.4, 0.2});
    const auto out = warp_values<double>(v.data(), dims, f, BoundaryPolicy::clamp, true);
    const Eigen::Index n = linear_index(dims, 2, 3, 4);
    Eigen::Vector3d g;
    const double s =
        sample_trilinear<double>(v.data(), dims, Eigen::Vector3d(2.3, 2.6, 4.2), BoundaryPolicy::clamp, &g);
    CHECK(out.values(n) == doctest::Approx(s));
    CHECK((out.gradient.col(n) - g).norm() < 1e-12);
}

TEST_CASE("boundary names") {
    CHECK(parse_boundary("zero") == BoundaryPolicy::zero);
    CHECK(to_string(BoundaryPolicy::clamp) == "clamp");
    CHECK_THROWS(parse_boundary("mirror"));
}
