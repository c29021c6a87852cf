#include "oracles.hpp"

#include "gridreg/gridfield.hpp"

#include <doctest.h>

#include <cstring>

using namespace gridreg;

namespace {

const InterpKernel kAllKernels[] = {InterpKernel::trilinear(), InterpKernel::bspline(), InterpKernel::gaussian(0.5),
                                    InterpKernel::gaussian(1.3)};

} // namespace

TEST_CASE("control grid geometry") {
    const auto g = make_control_grid(Dims3::Constant(128), Dims3::Constant(5));
    CHECK(g.spacing(0) == 31.75);
    CHECK(g.coord(0, 4) == 127.0);

    const auto corners = make_control_grid(Dims3(9, 7, 5), Dims3::Constant(2));
    REQUIRE(corners.size() == 8);
    const Eigen::MatrixX3d c = corners.coords();
    CHECK(c.row(7) == Eigen::RowVector3d(8, 6, 4));
    CHECK(c.row(1) == Eigen::RowVector3d(8, 0, 0));

    CHECK(make_control_grid(Dims3::Constant(32), Dims3(5, 8, 10)).size() == 400);
    CHECK_THROWS_WITH_AS(make_control_grid(Dims3::Constant(32), Dims3(1, 5, 5)),
                         doctest::Contains("grid_dim must be ≥ 2"), std::invalid_argument);
    CHECK_THROWS_AS(make_control_grid(Dims3::Constant(4), Dims3::Constant(5)), std::invalid_argument);
}

TEST_CASE("upsamplers match the direct-sum oracle") {
    auto rng = make_engine(11, Stream::test);
    for (int trial = 0; trial < 12; ++trial) {
        Dims3 g, dims;
        for (int a = 0; a < 3; ++a) {
            g(a) = 2 + int(rng() % 5);
            dims(a) = std::max(g(a), 4) + int(rng() % 8);
        }
        const auto grid = make_control_grid(dims, g);
        const auto f = oracle::random_field(grid, 100 + trial);
        for (const auto& k : kAllKernels) {
            if (k.kind == KernelKind::bspline3 && (g < 4).any()) continue;
            const auto fast = upsample(f, dims, k);
            const auto slow = oracle::direct_upsample(f, dims, k);
            CAPTURE(to_string(k.kind));
            CAPTURE(to_string(g));
            CHECK((fast.u - slow).cwiseAbs().maxCoeff() <= 1e-12);
        }
    }
}

TEST_CASE("trilinear 2^3 grid on a 4^3 volume") {
    const auto grid = make_control_grid(Dims3::Constant(4), Dims3::Constant(2));
    const auto f = oracle::random_field(grid, 3);
    const auto u = upsample_trilinear(f, Dims3::Constant(4));
    // voxel (1,2,3): weights along x (1 - 1/3, 1/3), y (1/3, 2/3), z (0, 1)
    Eigen::Vector3d expect = Eigen::Vector3d::Zero();
    const double wx[2] = {2.0 / 3.0, 1.0 / 3.0}, wy[2] = {1.0 / 3.0, 2.0 / 3.0}, wz[2] = {0.0, 1.0};
    for (int c = 0; c < 2; ++c)
        for (int b = 0; b < 2; ++b)
            for (int a = 0; a < 2; ++a) expect += wx[a] * wy[b] * wz[c] * f.mu.col(a + 2 * (b + 2 * c));
    CHECK((u.u.col(linear_index(Dims3::Constant(4), 1, 2, 3)) - expect).norm() < 1e-12);
}

TEST_CASE("cubic B-spline basis equals the recursive definition") {
    for (int n : {4, 5, 7}) {
        const auto U = open_uniform_knots(n);
        CHECK(U == oracle::knots(n));
        for (double t : {0.0, 0.1, 0.25, 0.5, 0.77, 0.999, 1.0}) {
            std::array<double, 4> b{};
            const int first = bspline_basis(U, n, t, b);
            for (int i = 0; i < n; ++i) {
                const double expect = oracle::cox_de_boor(U, i, 3, t);
                const double got = (i >= first && i < first + 4) ? b[std::size_t(i - first)] : 0.0;
                CAPTURE(n);
                CAPTURE(t);
                CAPTURE(i);
                CHECK(got == doctest::Approx(expect).epsilon(1e-13));
            }
        }
    }
    // random 5^3 grid, single arbitrary voxel against the recursive oracle
    const Dims3 dims(13, 11, 17);
    const auto f = oracle::random_field(make_control_grid(dims, Dims3::Constant(5)), 8);
    const auto u = upsample_bspline(f, dims);
    const auto slow = oracle::direct_upsample(f, dims, InterpKernel::bspline());
    const auto n = linear_index(dims, 7, 3, 12);
    CHECK((u.u.col(n) - slow.col(n)).norm() < 1e-12);
}

TEST_CASE("bspline needs four control points") {
    const auto grid = make_control_grid(Dims3::Constant(16), Dims3(5, 3, 5));
    CHECK_THROWS_WITH_AS(upsample_bspline(GriddedField<double>::zeros(grid), Dims3::Constant(16)),
                         doctest::Contains("grid_dim >= 4"), std::invalid_argument);
}

TEST_CASE("gaussian single control point gives a normalised bump") {
    const Dims3 dims = Dims3::Constant(13);
    const auto grid = make_control_grid(dims, Dims3::Constant(5));
    auto f = GriddedField<double>::zeros(grid);
    const Eigen::Index c = linear_index(grid.grid_dims, 2, 2, 2);
    f.mu(0, c) = 1.0;
    const auto u = upsample_gaussian(f, dims, InterpKernel::gaussian(0.7));
    Eigen::Index peak = 0;
    u.u.row(0).maxCoeff(&peak);
    CHECK(peak == linear_index(dims, 6, 6, 6));
    const auto slow = oracle::direct_upsample(f, dims, InterpKernel::gaussian(0.7));
    CHECK((u.u - slow).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(u.u.row(1).isZero());
}

TEST_CASE("partition of unity and linearity for every kernel") {
    const Dims3 dims(12, 9, 14);
    const auto grid = make_control_grid(dims, Dims3(5, 4, 6));
    for (const auto& k : kAllKernels) {
        CAPTURE(to_string(k.kind));
        auto c = GriddedField<double>::zeros(grid);
        c.mu.colwise() = Eigen::Vector3d(1.5, -2.0, 0.25);
        const auto u = upsample(c, dims, k);
        CHECK((u.u.colwise() - Eigen::Vector3d(1.5, -2.0, 0.25)).cwiseAbs().maxCoeff() < 1e-12);
        CHECK(upsample(GriddedField<double>::zeros(grid), dims, k).u.isZero());

        const auto f1 = oracle::random_field(grid, 1), f2 = oracle::random_field(grid, 2);
        auto comb = f1;
        comb.mu = 0.3 * f1.mu - 1.7 * f2.mu;
        const Field3<double> lhs = upsample(comb, dims, k).u;
        const Field3<double> rhs = 0.3 * upsample(f1, dims, k).u - 1.7 * upsample(f2, dims, k).u;
        CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("upsampler adjoint is the transpose") {
    const Dims3 dims(10, 7, 8);
    const auto grid = make_control_grid(dims, Dims3(4, 3, 5));
    for (const auto& k : kAllKernels) {
        if (k.kind == KernelKind::bspline3) continue; // grid has a 3-point axis
        const Upsampler up(grid, k);
        const auto a = oracle::random_field(grid, 4).mu;
        auto rng = make_engine(5, Stream::test);
        Field3<double> v(3, voxel_count(dims));
        fill_standard_normal(v, rng);
        const double lhs = (up.apply(a).array() * v.array()).sum();
        const double rhs = (a.array() * up.adjoint(v).array()).sum();
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
}

TEST_CASE("prolong reproduces a trilinear field on a refined grid") {
    const Dims3 dims = Dims3::Constant(17);
    const auto coarse = oracle::random_field(make_control_grid(dims, Dims3::Constant(3)), 9);
    const auto fine = prolong(coarse, Dims3::Constant(5), InterpKernel::trilinear());
    const auto a = upsample_trilinear(coarse, dims).u;
    const auto b = upsample_trilinear(fine, dims).u;
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
    const Eigen::Vector3d p(3.3, 8.0, 15.5);
    const Eigen::Vector3d e = evaluate_at(coarse, InterpKernel::trilinear(), p);
    const Field3<double> one = oracle::direct_upsample(coarse, dims, InterpKernel::trilinear());
    CHECK((evaluate_at(coarse, InterpKernel::trilinear(), Eigen::Vector3d(4, 8, 16)) -
           one.col(linear_index(dims, 4, 8, 16)))
              .norm() < 1e-12);
    CHECK(e.allFinite());
}

TEST_CASE("variance is floored softplus") {
    auto f = GriddedField<double>::zeros(make_control_grid(Dims3::Constant(8), Dims3::Constant(2)), true);
    CHECK(f.sigma2()(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    (*f.eta)(1, 3) = -40.0;
    (*f.eta)(2, 5) = 3.0;
    const auto s = f.sigma2();
    CHECK(s(1, 3) == kVarianceFloor);
    CHECK(s(2, 5) == doctest::Approx(std::log1p(std::exp(3.0))));
    CHECK_THROWS(GriddedField<double>::zeros(f.grid).sigma2());
}

TEST_CASE("field serialisation") {
    const auto grid = make_control_grid(Dims3::Constant(20), Dims3::Constant(5));
    const auto plain = oracle::random_field(grid, 1).cast<float>();
    const auto bayes = oracle::random_field(grid, 2, 1.0, true).cast<float>();
    CHECK(field_to_bytes(plain).payload.size() == 4 * 3 * 125);
    CHECK(field_to_bytes(bayes).payload.size() == 3000);

    const auto back = bytes_to_field(field_to_bytes(bayes));
    REQUIRE(back.bayesian());
    CHECK(std::memcmp(back.mu.data(), bayes.mu.data(), sizeof(float) * 375) == 0);
    CHECK(std::memcmp(back.eta->data(), bayes.eta->data(), sizeof(float) * 375) == 0);
    CHECK(back.grid == bayes.grid);

    oracle::TempDir tmp("field");
    save_field(plain, tmp / "f");
    const auto loaded = load_field(tmp / "f");
    CHECK(!loaded.bayesian());
    CHECK(loaded.mu == plain.mu);
    CHECK(is_gridded_field_file(tmp / "f"));

    const auto dense = upsample(plain, grid.image_dims, InterpKernel::trilinear());
    save_dense_field(dense, Eigen::Vector3d::Ones(), tmp / "d");
    CHECK(!is_gridded_field_file(tmp / "d"));
    CHECK(load_dense_field(tmp / "d").u == dense.u);

    auto broken = field_to_bytes(plain);
    broken.payload.resize(broken.payload.size() - 4);
    CHECK_THROWS(bytes_to_field(broken));
}
