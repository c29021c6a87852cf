#include "gridreg/gridfield.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gridreg {

namespace fs = std::filesystem;
using nlohmann::json;

double ControlGrid::coord(int axis, int idx) const {
    return double(idx) * double(image_dims(axis) - 1) / double(grid_dims(axis) - 1);
}

Eigen::MatrixX3d ControlGrid::coords() const {
    Eigen::MatrixX3d r(size(), 3);
    for (int k = 0; k < grid_dims(2); ++k) {
        for (int j = 0; j < grid_dims(1); ++j) {
            for (int i = 0; i < grid_dims(0); ++i) {
                const auto n = linear_index(grid_dims, i, j, k);
                r.row(n) << coord(0, i), coord(1, j), coord(2, k);
            }
        }
    }
    return r;
}

ControlGrid make_control_grid(const Dims3& image_dims, const Dims3& grid_dims) {
    for (int a = 0; a < 3; ++a) {
        if (grid_dims(a) < 2) {
            throw std::invalid_argument("grid_dim must be ≥ 2, got " + to_string(grid_dims));
        }
        if (image_dims(a) < 2) {
            throw std::invalid_argument("image_dim must be >= 2, got " + to_string(image_dims));
        }
        if (grid_dims(a) > image_dims(a)) {
            throw std::invalid_argument("grid_dim " + to_string(grid_dims) + " exceeds image dims " +
                                        to_string(image_dims));
        }
    }
    return ControlGrid{grid_dims, image_dims};
}

template <typename Scalar>
Field3<Scalar> GriddedField<Scalar>::sigma2() const {
    if (!eta) {
        throw std::logic_error("sigma2 requested from a non-Bayesian field");
    }
    return eta->unaryExpr([](Scalar e) {
        return std::max(softplus(e), static_cast<Scalar>(kVarianceFloor));
    });
}

template <typename Scalar>
void GriddedField<Scalar>::validate() const {
    if (mu.cols() != grid.size()) {
        throw std::invalid_argument("field mu has " + std::to_string(mu.cols()) + " columns, grid has " +
                                    std::to_string(grid.size()) + " points");
    }
    if (!mu.allFinite()) {
        throw std::invalid_argument("field mu is not finite");
    }
    if (eta) {
        if (eta->cols() != grid.size()) {
            throw std::invalid_argument("field eta shape does not match the grid");
        }
        if (!eta->allFinite()) {
            throw std::invalid_argument("field eta is not finite");
        }
    }
}

template <typename Scalar>
DenseField<Scalar> DenseField<Scalar>::affine(const Dims3& dims, const Eigen::Matrix3d& a, const Eigen::Vector3d& b) {
    DenseField f = zeros(dims);
    for (int k = 0; k < dims(2); ++k) {
        for (int j = 0; j < dims(1); ++j) {
            for (int i = 0; i < dims(0); ++i) {
                const Eigen::Vector3d v = a * Eigen::Vector3d(i, j, k) + b;
                f.u.col(linear_index(dims, i, j, k)) = v.cast<Scalar>();
            }
        }
    }
    return f;
}

template struct GriddedField<float>;
template struct GriddedField<double>;
template struct DenseField<float>;
template struct DenseField<double>;

std::string to_string(KernelKind kind) {
    switch (kind) {
    case KernelKind::trilinear: return "trilinear";
    case KernelKind::bspline3: return "bspline";
    case KernelKind::gaussian: return "gaussian";
    }
    return "unknown";
}

KernelKind parse_kernel_kind(const std::string& name) {
    if (name == "trilinear") return KernelKind::trilinear;
    if (name == "bspline" || name == "bspline3") return KernelKind::bspline3;
    if (name == "gaussian") return KernelKind::gaussian;
    throw std::invalid_argument("unknown kernel '" + name + "' (expected trilinear|bspline|gaussian)");
}

void InterpKernel::validate() const {
    if (kind == KernelKind::gaussian && !(gaussian_sigma > 0.0)) {
        throw std::invalid_argument("gaussian sigma must be > 0");
    }
}

std::vector<double> open_uniform_knots(int num_control) {
    if (num_control < 4) {
        throw std::invalid_argument("cubic B-spline needs grid_dim >= 4 along every axis");
    }
    std::vector<double> knots{0.0, 0.0, 0.0};
    const int interior = num_control - 2;
    for (int i = 0; i < interior; ++i) {
        knots.push_back(double(i) / double(interior - 1));
    }
    knots.insert(knots.end(), {1.0, 1.0, 1.0});
    return knots;
}

int bspline_basis(const std::vector<double>& knots, int num_control, double t, std::array<double, 4>& values) {
    constexpr int p = 3;
    const int n = num_control;
    // span s with knots[s] <= t < knots[s+1], s in [p, n-1]
    int span;
    if (t >= knots[static_cast<std::size_t>(n)]) {
        span = n - 1;
    } else {
        span = static_cast<int>(std::upper_bound(knots.begin() + p, knots.begin() + n + 1, t) - knots.begin()) - 1;
        span = std::clamp(span, p, n - 1);
    }
    std::array<double, p + 1> left{}, right{};
    values.fill(0.0);
    values[0] = 1.0;
    for (int j = 1; j <= p; ++j) {
        left[static_cast<std::size_t>(j)] = t - knots[static_cast<std::size_t>(span + 1 - j)];
        right[static_cast<std::size_t>(j)] = knots[static_cast<std::size_t>(span + j)] - t;
        double saved = 0.0;
        for (int r = 0; r < j; ++r) {
            const double denom = right[static_cast<std::size_t>(r + 1)] + left[static_cast<std::size_t>(j - r)];
            const double temp = values[static_cast<std::size_t>(r)] / denom;
            values[static_cast<std::size_t>(r)] = saved + right[static_cast<std::size_t>(r + 1)] * temp;
            saved = left[static_cast<std::size_t>(j - r)] * temp;
        }
        values[static_cast<std::size_t>(j)] = saved;
    }
    return span - p;
}

Eigen::MatrixXd axis_weights_at(const ControlGrid& grid, int axis, const InterpKernel& kernel,
                                const Eigen::VectorXd& positions) {
    kernel.validate();
    const int g = grid.grid_dims(axis);
    const double extent = double(grid.image_dims(axis) - 1);
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(positions.size(), g);
    switch (kernel.kind) {
    case KernelKind::trilinear:
        for (Eigen::Index x = 0; x < positions.size(); ++x) {
            // position in control-cell units; exact at coinciding nodes
            const double cell = std::clamp(positions(x) * double(g - 1) / extent, 0.0, double(g - 1));
            const int lo = std::clamp(static_cast<int>(std::floor(cell)), 0, g - 1);
            for (int i = std::max(lo - 1, 0); i <= std::min(lo + 1, g - 1); ++i) {
                w(x, i) = std::max(0.0, 1.0 - std::abs(cell - double(i)));
            }
        }
        break;
    case KernelKind::bspline3: {
        const auto knots = open_uniform_knots(g);
        std::array<double, 4> b{};
        for (Eigen::Index x = 0; x < positions.size(); ++x) {
            const double t = std::clamp(positions(x) / extent, 0.0, 1.0);
            const int first = bspline_basis(knots, g, t, b);
            for (int r = 0; r < 4; ++r) {
                w(x, first + r) = b[static_cast<std::size_t>(r)];
            }
        }
        break;
    }
    case KernelKind::gaussian:
        for (Eigen::Index x = 0; x < positions.size(); ++x) {
            const double cell = positions(x) * double(g - 1) / extent;
            for (int i = 0; i < g; ++i) {
                const double d = (cell - double(i)) / kernel.gaussian_sigma;
                w(x, i) = std::exp(-0.5 * d * d);
            }
            w.row(x) /= w.row(x).sum();
        }
        break;
    }
    return w;
}

Eigen::MatrixXd axis_weights(const ControlGrid& grid, int axis, const InterpKernel& kernel) {
    const Eigen::VectorXd positions = Eigen::VectorXd::LinSpaced(grid.image_dims(axis), 0.0,
                                                                 double(grid.image_dims(axis) - 1));
    return axis_weights_at(grid, axis, kernel, positions);
}

Upsampler::Upsampler(const ControlGrid& grid, const InterpKernel& kernel) : grid_(grid), kernel_(kernel) {
    kernel_.validate();
    if (kernel_.kind == KernelKind::bspline3 && (grid_.grid_dims < 4).any()) {
        throw std::invalid_argument("cubic B-spline upsampling needs grid_dim >= 4 along every axis, got " +
                                    to_string(grid_.grid_dims));
    }
    for (int a = 0; a < 3; ++a) {
        weights_[static_cast<std::size_t>(a)] = axis_weights(grid_, a, kernel_);
        weights_t_[static_cast<std::size_t>(a)] = weights_[static_cast<std::size_t>(a)].transpose();
    }
}

template <typename Scalar>
DenseField<Scalar> upsample(const GriddedField<Scalar>& f, const Dims3& dims, const InterpKernel& kernel) {
    if (!(f.grid.image_dims == dims).all()) {
        throw std::invalid_argument("upsample target dims " + to_string(dims) + " differ from the grid's image dims " +
                                    to_string(f.grid.image_dims));
    }
    const Upsampler up(f.grid, kernel);
    return DenseField<Scalar>{dims, up.apply(f.mu)};
}

template <typename Scalar>
DenseField<Scalar> upsample_bspline(const GriddedField<Scalar>& f, const Dims3& dims, const InterpKernel& kernel) {
    if (kernel.kind != KernelKind::bspline3) {
        throw std::invalid_argument("upsample_bspline needs a bspline kernel");
    }
    return upsample(f, dims, kernel);
}

template <typename Scalar>
DenseField<Scalar> upsample_gaussian(const GriddedField<Scalar>& f, const Dims3& dims, const InterpKernel& kernel) {
    if (kernel.kind != KernelKind::gaussian) {
        throw std::invalid_argument("upsample_gaussian needs a gaussian kernel");
    }
    return upsample(f, dims, kernel);
}

template DenseField<float> upsample(const GriddedField<float>&, const Dims3&, const InterpKernel&);
template DenseField<double> upsample(const GriddedField<double>&, const Dims3&, const InterpKernel&);
template DenseField<float> upsample_bspline(const GriddedField<float>&, const Dims3&, const InterpKernel&);
template DenseField<double> upsample_bspline(const GriddedField<double>&, const Dims3&, const InterpKernel&);
template DenseField<float> upsample_gaussian(const GriddedField<float>&, const Dims3&, const InterpKernel&);
template DenseField<double> upsample_gaussian(const GriddedField<double>&, const Dims3&, const InterpKernel&);

Eigen::Vector3d evaluate_at(const GriddedField<double>& f, const InterpKernel& kernel, const Eigen::Vector3d& p) {
    std::array<Eigen::MatrixXd, 3> w;
    for (int a = 0; a < 3; ++a) {
        w[static_cast<std::size_t>(a)] = axis_weights_at(f.grid, a, kernel, Eigen::VectorXd::Constant(1, p(a)));
    }
    const Field3<double> v = Upsampler::contract(f.mu, f.grid.grid_dims, w[0], w[1], w[2]);
    return v.col(0);
}

GriddedField<double> prolong(const GriddedField<double>& f, const Dims3& new_grid_dims, const InterpKernel& kernel) {
    const ControlGrid target = make_control_grid(f.grid.image_dims, new_grid_dims);
    std::array<Eigen::MatrixXd, 3> w;
    for (int a = 0; a < 3; ++a) {
        Eigen::VectorXd pos(new_grid_dims(a));
        for (int i = 0; i < new_grid_dims(a); ++i) {
            pos(i) = target.coord(a, i);
        }
        w[static_cast<std::size_t>(a)] = axis_weights_at(f.grid, a, kernel, pos);
    }
    GriddedField<double> out{target, Upsampler::contract(f.mu, f.grid.grid_dims, w[0], w[1], w[2]), std::nullopt};
    if (f.eta) {
        out.eta = Upsampler::contract(*f.eta, f.grid.grid_dims, w[0], w[1], w[2]);
    }
    return out;
}

namespace {

std::vector<float> component_major(const Field3<float>& m) {
    std::vector<float> out(static_cast<std::size_t>(m.size()));
    const Eigen::Index g = m.cols();
    for (int c = 0; c < 3; ++c) {
        for (Eigen::Index n = 0; n < g; ++n) {
            out[static_cast<std::size_t>(c * g + n)] = m(c, n);
        }
    }
    return out;
}

Field3<float> from_component_major(const float* data, Eigen::Index g) {
    Field3<float> m(3, g);
    for (int c = 0; c < 3; ++c) {
        for (Eigen::Index n = 0; n < g; ++n) {
            m(c, n) = data[c * g + n];
        }
    }
    return m;
}

std::vector<int> dims_vector(const Dims3& d) { return {d(0), d(1), d(2)}; }

Dims3 dims_from(const json& j) {
    const auto v = j.get<std::vector<int>>();
    if (v.size() != 3) {
        throw std::runtime_error("expected three dims in field header");
    }
    return Dims3(v[0], v[1], v[2]);
}

} // namespace

FieldBytes field_to_bytes(const GriddedField<float>& f) {
    f.validate();
    json header;
    header["kind"] = "gridded_field";
    header["grid_dims"] = dims_vector(f.grid.grid_dims);
    header["image_dims"] = dims_vector(f.grid.image_dims);
    header["bayesian"] = f.bayesian();
    header["dtype"] = "f32";
    header["layout"] = "component-major";
    auto values = component_major(f.mu);
    if (f.eta) {
        const auto eta = component_major(*f.eta);
        values.insert(values.end(), eta.begin(), eta.end());
    }
    return FieldBytes{header.dump(), io::encode_f32(values.data(), values.size())};
}

GriddedField<float> bytes_to_field(const FieldBytes& bytes) {
    const json header = json::parse(bytes.header);
    const Dims3 grid_dims = dims_from(header.at("grid_dims"));
    const Dims3 image_dims = dims_from(header.at("image_dims"));
    const bool bayesian = header.at("bayesian").get<bool>();
    const ControlGrid grid = make_control_grid(image_dims, grid_dims);
    const auto values = io::decode_f32(bytes.payload);
    const auto g = grid.size();
    const auto expected = static_cast<std::size_t>(3 * g * (bayesian ? 2 : 1));
    if (values.size() != expected) {
        throw std::runtime_error("field payload holds " + std::to_string(values.size()) + " values, header needs " +
                                 std::to_string(expected));
    }
    GriddedField<float> f{grid, from_component_major(values.data(), g), std::nullopt};
    if (bayesian) {
        f.eta = from_component_major(values.data() + 3 * g, g);
    }
    f.validate();
    return f;
}

void save_field(const GriddedField<float>& f, const fs::path& path) {
    const auto bytes = field_to_bytes(f);
    io::write_bytes_atomic(io::payload_path(path), bytes.payload.data(), bytes.payload.size());
    io::write_text_atomic(io::header_path(path), bytes.header + "\n");
}

GriddedField<float> load_field(const fs::path& path) {
    const auto hpath = io::header_path(path);
    const auto ppath = io::payload_path(path);
    if (!fs::exists(hpath) || !fs::exists(ppath)) {
        throw std::runtime_error("missing field file pair for '" + path.string() + "'");
    }
    return bytes_to_field(FieldBytes{io::read_text(hpath), io::read_bytes(ppath)});
}

void save_dense_field(const DenseField<float>& f, const Eigen::Vector3d& spacing, const fs::path& path) {
    json header;
    header["kind"] = "dense_field";
    header["dims"] = dims_vector(f.dims);
    header["spacing"] = {spacing(0), spacing(1), spacing(2)};
    header["components"] = 3;
    header["dtype"] = "f32";
    header["order"] = "x-fastest";
    header["layout"] = "component-major";
    const auto values = component_major(f.u);
    const auto bytes = io::encode_f32(values.data(), values.size());
    io::write_bytes_atomic(io::payload_path(path), bytes.data(), bytes.size());
    io::write_text_atomic(io::header_path(path), header.dump() + "\n");
}

DenseField<float> load_dense_field(const fs::path& path) {
    const json header = json::parse(io::read_text(io::header_path(path)));
    if (header.value("kind", "") != "dense_field") {
        throw std::runtime_error("'" + path.string() + "' is not a dense field");
    }
    const Dims3 dims = dims_from(header.at("dims"));
    const auto values = io::decode_f32(io::read_bytes(io::payload_path(path)));
    const auto n = voxel_count(dims);
    if (values.size() != static_cast<std::size_t>(3 * n)) {
        throw std::runtime_error("dense field payload size does not match dims " + to_string(dims));
    }
    DenseField<float> f{dims, from_component_major(values.data(), n)};
    if (!f.u.allFinite()) {
        throw std::runtime_error("dense field contains non-finite values");
    }
    return f;
}

bool is_gridded_field_file(const fs::path& path) {
    const json header = json::parse(io::read_text(io::header_path(path)));
    return header.value("kind", "gridded_field") == "gridded_field" && header.contains("grid_dims");
}

} // namespace gridreg
