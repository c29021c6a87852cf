#include "gridreg/volume.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace gridreg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(const Dims3& dims) {
    std::ostringstream os;
    os << dims(0) << "x" << dims(1) << "x" << dims(2);
    return os.str();
}

namespace {

template <class Kind>
void check_values(const Eigen::ArrayXf& data) {
    for (Eigen::Index n = 0; n < data.size(); ++n) {
        const float v = data(n);
        if (!std::isfinite(v)) {
            throw std::invalid_argument("volume contains a non-finite value at index " + std::to_string(n));
        }
        if constexpr (std::is_same_v<Kind, MaskTag>) {
            if (v < 0.0f || v > 1.0f) {
                throw std::invalid_argument("mask value outside [0,1] at index " + std::to_string(n));
            }
        }
    }
}

} // namespace

template <class Kind>
BasicVolume<Kind>::BasicVolume(const Dims3& dims, const Eigen::Vector3d& spacing, Eigen::ArrayXf data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    if ((dims_ <= 0).any()) {
        throw std::invalid_argument("volume dims must be positive, got " + to_string(dims_));
    }
    if (!(spacing_.array() > 0.0).all() || !spacing_.allFinite()) {
        throw std::invalid_argument("volume spacing must be positive and finite");
    }
    if (data_.size() != voxel_count(dims_)) {
        throw std::invalid_argument("volume data length " + std::to_string(data_.size()) + " != " +
                                    std::to_string(voxel_count(dims_)) + " voxels of " + to_string(dims_));
    }
    check_values<Kind>(data_);
}

template <class Kind>
BasicVolume<Kind>::BasicVolume(const Dims3& dims, const Eigen::Vector3d& spacing)
    : BasicVolume(dims, spacing, Eigen::ArrayXf::Zero((dims > 0).all() ? voxel_count(dims) : 0)) {}

template class BasicVolume<IntensityTag>;
template class BasicVolume<MaskTag>;

MaskVolume binarize(const Volume& v, float threshold) {
    Eigen::ArrayXf out = (v.data() >= threshold).cast<float>();
    return MaskVolume(v.dims(), v.spacing(), std::move(out));
}

MaskVolume binarize(const MaskVolume& m, float threshold) {
    Eigen::ArrayXf out = (m.data() >= threshold).cast<float>();
    return MaskVolume(m.dims(), m.spacing(), std::move(out));
}

Volume as_volume(const MaskVolume& m) {
    return Volume(m.dims(), m.spacing(), m.data());
}

Volume rescale_min_max(const Volume& v) {
    const float lo = v.data().minCoeff();
    const float hi = v.data().maxCoeff();
    if (!(hi > lo)) {
        return Volume(v.dims(), v.spacing());
    }
    Eigen::ArrayXf out = (v.data() - lo) / (hi - lo);
    return Volume(v.dims(), v.spacing(), std::move(out));
}

void validate(const LandmarkSet& landmarks) {
    if (landmarks.points.empty()) {
        throw std::invalid_argument("landmark set is empty (need K >= 1)");
    }
    if (landmarks.points.size() != landmarks.ids.size()) {
        throw std::invalid_argument("landmark point and id counts differ");
    }
    std::set<std::string> seen;
    for (const auto& id : landmarks.ids) {
        if (!seen.insert(id).second) {
            throw std::invalid_argument("duplicate landmark id '" + id + "'");
        }
    }
    for (const auto& p : landmarks.points) {
        if (!p.allFinite()) {
            throw std::invalid_argument("landmark coordinate is not finite");
        }
    }
}

std::vector<std::size_t> check_bounds(const LandmarkSet& landmarks, const Dims3& dims, BoundsPolicy policy) {
    std::vector<std::size_t> outside;
    const Eigen::Vector3d hi = (dims - 1).cast<double>().matrix();
    for (std::size_t n = 0; n < landmarks.points.size(); ++n) {
        const auto& p = landmarks.points[n];
        if ((p.array() < 0.0).any() || (p.array() > hi.array()).any()) {
            outside.push_back(n);
        }
    }
    for (const auto n : outside) {
        const std::string msg = "landmark '" + landmarks.ids[n] + "' lies outside the volume " + to_string(dims);
        if (policy == BoundsPolicy::error) {
            throw std::out_of_range(msg);
        }
        std::cerr << "warning: " << msg << "\n";
    }
    return outside;
}

namespace io {

namespace {

fs::path stem_path(const fs::path& path) {
    const auto ext = path.extension();
    if (ext == ".json" || ext == ".raw") {
        return fs::path(path).replace_extension();
    }
    return path;
}

} // namespace

fs::path header_path(const fs::path& path) {
    auto p = stem_path(path);
    p += ".json";
    return p;
}

fs::path payload_path(const fs::path& path) {
    auto p = stem_path(path);
    p += ".raw";
    return p;
}

std::vector<char> encode_f32(const float* values, std::size_t count) {
    std::vector<char> bytes(count * sizeof(float));
    for (std::size_t n = 0; n < count; ++n) {
        auto bits = std::bit_cast<std::uint32_t>(values[n]);
        if constexpr (std::endian::native == std::endian::big) {
            bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
        }
        std::memcpy(bytes.data() + n * sizeof(float), &bits, sizeof(float));
    }
    return bytes;
}

std::vector<float> decode_f32(const std::vector<char>& bytes) {
    if (bytes.size() % sizeof(float) != 0) {
        throw std::runtime_error("payload size " + std::to_string(bytes.size()) + " is not a multiple of 4 bytes");
    }
    std::vector<float> values(bytes.size() / sizeof(float));
    for (std::size_t n = 0; n < values.size(); ++n) {
        std::uint32_t bits;
        std::memcpy(&bits, bytes.data() + n * sizeof(float), sizeof(float));
        if constexpr (std::endian::native == std::endian::big) {
            bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
        }
        values[n] = std::bit_cast<float>(bits);
    }
    return values;
}

std::vector<char> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open '" + path.string() + "'");
    }
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string read_text(const fs::path& path) {
    const auto bytes = read_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

void write_bytes_atomic(const fs::path& path, const char* data, std::size_t size) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write '" + tmp.string() + "'");
        }
        out.write(data, static_cast<std::streamsize>(size));
        if (!out) {
            throw std::runtime_error("write failed for '" + tmp.string() + "'");
        }
    }
    fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    write_bytes_atomic(path, text.data(), text.size());
}

} // namespace io

namespace {

struct RawVolume {
    Dims3 dims;
    Eigen::Vector3d spacing;
    Eigen::ArrayXf data;
};

RawVolume read_raw_volume(const fs::path& path) {
    const auto hpath = io::header_path(path);
    const auto ppath = io::payload_path(path);
    if (!fs::exists(hpath)) {
        throw std::runtime_error("missing volume header '" + hpath.string() + "'");
    }
    if (!fs::exists(ppath)) {
        throw std::runtime_error("missing volume payload '" + ppath.string() + "'");
    }
    const json header = json::parse(io::read_text(hpath));
    if (header.value("dtype", "f32") != "f32") {
        throw std::runtime_error("unsupported dtype in '" + hpath.string() + "'");
    }
    if (header.value("order", "x-fastest") != "x-fastest") {
        throw std::runtime_error("unsupported voxel order in '" + hpath.string() + "'");
    }
    RawVolume raw;
    const auto dims = header.at("dims").get<std::vector<int>>();
    const auto spacing = header.at("spacing").get<std::vector<double>>();
    if (dims.size() != 3 || spacing.size() != 3) {
        throw std::runtime_error("header '" + hpath.string() + "' needs 3 dims and 3 spacings");
    }
    raw.dims = Dims3(dims[0], dims[1], dims[2]);
    raw.spacing = Eigen::Vector3d(spacing[0], spacing[1], spacing[2]);
    if ((raw.dims <= 0).any()) {
        throw std::runtime_error("header '" + hpath.string() + "' has non-positive dims");
    }
    const auto values = io::decode_f32(io::read_bytes(ppath));
    const auto expected = static_cast<std::size_t>(voxel_count(raw.dims));
    if (values.size() != expected) {
        throw std::runtime_error("payload '" + ppath.string() + "' holds " + std::to_string(values.size()) +
                                 " values but header dims " + to_string(raw.dims) + " need " +
                                 std::to_string(expected));
    }
    raw.data = Eigen::Map<const Eigen::ArrayXf>(values.data(), static_cast<Eigen::Index>(values.size()));
    return raw;
}

template <class Kind>
void write_volume(const BasicVolume<Kind>& v, const fs::path& path) {
    json header;
    header["dims"] = {v.dims()(0), v.dims()(1), v.dims()(2)};
    header["spacing"] = {v.spacing()(0), v.spacing()(1), v.spacing()(2)};
    header["dtype"] = "f32";
    header["order"] = "x-fastest";
    const auto bytes = io::encode_f32(v.data().data(), static_cast<std::size_t>(v.size()));
    io::write_bytes_atomic(io::payload_path(path), bytes.data(), bytes.size());
    io::write_text_atomic(io::header_path(path), header.dump() + "\n");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        cells.push_back(trim(cell));
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) {
        return false;
    }
    std::istringstream is(s);
    is.imbue(std::locale::classic());
    is >> out;
    return !is.fail() && is.eof();
}

} // namespace

Volume load_volume(const fs::path& path, bool min_max_rescale) {
    auto raw = read_raw_volume(path);
    Volume v(raw.dims, raw.spacing, std::move(raw.data));
    return min_max_rescale ? rescale_min_max(v) : v;
}

MaskVolume load_mask(const fs::path& path) {
    auto raw = read_raw_volume(path);
    for (Eigen::Index n = 0; n < raw.data.size(); ++n) {
        if (!std::isfinite(raw.data(n))) {
            throw std::invalid_argument("mask contains a non-finite value at index " + std::to_string(n));
        }
    }
    Eigen::ArrayXf binary = (raw.data >= 0.5f).cast<float>();
    return MaskVolume(raw.dims, raw.spacing, std::move(binary));
}

void save_volume(const Volume& v, const fs::path& path) { write_volume(v, path); }
void save_volume(const MaskVolume& m, const fs::path& path) { write_volume(m, path); }

LandmarkSet load_landmarks(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open landmark file '" + path.string() + "'");
    }
    LandmarkSet set;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto t = trim(line);
        if (t.empty()) {
            continue;
        }
        const auto cells = split_csv(t);
        if (cells.size() != 4) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": expected 4 columns id,x,y,z");
        }
        Eigen::Vector3d p;
        const bool numeric = parse_double(cells[1], p(0)) && parse_double(cells[2], p(1)) &&
                             parse_double(cells[3], p(2));
        if (!numeric) {
            if (set.points.empty() && line_no == 1) {
                continue; // header row
            }
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": malformed coordinates");
        }
        if (cells[0].empty()) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": empty landmark id");
        }
        set.ids.push_back(cells[0]);
        set.points.push_back(p);
    }
    validate(set);
    return set;
}

LandmarkSet load_landmarks(const fs::path& path, const Dims3& dims, BoundsPolicy policy) {
    auto set = load_landmarks(path);
    check_bounds(set, dims, policy);
    return set;
}

void save_landmarks(const LandmarkSet& landmarks, const fs::path& path) {
    validate(landmarks);
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os.precision(17);
    os << "id,x,y,z\n";
    for (std::size_t n = 0; n < landmarks.size(); ++n) {
        const auto& p = landmarks.points[n];
        os << landmarks.ids[n] << "," << p(0) << "," << p(1) << "," << p(2) << "\n";
    }
    io::write_text_atomic(path, os.str());
}

} // namespace gridreg
