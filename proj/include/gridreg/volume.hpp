#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <string>
#include <vector>

namespace gridreg {

/// Voxel counts along (x, y, z), i.e. (W, H, D).
using Dims3 = Eigen::Array3i;

inline Eigen::Index voxel_count(const Dims3& dims) {
    return Eigen::Index(dims(0)) * dims(1) * dims(2);
}

/// Linear index of voxel (i, j, k) in x-fastest order.
inline Eigen::Index linear_index(const Dims3& dims, Eigen::Index i, Eigen::Index j, Eigen::Index k) {
    return i + dims(0) * (j + Eigen::Index(dims(1)) * k);
}

std::string to_string(const Dims3& dims);

struct IntensityTag {};
struct MaskTag {};

/// Immutable 3D scalar image with voxel spacing in millimetres.
///
/// Data is stored as 32-bit floats in x-fastest order: data[i + W*(j + H*k)]
/// addresses voxel (i, j, k). The Kind tag separates intensity images from
/// masks, whose values are additionally restricted to [0, 1].
template <class Kind>
class BasicVolume {
public:
    BasicVolume(const Dims3& dims, const Eigen::Vector3d& spacing, Eigen::ArrayXf data);
    explicit BasicVolume(const Dims3& dims, const Eigen::Vector3d& spacing = Eigen::Vector3d::Ones());

    const Dims3& dims() const { return dims_; }
    const Eigen::Vector3d& spacing() const { return spacing_; }
    const Eigen::ArrayXf& data() const { return data_; }
    Eigen::Index size() const { return data_.size(); }

    float operator()(Eigen::Index i, Eigen::Index j, Eigen::Index k) const {
        return data_(linear_index(dims_, i, j, k));
    }

    bool same_geometry(const Dims3& dims) const { return (dims_ == dims).all(); }

    template <class Other>
    bool same_geometry(const BasicVolume<Other>& other) const {
        return same_geometry(other.dims());
    }

private:
    Dims3 dims_;
    Eigen::Vector3d spacing_;
    Eigen::ArrayXf data_;
};

using Volume = BasicVolume<IntensityTag>;
using MaskVolume = BasicVolume<MaskTag>;

extern template class BasicVolume<IntensityTag>;
extern template class BasicVolume<MaskTag>;

/// Threshold at 0.5 (inclusive) into a binary mask.
MaskVolume binarize(const Volume& v, float threshold = 0.5f);
MaskVolume binarize(const MaskVolume& m, float threshold = 0.5f);
Volume as_volume(const MaskVolume& m);

/// Per-volume min-max rescale to [0, 1]. A constant volume maps to zeros.
Volume rescale_min_max(const Volume& v);

/// Landmarks in continuous voxel coordinates.
struct LandmarkSet {
    std::vector<Eigen::Vector3d> points;
    std::vector<std::string> ids;

    std::size_t size() const { return points.size(); }
};

/// Throws if K < 1, ids are duplicated, or the point/id counts differ.
void validate(const LandmarkSet& landmarks);

enum class BoundsPolicy { warn, error };

/// Returns the indices of points outside [0, dim-1]^3. Throws under BoundsPolicy::error.
std::vector<std::size_t> check_bounds(const LandmarkSet& landmarks, const Dims3& dims,
                                      BoundsPolicy policy = BoundsPolicy::warn);

// File I/O. A volume named `<stem>` is stored as `<stem>.json` + `<stem>.raw`;
// paths may be given with or without either extension.

Volume load_volume(const std::filesystem::path& path, bool min_max_rescale = false);
MaskVolume load_mask(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);
void save_volume(const MaskVolume& m, const std::filesystem::path& path);

LandmarkSet load_landmarks(const std::filesystem::path& path);
LandmarkSet load_landmarks(const std::filesystem::path& path, const Dims3& dims, BoundsPolicy policy);
void save_landmarks(const LandmarkSet& landmarks, const std::filesystem::path& path);

namespace io {

std::filesystem::path header_path(const std::filesystem::path& path);
std::filesystem::path payload_path(const std::filesystem::path& path);

/// Little-endian f32 encoding shared by every payload format in the project.
std::vector<char> encode_f32(const float* values, std::size_t count);
std::vector<float> decode_f32(const std::vector<char>& bytes);

std::vector<char> read_bytes(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it into place.
void write_bytes_atomic(const std::filesystem::path& path, const char* data, std::size_t size);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

} // namespace io

} // namespace gridreg
