#pragma once

// IDX (MNIST) reader/writer. Images: magic 0x00000803, dims n, rows, cols,
// unsigned bytes. Labels: magic 0x00000801, dim n, unsigned bytes. All
// header integers big-endian.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedimt/data.hpp"

namespace fedimt {

inline constexpr std::uint32_t idx_images_magic = 0x00000803;
inline constexpr std::uint32_t idx_labels_magic = 0x00000801;

class IdxError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IdxError(path.string() + ": cannot open");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& buf, std::size_t off, const std::filesystem::path& path) {
    if (buf.size() < off + 4) throw IdxError(path.string() + ": truncated header");
    return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) | (std::uint32_t{buf[off + 2]} << 8) |
           std::uint32_t{buf[off + 3]};
}

inline std::string hex32(std::uint32_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s = "0x";
    for (int shift = 28; shift >= 0; shift -= 4) s += digits[(v >> shift) & 0xF];
    return s;
}

inline void put_be32(std::ofstream& out, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                                static_cast<char>(v)};
    out.write(b.data(), 4);
}

}  // namespace detail

/// Pixels are scaled to [0,1] by /255. num_classes is max label + 1 unless
/// `num_classes` is given. Arrival order is file order.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::size_t num_classes = 0) {
    const auto img = detail::read_file(images_path);
    const auto lab = detail::read_file(labels_path);
    if (const auto m = detail::be32(img, 0, images_path); m != idx_images_magic) {
        throw IdxError(images_path.string() + ": bad magic " + detail::hex32(m) + ", expected 0x00000803");
    }
    if (const auto m = detail::be32(lab, 0, labels_path); m != idx_labels_magic) {
        throw IdxError(labels_path.string() + ": bad magic " + detail::hex32(m) + ", expected 0x00000801");
    }
    const std::size_t n = detail::be32(img, 4, images_path);
    const std::size_t rows = detail::be32(img, 8, images_path);
    const std::size_t cols = detail::be32(img, 12, images_path);
    const std::size_t n_labels = detail::be32(lab, 4, labels_path);
    if (n != n_labels) {
        throw IdxError("count mismatch: " + images_path.string() + " has " + std::to_string(n) + " images, " +
                       labels_path.string() + " has " + std::to_string(n_labels) + " labels");
    }
    const std::size_t dim = rows * cols;
    if (dim == 0) throw IdxError(images_path.string() + ": zero-sized images");
    if (img.size() < 16 + n * dim) throw IdxError(images_path.string() + ": truncated pixel data");
    if (lab.size() < 8 + n) throw IdxError(labels_path.string() + ": truncated label data");

    Dataset ds;
    ds.features = Matrix(n, dim);
    auto& px = ds.features.data();
    for (std::size_t i = 0; i < n * dim; ++i) px[i] = static_cast<double>(img[16 + i]) / 255.0;
    ds.labels.resize(n);
    std::size_t max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ds.labels[i] = lab[8 + i];
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.num_classes = num_classes > 0 ? num_classes : (n > 0 ? max_label + 1 : 0);
    if (n > 0 && max_label >= ds.num_classes) {
        throw IdxError(labels_path.string() + ": label " + std::to_string(max_label) + " exceeds class count");
    }
    ds.time_order.resize(n);
    std::iota(ds.time_order.begin(), ds.time_order.end(), std::size_t{0});
    return ds;
}

/// Writes rows in arrival order as a 1 x dim image each. Features must lie in
/// [0,1]; they are stored as round(255 * v).
inline void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
    for (double v : ds.features.data()) {
        if (!(v >= 0.0 && v <= 1.0)) throw IdxError("write_idx: feature outside [0,1]; normalize first");
    }
    for (auto y : ds.labels) {
        if (y > 255) throw IdxError("write_idx: label does not fit in a byte");
    }
    std::ofstream img(images_path, std::ios::binary);
    if (!img) throw IdxError(images_path.string() + ": cannot open for writing");
    std::ofstream lab(labels_path, std::ios::binary);
    if (!lab) throw IdxError(labels_path.string() + ": cannot open for writing");

    const auto n = static_cast<std::uint32_t>(ds.size());
    detail::put_be32(img, idx_images_magic);
    detail::put_be32(img, n);
    detail::put_be32(img, 1);
    detail::put_be32(img, static_cast<std::uint32_t>(ds.feature_dim()));
    detail::put_be32(lab, idx_labels_magic);
    detail::put_be32(lab, n);
    for (auto r : ds.time_order) {
        for (double v : ds.features.row(r)) img.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        lab.put(static_cast<char>(static_cast<unsigned char>(ds.labels[r])));
    }
    if (!img) throw IdxError(images_path.string() + ": write failed");
    if (!lab) throw IdxError(labels_path.string() + ": write failed");
}

/// Affine map of all features into [0,1] using the global min/max, so the
/// dataset can be written as IDX.
inline Dataset normalize_unit_range(Dataset ds) {
    auto& v = ds.features.data();
    if (v.empty()) return ds;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double a = *lo;
    const double span = *hi - *lo;
    for (auto& x : v) x = span > 0.0 ? (x - a) / span : 0.0;
    return ds;
}

}  // namespace fedimt
