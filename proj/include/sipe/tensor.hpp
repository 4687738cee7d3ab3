#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sipe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

/// Dense row-major array of doubles with shape metadata.
///
/// A rank-0 tensor holds one value. Tensors are treated as values: the
/// mutable accessors exist for builders that fill a freshly constructed
/// tensor, not for editing one that has already been handed out.
class Tensor {
   public:
    Tensor() : data_(1, 0.0) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_)) {
            throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " needs " +
                                        std::to_string(shape_numel(shape_)) + " values, got " +
                                        std::to_string(data_.size()));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor vector(std::vector<double> values) {
        Shape s{values.size()};
        return Tensor(std::move(s), std::move(values));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const {
        if (axis >= shape_.size()) throw std::out_of_range("Tensor::dim: axis out of range for " + shape_str(shape_));
        return shape_[axis];
    }

    std::span<const double> data() const { return data_; }
    std::span<double> mutable_data() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    double item() const {
        if (data_.size() != 1) throw std::invalid_argument("Tensor::item on shape " + shape_str(shape_));
        return data_[0];
    }

    double at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }
    double& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != data_.size()) {
            throw std::invalid_argument("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        // bitwise comparison so that -0.0 and 0.0 differ and NaN equals itself
        return a.shape_ == b.shape_ &&
               std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(double)) == 0;
    }

   private:
    std::size_t offset(std::initializer_list<std::size_t> index) const {
        if (index.size() != shape_.size()) {
            throw std::out_of_range("Tensor::at: rank mismatch for " + shape_str(shape_));
        }
        std::size_t off = 0;
        std::size_t axis = 0;
        for (std::size_t i : index) {
            if (i >= shape_[axis]) throw std::out_of_range("Tensor::at: index out of range for " + shape_str(shape_));
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    Shape shape_;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// TNSR binary records: "TNSR", u32 rank, rank x u32 dims, f64 payload (LE).

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), bytes.size());
}

template <typename T>
T read_le(std::istream& is, const char* what) {
    std::array<char, sizeof(T)> bytes;
    auto offset = static_cast<long long>(is.tellg());
    if (!is.read(bytes.data(), bytes.size())) {
        throw std::runtime_error(std::string("TNSR: truncated ") + what + " at byte " + std::to_string(offset));
    }
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

}  // namespace detail

inline void write_tnsr(std::ostream& os, const Tensor& t) {
    os.write("TNSR", 4);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : t.data()) detail::write_le<double>(os, v);
    if (!os) throw std::runtime_error("TNSR: write failed");
}

inline Tensor read_tnsr(std::istream& is) {
    char magic[4];
    auto offset = static_cast<long long>(is.tellg());
    if (!is.read(magic, 4) || std::memcmp(magic, "TNSR", 4) != 0) {
        throw std::runtime_error("TNSR: bad magic at byte " + std::to_string(offset));
    }
    auto rank = detail::read_le<std::uint32_t>(is, "rank");
    if (rank > 16) throw std::runtime_error("TNSR: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_le<std::uint32_t>(is, "dimension");
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = detail::read_le<double>(is, "payload");
    return Tensor(std::move(shape), std::move(data));
}

inline std::string to_tnsr_bytes(const Tensor& t) {
    std::ostringstream os(std::ios::binary);
    write_tnsr(os, t);
    return os.str();
}

}  // namespace sipe
