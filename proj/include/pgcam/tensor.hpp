#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace pgcam {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline void format_to(std::ostringstream&) {}
template <typename A, typename... Rest>
void format_to(std::ostringstream& os, const A& a, const Rest&... rest) {
    os << a;
    format_to(os, rest...);
}
} // namespace detail

template <typename... Args>
std::string strcat_msg(const Args&... args) {
    std::ostringstream os;
    detail::format_to(os, args...);
    return os.str();
}

template <typename... Args>
[[noreturn]] void fail(const Args&... args) {
    throw Error(strcat_msg(args...));
}

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

/// Dense N-dimensional array, row-major. All network values are Tensors.
template <typename T>
struct Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor requires a float element type");

    Shape shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Shape s, T fill = T(0))
        : shape(std::move(s)), data(shape_numel(shape), fill) {}

    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_numel(shape))
            fail("tensor: ", data.size(), " elements do not fill shape ", shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t extent(std::size_t axis) const { return shape.at(axis); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    T& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    const T& at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    T& at4(std::size_t b, std::size_t c, std::size_t y, std::size_t x) {
        return data[((b * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    const T& at4(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
        return data[((b * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        for (const T v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape && a.data == b.data;
}

} // namespace pgcam
