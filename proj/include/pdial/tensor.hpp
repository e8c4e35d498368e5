#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace pdial {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible; the message names both shapes.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a computation leaves the finite range (NaN/Inf) or a loss diverges.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid argument values (alpha out of range, empty inputs, ...).
class ValueError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed files or records.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array. Rank 1 and 2 are what the model uses; "rows" means
/// the product of all leading dimensions, "cols" the trailing one.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {
        validate_shape();
    }

    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        validate_shape();
        if (data.size() != shape_numel(shape)) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : data.size() / cols(); }

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

    T item() const {
        if (data.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape));
        return data[0];
    }

    bool all_finite() const {
        using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        constexpr Bits exp_mask = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
        Bits bad = 0;
        for (const T& v : data) bad |= Bits((std::bit_cast<Bits>(v) & exp_mask) == exp_mask);
        return bad == 0;
    }

private:
    void validate_shape() const {
        if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }
};

/// Row-major GEMM kernels. Each output row depends only on the matching input
/// row and the reduction order is fixed, so results are independent of the
/// number of rows in a call.
namespace kernels {

// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// C[k x n] += A[m x k]^T * B[m x n]
template <class T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// out[n x m] = in[m x n]^T
template <class T>
void transpose(const T* in, T* out, std::size_t m, std::size_t n);

}  // namespace kernels

}  // namespace pdial
