#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmust {

class shape_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class numeric_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class io_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class config_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training divergence (non-finite loss). Carries the offending batch index.
class train_error : public std::runtime_error {
public:
    train_error(const std::string& msg, long batch_index = -1)
        : std::runtime_error(msg), batch_index(batch_index) {}
    long batch_index;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major tensor of 64-bit reals.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel(shape))
            throw shape_error("tensor: " + std::to_string(data.size()) + " values for shape " +
                              shape_str(shape));
    }

    static Tensor zeros(Shape s) {
        Tensor t;
        t.data.assign(numel(s), 0.0);
        t.shape = std::move(s);
        return t;
    }

    static Tensor full(Shape s, double v) {
        Tensor t;
        t.data.assign(numel(s), v);
        t.shape = std::move(s);
        return t;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t last_dim() const { return shape.empty() ? 1 : shape.back(); }
    // number of rows when viewed as a (rows x last_dim) matrix
    std::size_t rows() const { return shape.empty() ? 1 : size() / last_dim(); }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor& fill(double v) {
        std::fill(data.begin(), data.end(), v);
        return *this;
    }
};

inline bool all_finite(const Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

// NaN/Inf is an error, not silent propagation.
inline void require_finite(const Tensor& t, const char* what) {
    if (!all_finite(t)) throw numeric_error(std::string(what) + ": non-finite value produced");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw shape_error(std::string(what) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
}

}  // namespace cmust
