#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "gradflow/error.hpp"

namespace gradflow {

// Storage precision of a tensor's values. Arithmetic always runs in
// double; `f32` means every stored value is exactly representable as a
// 32-bit float (enforced by round_to_f32) and serializes as 4-byte floats.
enum class Precision : uint8_t { f32, f64 };

inline const char* precision_name(Precision p) {
    return p == Precision::f32 ? "f32" : "f64";
}

inline Precision precision_from_name(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    fail(ErrorKind::format, "unknown precision tag: " + s);
}

inline size_t numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

// Dense row-major tensor. Deliberately minimal: the flow code owns all
// layout/stride logic, this is just a shaped buffer with an invariant.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;
    Precision prec = Precision::f64;

    Tensor() = default;

    static Tensor zeros(std::vector<size_t> s, Precision p = Precision::f64) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(numel(t.shape), 0.0);
        t.prec = p;
        return t;
    }

    static Tensor from(std::vector<size_t> s, std::vector<double> values,
                       Precision p = Precision::f64) {
        check(numel(s) == values.size(), ErrorKind::shape,
              "tensor shape does not match element count");
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(values);
        t.prec = p;
        return t;
    }

    size_t size() const { return data.size(); }
    double& operator[](size_t i) { return data[i]; }
    double operator[](size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    // Rounds every value through float so the invariant of f32 precision
    // holds; no-op in f64 mode.
    void round_to_precision() {
        if (prec == Precision::f32)
            for (double& v : data) v = double(float(v));
    }
};

inline std::string shape_str(const std::vector<size_t>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

} // namespace gradflow
