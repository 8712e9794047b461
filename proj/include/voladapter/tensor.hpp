#pragma once

#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace voladapter {

/// Dense row-major float tensor, rank 1..5. The single numeric container of
/// the whole project; layouts are documented at each use site
/// (volumes are [C,D,H,W], token matrices are [N,c], d-major flattening).
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0f) {}
    Tensor(std::vector<int64_t> s, float fill) : shape(std::move(s)), data(numel_of(shape), fill) {}

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int64_t> s, float v) { return Tensor(std::move(s), v); }
    static Tensor from(std::vector<int64_t> s, std::vector<float> d) {
        Tensor t;
        t.shape = std::move(s);
        if (static_cast<int64_t>(d.size()) != numel_of(t.shape))
            throw std::invalid_argument("tensor data size does not match shape");
        t.data = std::move(d);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    // Convenience accessors for tests and cold paths; hot loops index raw pointers.
    float& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    float at(int64_t i) const { return data[static_cast<size_t>(i)]; }
    float& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    float at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
    float& at(int64_t i, int64_t j, int64_t k) {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    float at(int64_t i, int64_t j, int64_t k) const {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    float& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    float at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool bit_equal(const Tensor& o) const {
        return shape == o.shape &&
               std::memcmp(data.data(), o.data.data(), data.size() * sizeof(float)) == 0;
    }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    float m = 0.0f;
    for (size_t i = 0; i < a.data.size(); ++i) {
        float d = std::abs(a.data[i] - b.data[i]);
        if (d > m) m = d;
    }
    return m;
}

}  // namespace voladapter
