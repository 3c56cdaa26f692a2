#pragma once

// Dense float32 kernels shared by every module. Summation order is fixed
// (left to right over the contraction index) so results are reproducible
// bit for bit across runs.
//
// GeLU uses the tanh approximation
//   gelu(x) = 0.5 * x * (1 + tanh(K0 * (x + K1 * x^3)))
// with K0 = sqrt(2/pi) = 0.7978845608028654 and K1 = 0.044715.

#include <cstddef>
#include <span>
#include <vector>

#include "core/error.hpp"

namespace headgate {

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data; // row-major, rows*cols

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {
        require(r >= 0 && c >= 0, errc::shape, "matrix dims must be nonnegative");
    }

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    float* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const float* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    std::span<const float> row_span(int r) const { return {row(r), static_cast<size_t>(cols)}; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

struct Vector {
    std::vector<float> data;

    Vector() = default;
    explicit Vector(int dim) : data(static_cast<size_t>(dim), 0.0f) {}
    Vector(std::initializer_list<float> v) : data(v) {}

    int dim() const { return static_cast<int>(data.size()); }
    float& operator[](int i) { return data[static_cast<size_t>(i)]; }
    float operator[](int i) const { return data[static_cast<size_t>(i)]; }
};

// a (m x k) * b (k x n) -> (m x n); float32 accumulation, k ascending
Matrix matmul(const Matrix& a, const Matrix& b);

// row-wise softmax with max subtraction
Matrix softmax_rows(const Matrix& m);

// standardize v to mean 0 / variance 1 (eps inside the sqrt), then affine
Vector layer_norm(const Vector& v, const Vector& gain, const Vector& bias, float eps);

float gelu_scalar(float x);
float gelu_deriv(float x);
Vector gelu(const Vector& v);

// statistics are computed and returned in double
double sigmoid(double x);
double dot(std::span<const float> u, std::span<const float> v);
double cosine_similarity(std::span<const float> u, std::span<const float> v);
double binary_entropy(double p); // bits

void check_finite(const Matrix& m, const char* what);
void check_finite(const Vector& v, const char* what);

} // namespace headgate
