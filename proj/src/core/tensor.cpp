#include "core/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace headgate {

void check_finite(const Matrix& m, const char* what) {
    for (float x : m.data)
        if (!std::isfinite(x)) fail(errc::range, std::string(what) + ": non-finite value");
}

void check_finite(const Vector& v, const char* what) {
    for (float x : v.data)
        if (!std::isfinite(x)) fail(errc::range, std::string(what) + ": non-finite value");
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols == b.rows, errc::shape,
            "matmul: inner dims differ (" + std::to_string(a.cols) + " vs " +
                std::to_string(b.rows) + ")");
    Matrix out(a.rows, b.cols);
    // ikj order: the k loop is the fixed left-to-right accumulation, the j
    // loop runs over contiguous memory
    for (int i = 0; i < a.rows; ++i) {
        const float* arow = a.row(i);
        float* orow = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const float aik = arow[k];
            const float* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        const float* src = m.row(i);
        float* dst = out.row(i);
        float mx = src[0];
        for (int j = 1; j < m.cols; ++j) mx = std::max(mx, src[j]);
        float sum = 0.0f;
        for (int j = 0; j < m.cols; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        const float inv = 1.0f / sum;
        for (int j = 0; j < m.cols; ++j) dst[j] *= inv;
    }
    return out;
}

Vector layer_norm(const Vector& v, const Vector& gain, const Vector& bias, float eps) {
    const int n = v.dim();
    require(gain.dim() == n && bias.dim() == n, errc::shape, "layer_norm: dim mismatch");
    require(eps > 0.0f, errc::range, "layer_norm: eps must be positive");
    float mean = 0.0f;
    for (int i = 0; i < n; ++i) mean += v[i];
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (int i = 0; i < n; ++i) {
        const float d = v[i] - mean;
        var += d * d;
    }
    var /= static_cast<float>(n);
    const float inv = 1.0f / std::sqrt(var + eps);
    Vector out(n);
    for (int i = 0; i < n; ++i) out[i] = (v[i] - mean) * inv * gain[i] + bias[i];
    return out;
}

namespace {
constexpr float kGeluK0 = 0.7978845608028654f; // sqrt(2/pi)
constexpr float kGeluK1 = 0.044715f;
} // namespace

float gelu_scalar(float x) {
    const float u = kGeluK0 * (x + kGeluK1 * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

float gelu_deriv(float x) {
    const float u = kGeluK0 * (x + kGeluK1 * x * x * x);
    const float t = std::tanh(u);
    const float du = kGeluK0 * (1.0f + 3.0f * kGeluK1 * x * x);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

Vector gelu(const Vector& v) {
    Vector out(v.dim());
    for (int i = 0; i < v.dim(); ++i) out[i] = gelu_scalar(v[i]);
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double dot(std::span<const float> u, std::span<const float> v) {
    require(u.size() == v.size(), errc::shape, "dot: dim mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < u.size(); ++i) acc += static_cast<double>(u[i]) * v[i];
    return acc;
}

double cosine_similarity(std::span<const float> u, std::span<const float> v) {
    require(u.size() == v.size() && !u.empty(), errc::shape, "cosine: dim mismatch");
    bool same = true, flipped = true;
    double nu = 0.0, nv = 0.0, uv = 0.0;
    for (size_t i = 0; i < u.size(); ++i) {
        same = same && u[i] == v[i];
        flipped = flipped && u[i] == -v[i];
        nu += static_cast<double>(u[i]) * u[i];
        nv += static_cast<double>(v[i]) * v[i];
        uv += static_cast<double>(u[i]) * v[i];
    }
    require(nu > 0.0 && nv > 0.0, errc::degenerate_data, "cosine: zero vector");
    if (same) return 1.0;
    if (flipped) return -1.0;
    const double c = uv / (std::sqrt(nu) * std::sqrt(nv));
    return std::clamp(c, -1.0, 1.0);
}

double binary_entropy(double p) {
    require(p >= 0.0 && p <= 1.0, errc::range, "binary_entropy: p outside [0,1]");
    double h = 0.0;
    if (p > 0.0) h -= p * std::log2(p);
    if (p < 1.0) h -= (1.0 - p) * std::log2(1.0 - p);
    return h;
}

} // namespace headgate
