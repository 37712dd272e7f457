#include "salab/linalg.hpp"

#include <cmath>

namespace salab {

double dot(const double* a, const double* b, int n) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void axpy(double a, const double* x, double* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

double norm2(const double* x, int n) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += x[i] * x[i];
    return std::sqrt(acc);
}

double norm2(const Vec& x) { return norm2(x.data(), static_cast<int>(x.size())); }

void matvec_rows(const Mat& m, const double* x, double* out) {
    for (int r = 0; r < m.rows; ++r) out[r] = dot(m.row(r), x, m.cols);
}

void vecmat_slice(const double* x, const Mat& m, int c0, int c1, double* out) {
    const int width = c1 - c0;
    for (int k = 0; k < m.rows; ++k) {
        const double xk = x[k];
        const double* row = m.row(k) + c0;
        for (int j = 0; j < width; ++j) out[j] += xk * row[j];
    }
}

void rmsnorm(const double* x, const double* gain, int n, double eps, double* out) {
    double ms = 0.0;
    for (int i = 0; i < n; ++i) ms += x[i] * x[i];
    ms /= n;
    const double scale = 1.0 / std::sqrt(ms + eps);
    for (int i = 0; i < n; ++i) out[i] = gain[i] * x[i] * scale;
}

void softmax_inplace(double* x, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    for (int i = 0; i < n; ++i) x[i] /= sum;
}

bool all_finite(const double* x, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(x[i])) return false;
    return true;
}

bool all_finite(const Mat& m) { return all_finite(m.data.data(), m.data.size()); }
bool all_finite(const Vec& v) { return all_finite(v.data(), v.size()); }

} // namespace salab
