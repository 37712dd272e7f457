#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace salab {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles. All model math runs in 64-bit floats;
// reductions are written with a fixed left-to-right element order so repeated
// runs are bit-reproducible.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

    double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return data.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

double dot(const double* a, const double* b, int n);

// y[i] += a * x[i]
void axpy(double a, const double* x, double* y, int n);

double norm2(const double* x, int n);
double norm2(const Vec& x);

// out[r] = dot(m.row(r), x); m is rows x cols, x has cols entries.
void matvec_rows(const Mat& m, const double* x, double* out);

// out[j - c0] += sum_k x[k] * m(k, j) for j in [c0, c1). Row-vector times a
// column slice of m; x has m.rows entries.
void vecmat_slice(const double* x, const Mat& m, int c0, int c1, double* out);

// out_i = gain_i * x_i / sqrt(mean(x^2) + eps)
void rmsnorm(const double* x, const double* gain, int n, double eps, double* out);

// Numerically stable in-place softmax.
void softmax_inplace(double* x, int n);

bool all_finite(const double* x, size_t n);
bool all_finite(const Mat& m);
bool all_finite(const Vec& v);

} // namespace salab
