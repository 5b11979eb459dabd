#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "optimus/kernels.hpp"
#include "optimus/tensor.hpp"

namespace tu {

using optimus::Tensor;

inline double rel_err(double a, double b) {
    const double scale = std::max({1.0, std::fabs(a), std::fabs(b)});
    return std::fabs(a - b) / scale;
}

template <typename T>
Tensor<T> randn(std::vector<int64_t> shape, uint64_t seed, double stddev = 1.0) {
    return optimus::normal_init<T>(std::move(shape), seed, 0, stddev);
}

template <typename T>
void expect_tensor_near(const Tensor<T>& got, const Tensor<T>& want, double tol,
                        const char* what = "") {
    ASSERT_EQ(got.shape(), want.shape()) << what;
    for (int64_t i = 0; i < got.numel(); ++i)
        ASSERT_LE(rel_err((double)got.data()[i], (double)want.data()[i]), tol)
            << what << " at flat index " << i << ": got " << got.data()[i] << " want "
            << want.data()[i];
}

template <typename T>
void expect_tensor_eq(const Tensor<T>& got, const Tensor<T>& want, const char* what = "") {
    ASSERT_EQ(got.shape(), want.shape()) << what;
    for (int64_t i = 0; i < got.numel(); ++i)
        ASSERT_EQ(got.data()[i], want.data()[i]) << what << " at flat index " << i;
}

// central finite difference of a scalar function with respect to one tensor entry
inline double fd_wrt(optimus::TensorD& x, int64_t flat, const std::function<double()>& f,
                     double h = 1e-6) {
    double* p = x.data() + flat;
    const double saved = *p;
    *p = saved + h;
    const double fp = f();
    *p = saved - h;
    const double fm = f();
    *p = saved;
    return (fp - fm) / (2.0 * h);
}

// checks analytic gradient of f with respect to every entry of x
inline void check_grad_fd(optimus::TensorD& x, const optimus::TensorD& analytic,
                          const std::function<double()>& f, double tol = 1e-5,
                          const char* what = "") {
    ASSERT_EQ(x.shape(), analytic.shape()) << what;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double num = fd_wrt(x, i, f);
        ASSERT_LE(rel_err(analytic.data()[i], num), tol)
            << what << " grad mismatch at flat index " << i << ": analytic "
            << analytic.data()[i] << " numeric " << num;
    }
}

}  // namespace tu
