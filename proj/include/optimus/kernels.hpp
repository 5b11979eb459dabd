#pragma once

#include <algorithm>
#include <cmath>
#include <utility>

#include "optimus/tensor.hpp"

namespace optimus {

// All kernels use fixed loop orders so results are bit-reproducible across runs.

// ---- matmul family -----------------------------------------------------------

// [M,K] x [K,N] -> [M,N]; f64_acc accumulates each output element in double
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool f64_acc = false) {
    check(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 inputs required");
    check(a.dim(1) == b.dim(0), strcat_("matmul: inner dims differ: ", a.shape_str(), " x ",
                                        b.shape_str()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    if (f64_acc) {
        std::vector<double> row((size_t)n);
        for (int64_t i = 0; i < m; ++i) {
            std::fill(row.begin(), row.end(), 0.0);
            for (int64_t p = 0; p < k; ++p) {
                const double av = (double)pa[i * k + p];
                const T* bp = pb + p * n;
                for (int64_t j = 0; j < n; ++j) row[(size_t)j] += av * (double)bp[j];
            }
            for (int64_t j = 0; j < n; ++j) po[i * n + j] = (T)row[(size_t)j];
        }
    } else {
        for (int64_t i = 0; i < m; ++i) {
            T* op = po + i * n;
            std::fill(op, op + n, T(0));
            for (int64_t p = 0; p < k; ++p) {
                const T av = pa[i * k + p];
                const T* bp = pb + p * n;
                for (int64_t j = 0; j < n; ++j) op[j] += av * bp[j];
            }
        }
    }
    return out;
}

// a^T b: [K,M] x [K,N] -> [M,N] (weight-gradient shape, no materialized transpose)
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul_tn: rank-2 inputs required");
    check(a.dim(0) == b.dim(0), strcat_("matmul_tn: leading dims differ: ", a.shape_str(), " x ",
                                        b.shape_str()));
    const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t p = 0; p < k; ++p) {
        const T* ap = pa + p * m;
        const T* bp = pb + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const T av = ap[i];
            T* op = po + i * n;
            for (int64_t j = 0; j < n; ++j) op[j] += av * bp[j];
        }
    }
    return out;
}

// a b^T: [M,K] x [N,K] -> [M,N] (input-gradient shape)
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul_nt: rank-2 inputs required");
    check(a.dim(1) == b.dim(1), strcat_("matmul_nt: trailing dims differ: ", a.shape_str(), " x ",
                                        b.shape_str()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<T> out({m, n});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < m; ++i) {
        const T* ap = pa + i * k;
        T* op = po + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* bp = pb + j * k;
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += ap[p] * bp[p];
            op[j] = acc;
        }
    }
    return out;
}

// ---- grouped matmul -----------------------------------------------------------

inline void check_boundaries(const TensorI& boundaries, int64_t groups, int64_t rows,
                             const char* who) {
    check(boundaries.rank() == 1 && boundaries.dim(0) == groups + 1,
          strcat_(who, ": boundaries must have groups+1 entries"));
    check(boundaries(0) == 0, strcat_(who, ": boundaries must start at 0"));
    for (int64_t g = 0; g < groups; ++g)
        check(boundaries(g) <= boundaries(g + 1), strcat_(who, ": boundaries must be monotone"));
    check(boundaries(groups) == rows, strcat_(who, ": boundaries must end at the row count"));
}

// per-group matmul over contiguous row spans: rows [b[g], b[g+1]) use weights[g]
template <typename T>
Tensor<T> grouped_mm(const Tensor<T>& input, const Tensor<T>& weights, const TensorI& boundaries) {
    check(input.rank() == 2 && weights.rank() == 3, "grouped_mm: input [R,K1], weights [G,K1,K2]");
    check(input.dim(1) == weights.dim(1), "grouped_mm: inner dims differ");
    const int64_t groups = weights.dim(0), k1 = weights.dim(1), k2 = weights.dim(2);
    check_boundaries(boundaries, groups, input.dim(0), "grouped_mm");
    Tensor<T> out({input.dim(0), k2});
    const T* pi = input.data();
    const T* pw = weights.data();
    T* po = out.data();
    for (int64_t g = 0; g < groups; ++g) {
        const T* wg = pw + g * k1 * k2;
        for (int64_t i = boundaries(g); i < boundaries(g + 1); ++i) {
            T* op = po + i * k2;
            const T* ip = pi + i * k1;
            for (int64_t p = 0; p < k1; ++p) {
                const T av = ip[p];
                const T* wp = wg + p * k2;
                for (int64_t j = 0; j < k2; ++j) op[j] += av * wp[j];
            }
        }
    }
    return out;
}

// rows x weights[g]^T: input [R,K2], weights [G,K1,K2] -> [R,K1]
template <typename T>
Tensor<T> grouped_mm_nt(const Tensor<T>& input, const Tensor<T>& weights,
                        const TensorI& boundaries) {
    check(input.rank() == 2 && weights.rank() == 3, "grouped_mm_nt: input [R,K2], weights [G,K1,K2]");
    check(input.dim(1) == weights.dim(2), "grouped_mm_nt: trailing dims differ");
    const int64_t groups = weights.dim(0), k1 = weights.dim(1), k2 = weights.dim(2);
    check_boundaries(boundaries, groups, input.dim(0), "grouped_mm_nt");
    Tensor<T> out({input.dim(0), k1});
    const T* pi = input.data();
    const T* pw = weights.data();
    T* po = out.data();
    for (int64_t g = 0; g < groups; ++g) {
        const T* wg = pw + g * k1 * k2;
        for (int64_t i = boundaries(g); i < boundaries(g + 1); ++i) {
            const T* ip = pi + i * k2;
            T* op = po + i * k1;
            for (int64_t p = 0; p < k1; ++p) {
                const T* wp = wg + p * k2;
                T acc = 0;
                for (int64_t j = 0; j < k2; ++j) acc += ip[j] * wp[j];
                op[p] = acc;
            }
        }
    }
    return out;
}

// per-group x_g^T dy_g: x [R,K1], dy [R,K2] -> [G,K1,K2]
template <typename T>
Tensor<T> grouped_mm_weight_grad(const Tensor<T>& x, const Tensor<T>& dy,
                                 const TensorI& boundaries, int64_t groups) {
    check(x.rank() == 2 && dy.rank() == 2 && x.dim(0) == dy.dim(0),
          "grouped_mm_weight_grad: row counts differ");
    check_boundaries(boundaries, groups, x.dim(0), "grouped_mm_weight_grad");
    const int64_t k1 = x.dim(1), k2 = dy.dim(1);
    Tensor<T> out({groups, k1, k2});
    const T* px = x.data();
    const T* pd = dy.data();
    T* po = out.data();
    for (int64_t g = 0; g < groups; ++g) {
        T* wg = po + g * k1 * k2;
        for (int64_t i = boundaries(g); i < boundaries(g + 1); ++i) {
            const T* xp = px + i * k1;
            const T* dp = pd + i * k2;
            for (int64_t p = 0; p < k1; ++p) {
                const T xv = xp[p];
                T* wp = wg + p * k2;
                for (int64_t j = 0; j < k2; ++j) wp[j] += xv * dp[j];
            }
        }
    }
    return out;
}

// ---- softmax / topk ------------------------------------------------------------

// row-wise softmax over the last dim with max subtraction; exp/sum in double
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    check(x.rank() == 2, "softmax: rank-2 input required");
    const int64_t rows = x.dim(0), n = x.dim(1);
    check(n > 0, "softmax: empty rows");
    Tensor<T> out({rows, n});
    std::vector<double> e((size_t)n);
    for (int64_t i = 0; i < rows; ++i) {
        const T* xp = x.data() + i * n;
        T mx = xp[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xp[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            e[(size_t)j] = std::exp((double)xp[j] - (double)mx);
            sum += e[(size_t)j];
        }
        T* op = out.data() + i * n;
        for (int64_t j = 0; j < n; ++j) op[j] = (T)(e[(size_t)j] / sum);
    }
    return out;
}

// given probs = softmax(z) and dL/dprobs, return dL/dz
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& dprobs) {
    check(probs.same_shape(dprobs), "softmax_backward: shape mismatch");
    check(probs.rank() == 2, "softmax_backward: rank-2 input required");
    const int64_t rows = probs.dim(0), n = probs.dim(1);
    Tensor<T> out({rows, n});
    for (int64_t i = 0; i < rows; ++i) {
        const T* pp = probs.data() + i * n;
        const T* dp = dprobs.data() + i * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += (double)pp[j] * (double)dp[j];
        T* op = out.data() + i * n;
        for (int64_t j = 0; j < n; ++j) op[j] = (T)((double)pp[j] * ((double)dp[j] - dot));
    }
    return out;
}

// top-k per row, ordered by descending value; ties broken toward the lower index
template <typename T>
std::pair<Tensor<T>, TensorI> topk(const Tensor<T>& probs, int64_t k) {
    check(probs.rank() == 2, "topk: rank-2 input required");
    const int64_t rows = probs.dim(0), n = probs.dim(1);
    check(k >= 1 && k <= n, strcat_("topk: k=", k, " out of range for width ", n));
    Tensor<T> values({rows, k});
    TensorI indices({rows, k});
    std::vector<char> taken((size_t)n);
    for (int64_t i = 0; i < rows; ++i) {
        const T* pp = probs.data() + i * n;
        std::fill(taken.begin(), taken.end(), 0);
        for (int64_t c = 0; c < k; ++c) {
            int64_t best = -1;
            for (int64_t j = 0; j < n; ++j) {
                if (taken[(size_t)j]) continue;
                if (best < 0 || pp[j] > pp[best]) best = j;
            }
            taken[(size_t)best] = 1;
            values(i, c) = pp[best];
            indices(i, c) = best;
        }
    }
    return {std::move(values), std::move(indices)};
}

// ---- gated activation ----------------------------------------------------------

inline double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }

// silu(gate) * up, elementwise
template <typename T>
Tensor<T> silu_glu(const Tensor<T>& gate, const Tensor<T>& up) {
    check(gate.same_shape(up), "silu_glu: shape mismatch");
    Tensor<T> out(gate.shape());
    const T* pg = gate.data();
    const T* pu = up.data();
    T* po = out.data();
    for (int64_t i = 0; i < gate.numel(); ++i)
        po[i] = (T)(silu_scalar((double)pg[i]) * (double)pu[i]);
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> silu_glu_backward(const Tensor<T>& gate, const Tensor<T>& up,
                                                  const Tensor<T>& dout) {
    check(gate.same_shape(up) && gate.same_shape(dout), "silu_glu_backward: shape mismatch");
    Tensor<T> dgate(gate.shape()), dup(gate.shape());
    const T* pg = gate.data();
    const T* pu = up.data();
    const T* pd = dout.data();
    T* og = dgate.data();
    T* ou = dup.data();
    for (int64_t i = 0; i < gate.numel(); ++i) {
        const double x = (double)pg[i];
        const double s = 1.0 / (1.0 + std::exp(-x));
        const double dsilu = s * (1.0 + x * (1.0 - s));
        ou[i] = (T)(silu_scalar(x) * (double)pd[i]);
        og[i] = (T)((double)pu[i] * (double)pd[i] * dsilu);
    }
    return {std::move(dgate), std::move(dup)};
}

// ---- misc ----------------------------------------------------------------------

// exclusive prefix sum with the total appended: [L] -> [L+1]
inline TensorI prefix_sum(const TensorI& x) {
    check(x.rank() == 1, "prefix_sum: rank-1 input required");
    TensorI out({x.dim(0) + 1});
    int64_t acc = 0;
    for (int64_t i = 0; i < x.dim(0); ++i) {
        out(i) = acc;
        acc += x(i);
    }
    out(x.dim(0)) = acc;
    return out;
}

constexpr double kRmsNormEps = 1e-5;

// y = x / rms(x) * w, row-wise; rms uses eps inside the sqrt
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& w) {
    check(x.rank() == 2 && w.rank() == 1 && x.dim(1) == w.dim(0), "rmsnorm: x [R,H], w [H]");
    const int64_t rows = x.dim(0), h = x.dim(1);
    Tensor<T> out({rows, h});
    for (int64_t i = 0; i < rows; ++i) {
        const T* xp = x.data() + i * h;
        double ss = 0.0;
        for (int64_t j = 0; j < h; ++j) ss += (double)xp[j] * (double)xp[j];
        const double inv = 1.0 / std::sqrt(ss / (double)h + kRmsNormEps);
        T* op = out.data() + i * h;
        for (int64_t j = 0; j < h; ++j) op[j] = (T)((double)xp[j] * inv * (double)w(j));
    }
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> rmsnorm_backward(const Tensor<T>& x, const Tensor<T>& w,
                                                 const Tensor<T>& dy) {
    check(x.same_shape(dy), "rmsnorm_backward: shape mismatch");
    check(x.rank() == 2 && w.rank() == 1 && x.dim(1) == w.dim(0), "rmsnorm_backward: x [R,H], w [H]");
    const int64_t rows = x.dim(0), h = x.dim(1);
    Tensor<T> dx({rows, h});
    Tensor<T> dw({h});
    for (int64_t i = 0; i < rows; ++i) {
        const T* xp = x.data() + i * h;
        const T* dp = dy.data() + i * h;
        double ss = 0.0;
        for (int64_t j = 0; j < h; ++j) ss += (double)xp[j] * (double)xp[j];
        const double var = ss / (double)h + kRmsNormEps;
        const double inv = 1.0 / std::sqrt(var);
        double dot = 0.0;  // sum_j dy_j * w_j * x_j
        for (int64_t j = 0; j < h; ++j) dot += (double)dp[j] * (double)w(j) * (double)xp[j];
        T* op = dx.data() + i * h;
        for (int64_t j = 0; j < h; ++j) {
            const double term = (double)dp[j] * (double)w(j) * inv -
                                (double)xp[j] * dot * inv / (var * (double)h);
            op[j] = (T)term;
            dw(j) += (T)((double)dp[j] * (double)xp[j] * inv);
        }
    }
    return {std::move(dx), std::move(dw)};
}

// ---- tiny elementwise helpers ----------------------------------------------------

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    check(a.same_shape(b), "add_inplace: shape mismatch");
    T* pa = a.data();
    const T* pb = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) pa[i] += pb[i];
}

template <typename T>
void scaled_add_inplace(Tensor<T>& a, const Tensor<T>& b, T s) {
    check(a.same_shape(b), "scaled_add_inplace: shape mismatch");
    T* pa = a.data();
    const T* pb = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) pa[i] += s * pb[i];
}

template <typename T>
void scale_inplace(Tensor<T>& a, T s) {
    T* pa = a.data();
    for (int64_t i = 0; i < a.numel(); ++i) pa[i] *= s;
}

template <typename T>
double sum_of_squares(const Tensor<T>& a) {
    double acc = 0.0;
    const T* pa = a.data();
    for (int64_t i = 0; i < a.numel(); ++i) acc += (double)pa[i] * (double)pa[i];
    return acc;
}

// normal(0, std) filled tensor from a counter-based stream; layout-independent
template <typename T>
Tensor<T> normal_init(std::vector<int64_t> shape, uint64_t seed, uint64_t tag, double stddev) {
    Tensor<T> t(std::move(shape));
    T* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
        p[i] = (T)(normal_at(seed, tag, (uint64_t)i) * stddev);
    return t;
}

}  // namespace optimus
