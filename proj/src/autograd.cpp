#include "pdial/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace pdial {

namespace kernels {

namespace {

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 32;

// Computes a tile of C (R rows, W columns starting at j0) as
// C[r][j] (+)= sum_p A(r, p) * B[p][j], summing p in ascending order.
// A(r, p) = a[r * a_rs + p * a_ps].
template <class T, std::size_t R, std::size_t W>
void gemm_tile(const T* a, std::size_t a_rs, std::size_t a_ps, const T* b, std::size_t ldb, T* c, std::size_t ldc,
               std::size_t depth, std::size_t j0, bool accumulate) {
    T acc[R][W];
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < W; ++j) acc[r][j] = accumulate ? c[r * ldc + j0 + j] : T(0);
    }
    for (std::size_t p = 0; p < depth; ++p) {
        const T* __restrict brow = b + p * ldb + j0;
        for (std::size_t r = 0; r < R; ++r) {
            const T av = a[r * a_rs + p * a_ps];
            for (std::size_t j = 0; j < W; ++j) acc[r][j] += av * brow[j];
        }
    }
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < W; ++j) c[r * ldc + j0 + j] = acc[r][j];
    }
}

template <class T, std::size_t R>
void gemm_rows(const T* a, std::size_t a_rs, std::size_t a_ps, const T* b, T* c, std::size_t depth, std::size_t n,
               bool accumulate) {
    std::size_t j0 = 0;
    for (; j0 + kTileCols <= n; j0 += kTileCols) gemm_tile<T, R, kTileCols>(a, a_rs, a_ps, b, n, c, n, depth, j0, accumulate);
    if (j0 + 16 <= n) {
        gemm_tile<T, R, 16>(a, a_rs, a_ps, b, n, c, n, depth, j0, accumulate);
        j0 += 16;
    }
    if (j0 + 8 <= n) {
        gemm_tile<T, R, 8>(a, a_rs, a_ps, b, n, c, n, depth, j0, accumulate);
        j0 += 8;
    }
    if (j0 + 4 <= n) {
        gemm_tile<T, R, 4>(a, a_rs, a_ps, b, n, c, n, depth, j0, accumulate);
        j0 += 4;
    }
    for (; j0 < n; ++j0) gemm_tile<T, R, 1>(a, a_rs, a_ps, b, n, c, n, depth, j0, accumulate);
}

template <class T>
void gemm_generic(const T* a, std::size_t a_rs, std::size_t a_ps, const T* b, T* c, std::size_t rows,
                  std::size_t depth, std::size_t n, bool accumulate) {
    std::size_t i = 0;
    for (; i + kTileRows <= rows; i += kTileRows) {
        gemm_rows<T, kTileRows>(a + i * a_rs, a_rs, a_ps, b, c + i * n, depth, n, accumulate);
    }
    for (; i < rows; ++i) gemm_rows<T, 1>(a + i * a_rs, a_rs, a_ps, b, c + i * n, depth, n, accumulate);
}

constexpr std::size_t kLanes = 16;

// C[i][j] (+)= dot(A row i, B row j) for an R x S tile. Each dot product keeps
// kLanes partial sums over p, reduced in lane order, then adds the scalar tail.
template <class T, std::size_t R, std::size_t S>
void gemm_nt_tile(const T* a, const T* b, T* c, std::size_t k, std::size_t ldc, bool accumulate) {
    T acc[R][S][kLanes] = {};
    const std::size_t kv = k - k % kLanes;
    for (std::size_t p0 = 0; p0 < kv; p0 += kLanes) {
        for (std::size_t r = 0; r < R; ++r) {
            const T* __restrict ar = a + r * k + p0;
            for (std::size_t s = 0; s < S; ++s) {
                const T* __restrict bs = b + s * k + p0;
                for (std::size_t l = 0; l < kLanes; ++l) acc[r][s][l] += ar[l] * bs[l];
            }
        }
    }
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t s = 0; s < S; ++s) {
            T sum = T(0);
            for (std::size_t l = 0; l < kLanes; ++l) sum += acc[r][s][l];
            for (std::size_t p = kv; p < k; ++p) sum += a[r * k + p] * b[s * k + p];
            T& out = c[r * ldc + s];
            out = accumulate ? out + sum : sum;
        }
    }
}

template <class T, std::size_t R>
void gemm_nt_rows(const T* a, const T* b, T* c, std::size_t k, std::size_t n, bool accumulate) {
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) gemm_nt_tile<T, R, 4>(a, b + j * k, c + j, k, n, accumulate);
    for (; j < n; ++j) gemm_nt_tile<T, R, 1>(a, b + j * k, c + j, k, n, accumulate);
}

}  // namespace

template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    gemm_generic(a, k, 1, b, c, m, k, n, accumulate);
}

template <class T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    gemm_generic(a, 1, k, b, c, k, m, n, true);
}

template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) gemm_nt_rows<T, 4>(a + i * k, b, c + i * n, k, n, accumulate);
    for (; i < m; ++i) gemm_nt_rows<T, 1>(a + i * k, b, c + i * n, k, n, accumulate);
}

template <class T>
void transpose(const T* in, T* out, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
    }
}

template void gemm_nn<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t, bool);
template void gemm_nn<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);
template void gemm_tn_acc<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_tn_acc<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
template void gemm_nt<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t, bool);
template void gemm_nt<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);
template void transpose<float>(const float*, float*, std::size_t, std::size_t);
template void transpose<double>(const double*, double*, std::size_t, std::size_t);

}  // namespace kernels

namespace {

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
Var<T> make_result(Tensor<T> value, std::vector<NodePtr<T>> parents, std::function<void(Node<T>&)> fn,
                   const char* op) {
    if (!value.all_finite()) throw NumericalError(std::string("non-finite value produced by ") + op);
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& p : parents) needs = needs || p->requires_grad;
    }
    if (needs) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
        n->requires_grad = true;
    }
    return Var<T>(std::move(n));
}

void require_rank2(const Shape& s, const char* op) {
    if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(s));
}


}  // namespace

template <class T>
Var<T> constant(Tensor<T> value) {
    return make_result<T>(std::move(value), {}, nullptr, "const");
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    require_rank2(a.shape(), "matmul");
    require_rank2(b.shape(), "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Tensor<T> out(Shape{m, n});
    kernels::gemm_nn(a.value().data.data(), b.value().data.data(), out.data.data(), m, k, n, false);
    return make_result<T>(
        std::move(out), {a.node(), b.node()},
        [m, k, n](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                kernels::gemm_nt(self.grad.data.data(), pb.value.data.data(), pa.grad.data.data(), m, n, k, true);
            }
            if (pb.requires_grad) {
                kernels::gemm_tn_acc(pa.value.data.data(), self.grad.data.data(), pb.grad.data.data(), m, k, n);
            }
        },
        "matmul");
}

template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    require_rank2(a.shape(), "matmul_nt");
    require_rank2(b.shape(), "matmul_nt");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    if (b.shape()[1] != k) {
        throw DimensionError("matmul_nt: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    Tensor<T> out(Shape{m, n});
    kernels::gemm_nt(a.value().data.data(), b.value().data.data(), out.data.data(), m, k, n, false);
    return make_result<T>(
        std::move(out), {a.node(), b.node()},
        [m, k, n](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                kernels::gemm_nn(self.grad.data.data(), pb.value.data.data(), pa.grad.data.data(), m, n, k, true);
            }
            if (pb.requires_grad) {
                kernels::gemm_tn_acc(self.grad.data.data(), pa.value.data.data(), pb.grad.data.data(), m, n, k);
            }
        },
        "matmul_nt");
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor<T> out(a.shape());
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = av[i] + bv[i];
    return make_result<T>(
        std::move(out), {a.node(), b.node()},
        [](Node<T>& self) {
            for (auto& p : self.parents) {
                if (!p->requires_grad) continue;
                for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad.data[i] += self.grad.data[i];
            }
        },
        "add");
}

template <class T>
Var<T> add_bias(const Var<T>& a, const Var<T>& bias) {
    const std::size_t n = a.cols();
    if (bias.value().size() != n) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(a.shape()));
    }
    Tensor<T> out(a.shape());
    const std::size_t m = a.rows();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = a.value().data[i * n + j] + bias.value().data[j];
    }
    return make_result<T>(
        std::move(out), {a.node(), bias.node()},
        [m, n](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                for (std::size_t i = 0; i < m * n; ++i) pa.grad.data[i] += self.grad.data[i];
            }
            if (pb.requires_grad) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) pb.grad.data[j] += self.grad.data[i * n + j];
                }
            }
        },
        "add_bias");
}

template <class T>
Var<T> scale(const Var<T>& a, double c) {
    Tensor<T> out(a.shape());
    const T cc = static_cast<T>(c);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = cc * a.value().data[i];
    return make_result<T>(
        std::move(out), {a.node()},
        [cc](Node<T>& self) {
            auto& p = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad.data[i] += cc * self.grad.data[i];
        },
        "scale");
}

template <class T>
Var<T> linear_combination(std::span<const Var<T>> terms, std::span<const double> coefs) {
    if (terms.empty() || terms.size() != coefs.size()) {
        throw DimensionError("linear_combination: need one coefficient per term");
    }
    const Shape& s = terms[0].shape();
    for (const auto& t : terms) {
        if (t.shape() != s) {
            throw DimensionError("linear_combination: shape mismatch " + shape_str(s) + " vs " + shape_str(t.shape()));
        }
    }
    Tensor<T> out(s);
    std::vector<T> cs(coefs.begin(), coefs.end());
    for (std::size_t t = 0; t < terms.size(); ++t) {
        const auto& v = terms[t].value().data;
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += cs[t] * v[i];
    }
    std::vector<NodePtr<T>> parents;
    for (const auto& t : terms) parents.push_back(t.node());
    return make_result<T>(
        std::move(out), std::move(parents),
        [cs](Node<T>& self) {
            for (std::size_t t = 0; t < self.parents.size(); ++t) {
                auto& p = *self.parents[t];
                if (!p.requires_grad) continue;
                for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad.data[i] += cs[t] * self.grad.data[i];
            }
        },
        "linear_combination");
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

template <class T>
Var<T> gelu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    auto tanh_vals = std::make_shared<std::vector<T>>(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.value().data[i];
        const T t = std::tanh(T(kGeluC) * (v + T(kGeluA) * v * v * v));
        (*tanh_vals)[i] = t;
        out.data[i] = T(0.5) * v * (T(1) + t);
    }
    return make_result<T>(
        std::move(out), {x.node()},
        [tanh_vals](Node<T>& self) {
            auto& p = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const T v = p.value.data[i];
                const T t = (*tanh_vals)[i];
                const T dt = (T(1) - t * t) * T(kGeluC) * (T(1) + T(3 * kGeluA) * v * v);
                p.grad.data[i] += self.grad.data[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
            }
        },
        "gelu");
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.value().data[i];
        out.data[i] = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    }
    return make_result<T>(
        std::move(out), {x.node()},
        [](Node<T>& self) {
            auto& p = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const T y = self.value.data[i];
                p.grad.data[i] += self.grad.data[i] * y * (T(1) - y);
            }
        },
        "sigmoid");
}

template <class T>
Var<T> dropout(const Var<T>& x, double p, std::mt19937_64& rng) {
    if (p < 0.0 || p >= 1.0) throw ValueError("dropout probability must be in [0, 1)");
    if (p == 0.0) return x;
    std::bernoulli_distribution keep(1.0 - p);
    const T s = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.value().size());
    for (auto& m : mask) m = keep(rng) ? s : T(0);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = x.value().data[i] * mask[i];
    return make_result<T>(
        std::move(out), {x.node()},
        [mask = std::move(mask)](Node<T>& self) {
            auto& pn = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) pn.grad.data[i] += self.grad.data[i] * mask[i];
        },
        "dropout");
}

template <class T>
Var<T> softmax_masked(const Var<T>& x, std::span<const std::uint8_t> masked) {
    if (!masked.empty() && masked.size() != x.value().size()) {
        throw DimensionError("softmax_masked: mask has " + std::to_string(masked.size()) + " entries for input " +
                             shape_str(x.shape()));
    }
    const std::size_t n = x.cols(), m = x.rows();
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < m; ++r) {
        const T* in = x.value().data.data() + r * n;
        T* o = out.data.data() + r * n;
        const std::uint8_t* mk = masked.empty() ? nullptr : masked.data() + r * n;
        T mx = T(0);
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (mk && mk[j]) continue;
            if (!any || in[j] > mx) mx = in[j];
            any = true;
        }
        if (!any) throw ValueError("softmax_masked: row " + std::to_string(r) + " is fully masked");
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (mk && mk[j]) {
                o[j] = T(0);
                continue;
            }
            o[j] = std::exp(in[j] - mx);
            total += static_cast<double>(o[j]);
        }
        const T inv = static_cast<T>(1.0 / total);
        for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
    }
    return make_result<T>(
        std::move(out), {x.node()},
        [m, n](Node<T>& self) {
            auto& p = *self.parents[0];
            for (std::size_t r = 0; r < m; ++r) {
                const T* y = self.value.data.data() + r * n;
                const T* dy = self.grad.data.data() + r * n;
                T* dx = p.grad.data.data() + r * n;
                T dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
                for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        },
        "softmax_masked");
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps) {
    const std::size_t d = x.cols(), m = x.rows();
    if (gain.value().size() != d || bias.value().size() != d) {
        throw DimensionError("layer_norm: parameters " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                             " do not match input " + shape_str(x.shape()));
    }
    Tensor<T> out(x.shape());
    std::vector<T> xhat(x.value().size());
    std::vector<T> inv_std(m);
    const T* g = gain.value().data.data();
    const T* b = bias.value().data.data();
    for (std::size_t r = 0; r < m; ++r) {
        const T* in = x.value().data.data() + r * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (in[j] - mean) * is;
            xhat[r * d + j] = h;
            out.data[r * d + j] = g[j] * h + b[j];
        }
    }
    return make_result<T>(
        std::move(out), {x.node(), gain.node(), bias.node()},
        [m, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const T* g = pg.value.data.data();
            std::vector<T> dxhat(d);
            for (std::size_t r = 0; r < m; ++r) {
                const T* dy = self.grad.data.data() + r * d;
                const T* h = xhat.data() + r * d;
                if (pg.requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) pg.grad.data[j] += dy[j] * h[j];
                }
                if (pb.requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) pb.grad.data[j] += dy[j];
                }
                if (!px.requires_grad) continue;
                T s1 = 0, s2 = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    dxhat[j] = dy[j] * g[j];
                    s1 += dxhat[j];
                    s2 += dxhat[j] * h[j];
                }
                const T invd = T(1) / static_cast<T>(d);
                T* dx = px.grad.data.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dx[j] += inv_std[r] * (dxhat[j] - invd * s1 - h[j] * invd * s2);
                }
            }
        },
        "layer_norm");
}

template <class T>
Var<T> mean_rows(const Var<T>& x) {
    const std::size_t m = x.rows(), n = x.cols();
    Tensor<T> out(Shape{1, n});
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t j = 0; j < n; ++j) out.data[j] += x.value().data[r * n + j];
    }
    for (auto& v : out.data) v /= static_cast<T>(m);
    return make_result<T>(
        std::move(out), {x.node()},
        [m, n](Node<T>& self) {
            auto& p = *self.parents[0];
            const T inv = T(1) / static_cast<T>(m);
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t j = 0; j < n; ++j) p.grad.data[r * n + j] += self.grad.data[j] * inv;
            }
        },
        "mean_rows");
}

template <class T>
Var<T> sum(const Var<T>& x) {
    double total = 0;
    for (T v : x.value().data) total += v;
    return make_result<T>(
        Tensor<T>::scalar(static_cast<T>(total)), {x.node()},
        [](Node<T>& self) {
            auto& p = *self.parents[0];
            const T g = self.grad.data[0];
            for (auto& v : p.grad.data) v += g;
        },
        "sum");
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets, std::optional<int> ignore_index) {
    const std::size_t n = logits.rows(), v = logits.cols();
    if (targets.size() != n) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_str(logits.shape()));
    }
    std::vector<double> probs(n * v, 0.0);
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const int t = targets[r];
        if (ignore_index && t == *ignore_index) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw ValueError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(v));
        }
        const T* row = logits.value().data.data() + r * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[r * v + j] = std::exp(static_cast<double>(row[j]) - mx);
            z += probs[r * v + j];
        }
        for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
        total += -(static_cast<double>(row[t]) - mx - std::log(z));
        ++counted;
    }
    if (counted == 0) throw ValueError("cross_entropy: every position is ignored");
    std::vector<int> tg(targets.begin(), targets.end());
    return make_result<T>(
        Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(counted))), {logits.node()},
        [n, v, counted, tg = std::move(tg), probs = std::move(probs), ignore_index](Node<T>& self) {
            auto& p = *self.parents[0];
            const double g = static_cast<double>(self.grad.data[0]) / static_cast<double>(counted);
            for (std::size_t r = 0; r < n; ++r) {
                if (ignore_index && tg[r] == *ignore_index) continue;
                T* dx = p.grad.data.data() + r * v;
                for (std::size_t j = 0; j < v; ++j) {
                    const double onehot = static_cast<std::size_t>(tg[r]) == j ? 1.0 : 0.0;
                    dx[j] += static_cast<T>(g * (probs[r * v + j] - onehot));
                }
            }
        },
        "cross_entropy");
}

template <class T>
Var<T> bce_with_logits(const Var<T>& logits, std::span<const double> targets) {
    const std::size_t n = logits.value().size();
    if (targets.size() != n) throw DimensionError("bce_with_logits: target count does not match logits");
    if (n == 0) throw ValueError("bce_with_logits: empty input");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = logits.value().data[i];
        const double r = targets[i];
        total += std::max(z, 0.0) - r * z + std::log1p(std::exp(-std::abs(z)));
    }
    std::vector<double> tg(targets.begin(), targets.end());
    return make_result<T>(
        Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n))), {logits.node()},
        [n, tg = std::move(tg)](Node<T>& self) {
            auto& p = *self.parents[0];
            const double g = static_cast<double>(self.grad.data[0]) / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double z = p.value.data[i];
                const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
                p.grad.data[i] += static_cast<T>(g * (s - tg[i]));
            }
        },
        "bce_with_logits");
}

template <class T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> ids) {
    const std::size_t v = table.rows(), d = table.cols();
    if (ids.empty()) throw ValueError("gather_rows: empty index list");
    Tensor<T> out(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= v) {
            throw ValueError("gather_rows: index " + std::to_string(ids[i]) + " outside table of " +
                             std::to_string(v) + " rows");
        }
        std::copy_n(table.value().data.data() + ids[i] * d, d, out.data.data() + i * d);
    }
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    return make_result<T>(
        std::move(out), {table.node()},
        [d, idx = std::move(idx)](Node<T>& self) {
            auto& p = *self.parents[0];
            for (std::size_t i = 0; i < idx.size(); ++i) {
                T* dst = p.grad.data.data() + idx[i] * d;
                const T* src = self.grad.data.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        },
        "gather_rows");
}

template <class T>
Var<T> gather_mean_rows(const Var<T>& table, const std::vector<std::vector<std::size_t>>& sets) {
    const std::size_t v = table.rows(), d = table.cols();
    if (sets.empty()) throw ValueError("gather_mean_rows: empty index list");
    Tensor<T> out(Shape{sets.size(), d});
    for (std::size_t i = 0; i < sets.size(); ++i) {
        if (sets[i].empty()) continue;
        T* o = out.data.data() + i * d;
        for (std::size_t id : sets[i]) {
            if (id >= v) {
                throw ValueError("gather_mean_rows: index " + std::to_string(id) + " outside table of " +
                                 std::to_string(v) + " rows");
            }
            const T* src = table.value().data.data() + id * d;
            for (std::size_t j = 0; j < d; ++j) o[j] += src[j];
        }
        const T inv = T(1) / static_cast<T>(sets[i].size());
        for (std::size_t j = 0; j < d; ++j) o[j] *= inv;
    }
    return make_result<T>(
        std::move(out), {table.node()},
        [d, sets](Node<T>& self) {
            auto& p = *self.parents[0];
            for (std::size_t i = 0; i < sets.size(); ++i) {
                if (sets[i].empty()) continue;
                const T inv = T(1) / static_cast<T>(sets[i].size());
                const T* src = self.grad.data.data() + i * d;
                for (std::size_t id : sets[i]) {
                    T* dst = p.grad.data.data() + id * d;
                    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j] * inv;
                }
            }
        },
        "gather_mean_rows");
}

template <class T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end) {
    require_rank2(x.shape(), "slice_cols");
    const std::size_t m = x.rows(), n = x.cols();
    if (begin >= end || end > n) {
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") invalid for " + shape_str(x.shape()));
    }
    const std::size_t w = end - begin;
    Tensor<T> out(Shape{m, w});
    for (std::size_t r = 0; r < m; ++r) {
        std::copy_n(x.value().data.data() + r * n + begin, w, out.data.data() + r * w);
    }
    return make_result<T>(
        std::move(out), {x.node()},
        [m, n, w, begin](Node<T>& self) {
            auto& p = *self.parents[0];
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t j = 0; j < w; ++j) p.grad.data[r * n + begin + j] += self.grad.data[r * w + j];
            }
        },
        "slice_cols");
}

template <class T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
    if (parts.empty()) throw ValueError("concat_cols: nothing to concatenate");
    const std::size_t m = parts[0].rows();
    std::size_t n = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        require_rank2(p.shape(), "concat_cols");
        if (p.rows() != m) {
            throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        widths.push_back(p.cols());
        n += p.cols();
    }
    Tensor<T> out(Shape{m, n});
    std::size_t off = 0;
    std::vector<NodePtr<T>> parents;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t r = 0; r < m; ++r) {
            std::copy_n(p.value().data.data() + r * w, w, out.data.data() + r * n + off);
        }
        off += w;
        parents.push_back(p.node());
    }
    return make_result<T>(
        std::move(out), std::move(parents),
        [m, n, widths = std::move(widths)](Node<T>& self) {
            std::size_t o = 0;
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                auto& p = *self.parents[k];
                const std::size_t w = widths[k];
                if (p.requires_grad) {
                    for (std::size_t r = 0; r < m; ++r) {
                        for (std::size_t j = 0; j < w; ++j) p.grad.data[r * w + j] += self.grad.data[r * n + o + j];
                    }
                }
                o += w;
            }
        },
        "concat_cols");
}

template <class T>
void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) {
        throw DimensionError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node<T>* n : order) {
        if (!n->is_leaf) n->grad = Tensor<T>(n->value.shape);
    }
    loss.node()->grad.data[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
    for (Node<T>* n : order) {
        if (!n->is_leaf) n->grad = Tensor<T>();
    }
}

#define PDIAL_INSTANTIATE(T)                                                                                 \
    template Var<T> constant<T>(Tensor<T>);                                                                  \
    template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                                 \
    template Var<T> matmul_nt<T>(const Var<T>&, const Var<T>&);                                              \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                    \
    template Var<T> add_bias<T>(const Var<T>&, const Var<T>&);                                               \
    template Var<T> scale<T>(const Var<T>&, double);                                                         \
    template Var<T> linear_combination<T>(std::span<const Var<T>>, std::span<const double>);                 \
    template Var<T> gelu<T>(const Var<T>&);                                                                  \
    template Var<T> sigmoid<T>(const Var<T>&);                                                               \
    template Var<T> dropout<T>(const Var<T>&, double, std::mt19937_64&);                                     \
    template Var<T> softmax_masked<T>(const Var<T>&, std::span<const std::uint8_t>);                         \
    template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, double);                      \
    template Var<T> mean_rows<T>(const Var<T>&);                                                             \
    template Var<T> sum<T>(const Var<T>&);                                                                   \
    template Var<T> cross_entropy<T>(const Var<T>&, std::span<const int>, std::optional<int>);               \
    template Var<T> bce_with_logits<T>(const Var<T>&, std::span<const double>);                              \
    template Var<T> gather_rows<T>(const Var<T>&, std::span<const std::size_t>);                             \
    template Var<T> gather_mean_rows<T>(const Var<T>&, const std::vector<std::vector<std::size_t>>&);        \
    template Var<T> slice_cols<T>(const Var<T>&, std::size_t, std::size_t);                                 \
    template Var<T> concat_cols<T>(std::span<const Var<T>>);                                                 \
    template void backward<T>(const Var<T>&);

PDIAL_INSTANTIATE(float)
PDIAL_INSTANTIATE(double)

#undef PDIAL_INSTANTIATE

}  // namespace pdial
