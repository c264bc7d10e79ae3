#include "dkn/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "dkn/ops.hpp"

namespace dkn {

KernelFamily kernel_family_from_string(const std::string& s) {
    if (s == "linear") return KernelFamily::Linear;
    if (s == "rbf") return KernelFamily::Rbf;
    throw ConfigError("unknown kernel family: " + s);
}

std::string to_string(KernelFamily f) {
    return f == KernelFamily::Linear ? "linear" : "rbf";
}

namespace {

template <typename T>
void require_b_slice(const Tensor<T>& b, const PatchTable& table) {
    if (b.rank() != 3 || b.dim(0) != table.h || b.dim(1) != table.w)
        throw ShapeError("kernel features must be [h,w,N_b] matching the patch table, got " +
                         shape_str(b.shape));
}

template <typename T>
void require_positive(const Tensor<T>& b) {
    for (const T& v : b.data)
        if (!(v > T(0)))
            throw DomainError("kernel features must be strictly positive (softmax output)");
}

// RBF affinity between the N_b-vectors at two sites.
template <typename T>
T rbf_affinity(const T* bi, const T* bj, int n_b, double sigma) {
    double d2 = 0.0;
    for (int m = 0; m < n_b; ++m) {
        const double d = static_cast<double>(bi[m]) - static_cast<double>(bj[m]);
        d2 += d * d;
    }
    return static_cast<T>(std::exp(-d2 / (2.0 * sigma)));
}

// Shared CSR assembly: per row j, accumulate over covering centers. The
// affinity of center i and site j is b_m[j] (linear, per feature m) or the
// RBF value (single matrix); entries are k(i,j)*k(i,j')/S(i).
template <typename T>
SparseKernel<T> assemble(const Tensor<T>& b, const PatchTable& table, KernelFamily family,
                         double sigma) {
    require_b_slice(b, table);
    require_positive(b);
    if (family == KernelFamily::Rbf && !(sigma > 0.0))
        throw DomainError("rbf kernel requires sigma > 0");
    const int n = table.num_sites();
    const int n_b = b.dim(2);

    SparseKernel<T> K;
    K.n = n;
    K.h = table.h;
    K.w = table.w;
    K.p = table.p;
    K.s = table.s;
    K.family = family;
    K.sigma = sigma;
    K.row_offsets.assign(static_cast<std::size_t>(n) + 1, 0);

    // Per-center affinity row sums. Linear: one per feature m.
    const int nc = table.num_centers();
    const int terms = family == KernelFamily::Linear ? n_b : 1;
    std::vector<double> S(static_cast<std::size_t>(nc) * terms, 0.0);
    for (int ci = 0; ci < nc; ++ci) {
        const int i0 = table.centers[ci];
        for (const int* j = table.members_begin(ci); j != table.members_end(ci); ++j) {
            if (family == KernelFamily::Linear) {
                for (int m = 0; m < n_b; ++m)
                    S[static_cast<std::size_t>(ci) * n_b + m] += b.data[*j * n_b + m];
            } else {
                S[ci] += rbf_affinity(&b.data[i0 * n_b], &b.data[*j * n_b], n_b, sigma);
            }
        }
    }

    std::vector<double> acc(n, 0.0);
    std::vector<int> touched;
    for (int j = 0; j < n; ++j) {
        touched.clear();
        for (int t = table.site_offsets[j]; t < table.site_offsets[j + 1]; ++t) {
            const int ci = table.site_centers[t];
            const int i0 = table.centers[ci];
            if (family == KernelFamily::Linear) {
                for (int m = 0; m < n_b; ++m) {
                    const double f = b.data[j * n_b + m] / S[static_cast<std::size_t>(ci) * n_b + m];
                    for (const int* jp = table.members_begin(ci); jp != table.members_end(ci);
                         ++jp) {
                        if (acc[*jp] == 0.0) touched.push_back(*jp);
                        acc[*jp] += f * b.data[*jp * n_b + m];
                    }
                }
            } else {
                const T kj = rbf_affinity(&b.data[i0 * n_b], &b.data[j * n_b], n_b, sigma);
                const double f = kj / S[ci];
                for (const int* jp = table.members_begin(ci); jp != table.members_end(ci); ++jp) {
                    const T kjp = rbf_affinity(&b.data[i0 * n_b], &b.data[*jp * n_b], n_b, sigma);
                    if (acc[*jp] == 0.0) touched.push_back(*jp);
                    acc[*jp] += f * kjp;
                }
            }
        }
        std::sort(touched.begin(), touched.end());
        for (int col : touched) {
            K.col_indices.push_back(col);
            K.values.push_back(static_cast<T>(acc[col]));
            acc[col] = 0.0;
        }
        K.row_offsets[static_cast<std::size_t>(j) + 1] = static_cast<int>(K.col_indices.size());
    }
#ifndef NDEBUG
    K.validate();
#endif
    return K;
}

}  // namespace

template <typename T>
Normalizer<T> compute_normalizer(const Tensor<T>& b_hw, const PatchTable& table) {
    require_b_slice(b_hw, table);
    require_positive(b_hw);
    const int n_b = b_hw.dim(2);
    Normalizer<T> norm;
    norm.num_centers = table.num_centers();
    norm.n_b = n_b;
    norm.d.assign(static_cast<std::size_t>(norm.num_centers) * n_b, T(0));
    for (int ci = 0; ci < norm.num_centers; ++ci) {
        for (int m = 0; m < n_b; ++m) {
            double s = 0.0;
            for (const int* j = table.members_begin(ci); j != table.members_end(ci); ++j)
                s += b_hw.data[*j * n_b + m];
            if (!(s > 0.0) || !std::isfinite(s))
                throw DomainError("kernel normaliser is not finite and positive");
            norm.d[static_cast<std::size_t>(ci) * n_b + m] = static_cast<T>(1.0 / s);
        }
    }
    return norm;
}

template <typename T>
SparseKernel<T> build_kernel(const Tensor<T>& b_hw, const PatchTable& table) {
    return assemble(b_hw, table, KernelFamily::Linear, 0.0);
}

template <typename T>
SparseKernel<T> build_kernel_rbf(const Tensor<T>& b_hw, const PatchTable& table, double sigma) {
    return assemble(b_hw, table, KernelFamily::Rbf, sigma);
}

template <typename T>
std::vector<T> SparseKernel<T>::matvec(const std::vector<T>& x) const {
    if (x.size() != static_cast<std::size_t>(n))
        throw ShapeError("sparse matvec: vector length " + std::to_string(x.size()) +
                         " != kernel dimension " + std::to_string(n));
    std::vector<T> y(static_cast<std::size_t>(n), T(0));
    for (int r = 0; r < n; ++r) {
        double acc = 0.0;
        for (int t = row_offsets[r]; t < row_offsets[r + 1]; ++t)
            acc += static_cast<double>(values[t]) * x[col_indices[t]];
        y[r] = static_cast<T>(acc);
    }
    return y;
}

template <typename T>
Tensor<T> SparseKernel<T>::apply(const Tensor<T>& alpha_hw) const {
    if (alpha_hw.rank() != 2 || alpha_hw.dim(0) != h || alpha_hw.dim(1) != w)
        throw ShapeError("apply: code vector must be [h,w] matching the kernel grid");
    Tensor<T> out({h, w}, T(0));
    out.data = matvec(alpha_hw.data);
    return out;
}

template <typename T>
Tensor<T> SparseKernel<T>::row_image(int y, int x) const {
    if (y < 0 || y >= h || x < 0 || x >= w)
        throw IndexError("kernel row site (" + std::to_string(y) + "," + std::to_string(x) +
                         ") outside " + std::to_string(h) + "x" + std::to_string(w) + " grid");
    Tensor<T> img({h, w}, T(0));
    const int r = y * w + x;
    for (int t = row_offsets[r]; t < row_offsets[r + 1]; ++t)
        img.data[col_indices[t]] = values[t];
    return img;
}

template <typename T>
void SparseKernel<T>::validate() const {
    auto value_at = [&](int r, int c) -> T {
        for (int t = row_offsets[r]; t < row_offsets[r + 1]; ++t)
            if (col_indices[t] == c) return values[t];
        return T(0);
    };
    for (int r = 0; r < n; ++r) {
        for (int t = row_offsets[r]; t < row_offsets[r + 1]; ++t) {
            const int c = col_indices[t];
            const T v = values[t];
            if (!(v >= T(0))) throw DomainError("kernel matrix has a negative entry");
            if (std::abs(static_cast<double>(v) - static_cast<double>(value_at(c, r))) > 1e-6)
                throw DomainError("kernel matrix is not symmetric at (" + std::to_string(r) +
                                  "," + std::to_string(c) + ")");
            const int dy = std::abs(r / w - c / w), dx = std::abs(r % w - c % w);
            if (std::max(dy, dx) > p - 1)
                throw DomainError("kernel entry outside the Chebyshev-(p-1) band");
        }
    }
}

template <typename T>
Tensor<T> kernel_apply(const Tensor<T>& b, const Tensor<T>& alpha,
                       std::shared_ptr<const PatchTable> table, KernelFamily family,
                       double sigma) {
    if (b.rank() != 4 || alpha.rank() != 4)
        throw ShapeError("kernel_apply expects [N,h,w,C*N_b] and [N,h,w,C]");
    const int N = alpha.dim(0), h = alpha.dim(1), w = alpha.dim(2), C = alpha.dim(3);
    if (b.dim(0) != N || b.dim(1) != h || b.dim(2) != w || b.dim(3) % C != 0)
        throw ShapeError("kernel_apply: feature tensors disagree, b " + shape_str(b.shape) +
                         " alpha " + shape_str(alpha.shape));
    if (!table || table->h != h || table->w != w)
        throw ShapeError("kernel_apply: patch table does not match feature grid");
    const int n_b = b.dim(3) / C;
    if (family == KernelFamily::Rbf && !(sigma > 0.0))
        throw DomainError("rbf kernel requires sigma > 0");

    const PatchTable& tab = *table;
    const int n = h * w;
    const int nc = tab.num_centers();
    const int Cb = b.dim(3);

    // Unit patches give K = I exactly (softmax groups sum to one), so the
    // feature map passes through bitwise. The b-gradient g*alpha survives;
    // the softmax Jacobian upstream annihilates it.
    if (tab.p == 1 && tab.s == 1) {
        Tensor<T> out = alpha.detached();
        Tape<T>* tape = common_tape<T>({&b, &alpha});
        if (!tape) return out;
        out.tape = tape;
        out.node = tape->record(
            {b.node, alpha.node}, out.size(),
            [pb = b.node, pa = alpha.node, av = alpha.data, n_b, C](Tape<T>& t,
                                                                    const std::vector<T>& g) {
                if (pa >= 0) {
                    auto& ga = t.grad_slot(pa);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (pb >= 0) {
                    auto& gb = t.grad_slot(pb);
                    const std::size_t sites = g.size() / C;
                    for (std::size_t s = 0; s < sites; ++s)
                        for (int c = 0; c < C; ++c)
                            for (int m = 0; m < n_b; ++m)
                                gb[(s * C + c) * n_b + m] += g[s * C + c] * av[s * C + c];
                }
            });
        return out;
    }

    Tensor<T> out({N, h, w, C}, T(0));
    std::vector<T> kbuf(static_cast<std::size_t>(tab.p) * tab.p);
    for (int item = 0; item < N; ++item) {
        for (int c = 0; c < C; ++c) {
            const T* bp = &b.data[static_cast<std::size_t>(item) * n * Cb + c * n_b];
            const T* ap = &alpha.data[static_cast<std::size_t>(item) * n * C + c];
            T* op = &out.data[static_cast<std::size_t>(item) * n * C + c];
            for (int ci = 0; ci < nc; ++ci) {
                const int* mb = tab.members_begin(ci);
                const int cnt = tab.member_count(ci);
                if (family == KernelFamily::Linear) {
                    for (int m = 0; m < n_b; ++m) {
                        double S = 0.0, P = 0.0;
                        for (int k = 0; k < cnt; ++k) {
                            const T bv = bp[static_cast<std::size_t>(mb[k]) * Cb + m];
                            S += bv;
                            P += static_cast<double>(bv) * ap[static_cast<std::size_t>(mb[k]) * C];
                        }
                        const T r = static_cast<T>(P / S);
                        for (int k = 0; k < cnt; ++k)
                            op[static_cast<std::size_t>(mb[k]) * C] +=
                                bp[static_cast<std::size_t>(mb[k]) * Cb + m] * r;
                    }
                } else {
                    const int i0 = tab.centers[ci];
                    double S = 0.0, P = 0.0;
                    for (int k = 0; k < cnt; ++k) {
                        double d2 = 0.0;
                        for (int m = 0; m < n_b; ++m) {
                            const double d =
                                static_cast<double>(bp[static_cast<std::size_t>(i0) * Cb + m]) -
                                static_cast<double>(bp[static_cast<std::size_t>(mb[k]) * Cb + m]);
                            d2 += d * d;
                        }
                        kbuf[k] = static_cast<T>(std::exp(-d2 / (2.0 * sigma)));
                        S += kbuf[k];
                        P += static_cast<double>(kbuf[k]) * ap[static_cast<std::size_t>(mb[k]) * C];
                    }
                    const T r = static_cast<T>(P / S);
                    for (int k = 0; k < cnt; ++k)
                        op[static_cast<std::size_t>(mb[k]) * C] += kbuf[k] * r;
                }
            }
        }
    }

#ifndef NDEBUG
    check_finite(out, "kernel_apply");
#endif
    Tape<T>* tape = common_tape<T>({&b, &alpha});
    if (!tape) return out;
    out.tape = tape;
    out.node = tape->record(
        {b.node, alpha.node}, out.size(),
        [pb = b.node, pa = alpha.node, bv = b.data, av = alpha.data, table, family, sigma, N, h,
         w, C, n_b, Cb](Tape<T>& t, const std::vector<T>& g) {
            const PatchTable& tab = *table;
            const int n = h * w;
            const int nc = tab.num_centers();
            std::vector<T>* gb = pb >= 0 ? &t.grad_slot(pb) : nullptr;
            std::vector<T>* ga = pa >= 0 ? &t.grad_slot(pa) : nullptr;
            std::vector<T> kbuf(static_cast<std::size_t>(tab.p) * tab.p);
            for (int item = 0; item < N; ++item) {
                for (int c = 0; c < C; ++c) {
                    const T* bp = &bv[static_cast<std::size_t>(item) * n * Cb + c * n_b];
                    const T* ap = &av[static_cast<std::size_t>(item) * n * C + c];
                    const T* gp = &g[static_cast<std::size_t>(item) * n * C + c];
                    T* gbp = gb ? &(*gb)[static_cast<std::size_t>(item) * n * Cb + c * n_b] : nullptr;
                    T* gap = ga ? &(*ga)[static_cast<std::size_t>(item) * n * C + c] : nullptr;
                    for (int ci = 0; ci < nc; ++ci) {
                        const int* mb = tab.members_begin(ci);
                        const int cnt = tab.member_count(ci);
                        if (family == KernelFamily::Linear) {
                            for (int m = 0; m < n_b; ++m) {
                                double S = 0.0, P = 0.0, G = 0.0;
                                for (int k = 0; k < cnt; ++k) {
                                    const std::size_t j = static_cast<std::size_t>(mb[k]);
                                    const double bw = bp[j * Cb + m];
                                    S += bw;
                                    P += bw * ap[j * C];
                                    G += static_cast<double>(gp[j * C]) * bw;
                                }
                                const double r = P / S;      // projected code value
                                const double q = G / S;      // projected upstream gradient
                                const double sshift = q * r; // dL/dS contribution (negated)
                                for (int k = 0; k < cnt; ++k) {
                                    const std::size_t j = static_cast<std::size_t>(mb[k]);
                                    if (gbp)
                                        gbp[j * Cb + m] += static_cast<T>(
                                            gp[j * C] * r + ap[j * C] * q - sshift);
                                    if (gap) gap[j * C] += static_cast<T>(bp[j * Cb + m] * q);
                                }
                            }
                        } else {
                            const int i0 = tab.centers[ci];
                            double S = 0.0, P = 0.0, G = 0.0;
                            for (int k = 0; k < cnt; ++k) {
                                const std::size_t j = static_cast<std::size_t>(mb[k]);
                                double d2 = 0.0;
                                for (int m = 0; m < n_b; ++m) {
                                    const double d =
                                        static_cast<double>(bp[static_cast<std::size_t>(i0) * Cb + m]) -
                                        static_cast<double>(bp[j * Cb + m]);
                                    d2 += d * d;
                                }
                                kbuf[k] = static_cast<T>(std::exp(-d2 / (2.0 * sigma)));
                                S += kbuf[k];
                                P += static_cast<double>(kbuf[k]) * ap[j * C];
                                G += static_cast<double>(gp[j * C]) * kbuf[k];
                            }
                            const double r = P / S;
                            const double q = G / S;
                            const double sshift = q * r;
                            for (int k = 0; k < cnt; ++k) {
                                const std::size_t j = static_cast<std::size_t>(mb[k]);
                                const double dk =
                                    gp[j * C] * r + ap[j * C] * q - sshift;  // dL/dk(i0,j)
                                if (gap) gap[j * C] += static_cast<T>(kbuf[k] * q);
                                if (gbp) {
                                    const double w0 = dk * kbuf[k] / sigma;
                                    for (int m = 0; m < n_b; ++m) {
                                        const double diff =
                                            static_cast<double>(
                                                bp[static_cast<std::size_t>(i0) * Cb + m]) -
                                            static_cast<double>(bp[j * Cb + m]);
                                        gbp[j * Cb + m] += static_cast<T>(w0 * diff);
                                        gbp[static_cast<std::size_t>(i0) * Cb + m] -=
                                            static_cast<T>(w0 * diff);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    return out;
}

#define DKN_INSTANTIATE_KERNEL(T)                                                            \
    template struct SparseKernel<T>;                                                         \
    template Normalizer<T> compute_normalizer(const Tensor<T>&, const PatchTable&);          \
    template SparseKernel<T> build_kernel(const Tensor<T>&, const PatchTable&);              \
    template SparseKernel<T> build_kernel_rbf(const Tensor<T>&, const PatchTable&, double);  \
    template Tensor<T> kernel_apply(const Tensor<T>&, const Tensor<T>&,                      \
                                    std::shared_ptr<const PatchTable>, KernelFamily, double);

DKN_INSTANTIATE_KERNEL(float)
DKN_INSTANTIATE_KERNEL(double)

#undef DKN_INSTANTIATE_KERNEL

}  // namespace dkn
