#include "dkn/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace dkn {

namespace {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

template <typename T>
void require_rank(const Tensor<T>& x, int r, const char* op) {
    if (x.rank() != r)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(x.shape));
}

// Shared finishing step: attach the result to the tape when any input is
// recorded, with a backward closure built by `make_back`.
template <typename T, typename MakeBack>
void finish(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs, MakeBack make_back) {
#ifndef NDEBUG
    check_finite(out, "op output");
#endif
    Tape<T>* tape = common_tape<T>(inputs);
    if (!tape) return;
    std::vector<int> parents;
    for (const Tensor<T>* x : inputs) parents.push_back(x->node);
    out.tape = tape;
    out.node = tape->record(std::move(parents), out.size(), make_back());
}

// im2col for 3x3-style same-padded convolution: rows are output pixels of
// one batch item, columns are (ky,kx,ci).
template <typename T>
void im2col(const T* in, int H, int W, int C, int kh, int kw, std::vector<T>& col) {
    const int py = (kh - 1) / 2, px = (kw - 1) / 2;
    const std::size_t K = static_cast<std::size_t>(kh) * kw * C;
    col.assign(static_cast<std::size_t>(H) * W * K, T(0));
    for (int y = 0; y < H; ++y) {
        for (int ky = 0; ky < kh; ++ky) {
            const int iy = y + ky - py;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < kw; ++kx) {
                const int x0 = std::max(0, px - kx);
                const int x1 = W - std::max(0, kx - px);
                if (x0 >= x1) continue;
                const T* src = in + idx3(iy, x0 + kx - px, 0, W, C);
                T* dst = &col[(static_cast<std::size_t>(y) * W + x0) * K +
                              (static_cast<std::size_t>(ky) * kw + kx) * C];
                for (int x = x0; x < x1; ++x) {
                    std::memcpy(dst, src, sizeof(T) * C);
                    src += C;
                    dst += K;
                }
            }
        }
    }
}

// Transpose of im2col: scatter-adds column-matrix rows back into an image.
template <typename T>
void col2im_add(const std::vector<T>& col, int H, int W, int C, int kh, int kw, T* out) {
    const int py = (kh - 1) / 2, px = (kw - 1) / 2;
    const std::size_t K = static_cast<std::size_t>(kh) * kw * C;
    for (int y = 0; y < H; ++y) {
        for (int ky = 0; ky < kh; ++ky) {
            const int iy = y + ky - py;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < kw; ++kx) {
                const int x0 = std::max(0, px - kx);
                const int x1 = W - std::max(0, kx - px);
                if (x0 >= x1) continue;
                T* dst = out + idx3(iy, x0 + kx - px, 0, W, C);
                const T* src = &col[(static_cast<std::size_t>(y) * W + x0) * K +
                                    (static_cast<std::size_t>(ky) * kw + kx) * C];
                for (int x = x0; x < x1; ++x) {
                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                    dst += C;
                    src += K;
                }
            }
        }
    }
}

}  // namespace

template <typename T>
void check_finite(const Tensor<T>& x, const char* where) {
    for (const T& v : x.data)
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string(where) + ": non-finite value");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = a.detached();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    finish(out, {&a, &b}, [&] {
        return [pa = a.node, pb = b.node](Tape<T>& t, const std::vector<T>& g) {
            if (pa >= 0) {
                auto& ga = t.grad_slot(pa);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (pb >= 0) {
                auto& gb = t.grad_slot(pb);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        };
    });
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out = a.detached();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    finish(out, {&a, &b}, [&] {
        return [pa = a.node, pb = b.node](Tape<T>& t, const std::vector<T>& g) {
            if (pa >= 0) {
                auto& ga = t.grad_slot(pa);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (pb >= 0) {
                auto& gb = t.grad_slot(pb);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    });
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out = a.detached();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    finish(out, {&a, &b}, [&] {
        return [pa = a.node, pb = b.node, av = a.data, bv = b.data](Tape<T>& t,
                                                                    const std::vector<T>& g) {
            if (pa >= 0) {
                auto& ga = t.grad_slot(pa);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
            }
            if (pb >= 0) {
                auto& gb = t.grad_slot(pb);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
            }
        };
    });
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    Tensor<T> out = a.detached();
    for (T& v : out.data) v += s;
    finish(out, {&a}, [&] {
        return [pa = a.node](Tape<T>& t, const std::vector<T>& g) {
            auto& ga = t.grad_slot(pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        };
    });
    return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    Tensor<T> out = a.detached();
    for (T& v : out.data) v *= s;
    finish(out, {&a}, [&] {
        return [pa = a.node, s](Tape<T>& t, const std::vector<T>& g) {
            auto& ga = t.grad_slot(pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        };
    });
    return out;
}

template <typename T>
Tensor<T> rsub_scalar(T s, const Tensor<T>& a) {
    Tensor<T> out = a.detached();
    for (T& v : out.data) v = s - v;
    finish(out, {&a}, [&] {
        return [pa = a.node](Tape<T>& t, const std::vector<T>& g) {
            auto& ga = t.grad_slot(pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
        };
    });
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out = x.detached();
    for (T& v : out.data) v = v > T(0) ? v : T(0);
    finish(out, {&x}, [&] {
        return [p = x.node, xv = x.data](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xv[i] > T(0)) gx[i] += g[i];
        };
    });
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out = x.detached();
    for (T& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    finish(out, {&x}, [&] {
        return [p = x.node, ov = out.data](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * ov[i] * (T(1) - ov[i]);
        };
    });
    return out;
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& x) {
    Tensor<T> out = x.detached();
    for (T& v : out.data) {
        if (v <= T(0)) throw DomainError("log of non-positive value");
        v = std::log(v);
    }
    finish(out, {&x}, [&] {
        return [p = x.node, xv = x.data](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
        };
    });
    return out;
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    if (!(lo <= hi)) throw DomainError("clamp: lo must not exceed hi");
    Tensor<T> out = x.detached();
    for (T& v : out.data) v = std::min(hi, std::max(lo, v));
    finish(out, {&x}, [&] {
        return [p = x.node, xv = x.data, lo, hi](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xv[i] > lo && xv[i] < hi) gx[i] += g[i];
        };
    });
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    Tensor<T> out({1}, T(0));
    for (const T& v : x.data) out[0] += v;
    finish(out, {&x}, [&] {
        return [p = x.node, n = x.size()](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
        };
    });
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.size() == 0) throw ShapeError("mean of empty tensor");
    Tensor<T> out({1}, T(0));
    for (const T& v : x.data) out[0] += v;
    out[0] /= static_cast<T>(x.size());
    finish(out, {&x}, [&] {
        return [p = x.node, n = x.size()](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            const T s = g[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) gx[i] += s;
        };
    });
    return out;
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    require_same_shape(pred, target, "mse_loss");
    Tensor<T> out({1}, T(0));
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
        acc += d * d;
    }
    out[0] = static_cast<T>(acc / static_cast<double>(pred.size()));
    finish(out, {&pred, &target}, [&] {
        return [pp = pred.node, pt = target.node, pv = pred.data, tv = target.data](
                   Tape<T>& t, const std::vector<T>& g) {
            const T s = g[0] * T(2) / static_cast<T>(pv.size());
            if (pp >= 0) {
                auto& gp = t.grad_slot(pp);
                for (std::size_t i = 0; i < pv.size(); ++i) gp[i] += s * (pv[i] - tv[i]);
            }
            if (pt >= 0) {
                auto& gt = t.grad_slot(pt);
                for (std::size_t i = 0; i < pv.size(); ++i) gt[i] -= s * (pv[i] - tv[i]);
            }
        };
    });
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw ShapeError("reshape: " + shape_str(x.shape) + " -> " + shape_str(new_shape) +
                         " changes element count");
    Tensor<T> out = x.detached();
    out.shape = std::move(new_shape);
    finish(out, {&x}, [&] {
        return [p = x.node](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        };
    });
    return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: no inputs");
    for (const auto& x : xs) require_rank(x, 4, "concat_channels");
    const int N = xs[0].dim(0), H = xs[0].dim(1), W = xs[0].dim(2);
    int Cout = 0;
    for (const auto& x : xs) {
        if (x.dim(0) != N || x.dim(1) != H || x.dim(2) != W)
            throw ShapeError("concat_channels: N,H,W mismatch");
        Cout += x.dim(3);
    }
    Tensor<T> out({N, H, W, Cout}, T(0));
    const std::size_t sites = static_cast<std::size_t>(N) * H * W;
    std::size_t off = 0;
    for (const auto& x : xs) {
        const int C = x.dim(3);
        for (std::size_t s = 0; s < sites; ++s)
            std::memcpy(&out.data[s * Cout + off], &x.data[s * C], sizeof(T) * C);
        off += static_cast<std::size_t>(C);
    }

    std::vector<const Tensor<T>*> ptrs;
    for (const auto& x : xs) ptrs.push_back(&x);
    Tape<T>* tape = nullptr;
    for (const auto& x : xs)
        if (x.on_tape()) {
            if (tape && tape != x.tape) throw UsageError("operands recorded on different tapes");
            tape = x.tape;
        }
#ifndef NDEBUG
    check_finite(out, "concat_channels");
#endif
    if (!tape) return out;
    std::vector<int> parents;
    std::vector<int> widths;
    for (const auto& x : xs) {
        parents.push_back(x.node);
        widths.push_back(x.dim(3));
    }
    out.tape = tape;
    out.node = tape->record(
        parents, out.size(),
        [parents, widths, sites, Cout](Tape<T>& t, const std::vector<T>& g) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < parents.size(); ++k) {
                const int C = widths[k];
                if (parents[k] >= 0) {
                    auto& gx = t.grad_slot(parents[k]);
                    for (std::size_t s = 0; s < sites; ++s)
                        for (int c = 0; c < C; ++c) gx[s * C + c] += g[s * Cout + off + c];
                }
                off += static_cast<std::size_t>(C);
            }
        });
    return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    require_rank(x, 4, "conv2d input");
    require_rank(w, 4, "conv2d weights");
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
    const int kh = w.dim(0), kw = w.dim(1), Co = w.dim(3);
    if (w.dim(2) != Ci)
        throw ConfigError("conv2d: weight input channels " + std::to_string(w.dim(2)) +
                          " != input channels " + std::to_string(Ci));
    if (bias.size() != static_cast<std::size_t>(Co))
        throw ConfigError("conv2d: bias length != output channels");
    if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel dims must be odd");

    const std::size_t K = static_cast<std::size_t>(kh) * kw * Ci;
    const std::size_t pixels = static_cast<std::size_t>(H) * W;
    Tensor<T> out({N, H, W, Co}, T(0));
    std::vector<T> col;
    ConstMatMap<T> Wm(w.data.data(), static_cast<Eigen::Index>(K), Co);
    for (int n = 0; n < N; ++n) {
        im2col(&x.data[static_cast<std::size_t>(n) * pixels * Ci], H, W, Ci, kh, kw, col);
        ConstMatMap<T> A(col.data(), static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(K));
        MatMap<T> O(&out.data[static_cast<std::size_t>(n) * pixels * Co],
                    static_cast<Eigen::Index>(pixels), Co);
        O.noalias() = A * Wm;
    }
    for (std::size_t s = 0; s < static_cast<std::size_t>(N) * pixels; ++s)
        for (int c = 0; c < Co; ++c) out.data[s * Co + c] += bias[c];

    finish(out, {&x, &w, &bias}, [&] {
        return [px = x.node, pw = w.node, pb = bias.node, xv = x.data, wv = w.data, N, H, W, Ci,
                kh, kw, Co](Tape<T>& t, const std::vector<T>& g) {
            const std::size_t K = static_cast<std::size_t>(kh) * kw * Ci;
            const std::size_t pixels = static_cast<std::size_t>(H) * W;
            std::vector<T> col, gcol(pixels * K);
            ConstMatMap<T> Wm(wv.data(), static_cast<Eigen::Index>(K), Co);
            std::vector<T>* gw = pw >= 0 ? &t.grad_slot(pw) : nullptr;
            std::vector<T>* gx = px >= 0 ? &t.grad_slot(px) : nullptr;
            for (int n = 0; n < N; ++n) {
                ConstMatMap<T> Go(&g[static_cast<std::size_t>(n) * pixels * Co],
                                  static_cast<Eigen::Index>(pixels), Co);
                if (gw) {
                    im2col(&xv[static_cast<std::size_t>(n) * pixels * Ci], H, W, Ci, kh, kw, col);
                    ConstMatMap<T> A(col.data(), static_cast<Eigen::Index>(pixels),
                                     static_cast<Eigen::Index>(K));
                    MatMap<T> Gw(gw->data(), static_cast<Eigen::Index>(K), Co);
                    Gw.noalias() += A.transpose() * Go;
                }
                if (gx) {
                    MatMap<T> Gc(gcol.data(), static_cast<Eigen::Index>(pixels),
                                 static_cast<Eigen::Index>(K));
                    Gc.noalias() = Go * Wm.transpose();
                    col2im_add(gcol, H, W, Ci, kh, kw,
                               &(*gx)[static_cast<std::size_t>(n) * pixels * Ci]);
                }
            }
            if (pb >= 0) {
                auto& gb = t.grad_slot(pb);
                for (std::size_t s = 0; s < static_cast<std::size_t>(N) * pixels; ++s)
                    for (int c = 0; c < Co; ++c) gb[c] += g[s * Co + c];
            }
        };
    });
    return out;
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats& running, bool train, double momentum, double eps) {
    require_rank(x, 4, "batchnorm2d");
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (gamma.size() != static_cast<std::size_t>(C) || beta.size() != static_cast<std::size_t>(C))
        throw ConfigError("batchnorm2d: gamma/beta length != channels");
    const std::size_t M = static_cast<std::size_t>(N) * H * W;
    if (train && M < 2) throw DegenerateBatchError("batchnorm2d: train mode needs N*H*W >= 2");
    if (running.mean.empty()) {
        running.mean.assign(static_cast<std::size_t>(C), 0.0);
        running.var.assign(static_cast<std::size_t>(C), 1.0);
    }

    std::vector<double> mu(C), var(C);
    if (train) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < M; ++i) s += x.data[i * C + c];
            mu[c] = s / static_cast<double>(M);
        }
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < M; ++i) {
                const double d = x.data[i * C + c] - mu[c];
                s += d * d;
            }
            var[c] = s / static_cast<double>(M);
        }
        if (!running.initialized) {
            running.mean = mu;
            running.var = var;
            running.initialized = true;
        } else {
            for (int c = 0; c < C; ++c) {
                running.mean[c] = momentum * running.mean[c] + (1.0 - momentum) * mu[c];
                running.var[c] = momentum * running.var[c] + (1.0 - momentum) * var[c];
            }
        }
    } else {
        mu = running.mean;
        var = running.var;
    }

    std::vector<T> inv_std(C);
    for (int c = 0; c < C; ++c) inv_std[c] = static_cast<T>(1.0 / std::sqrt(var[c] + eps));
    Tensor<T> out = x.detached();
    for (std::size_t i = 0; i < M; ++i)
        for (int c = 0; c < C; ++c)
            out.data[i * C + c] =
                gamma[c] * (x.data[i * C + c] - static_cast<T>(mu[c])) * inv_std[c] + beta[c];

    finish(out, {&x, &gamma, &beta}, [&] {
        // Eval mode is an affine map per channel; train mode needs the full
        // batch-statistics chain rule.
        std::vector<T> mu_t(mu.begin(), mu.end());
        return [px = x.node, pg = gamma.node, pb = beta.node, xv = x.data, gv = gamma.data,
                mu_t, inv_std, M, C, train](Tape<T>& t, const std::vector<T>& g) {
            std::vector<T> xhat(M * C);
            for (std::size_t i = 0; i < M; ++i)
                for (int c = 0; c < C; ++c)
                    xhat[i * C + c] = (xv[i * C + c] - mu_t[c]) * inv_std[c];
            if (pg >= 0) {
                auto& gg = t.grad_slot(pg);
                for (std::size_t i = 0; i < M; ++i)
                    for (int c = 0; c < C; ++c) gg[c] += g[i * C + c] * xhat[i * C + c];
            }
            if (pb >= 0) {
                auto& gb = t.grad_slot(pb);
                for (std::size_t i = 0; i < M; ++i)
                    for (int c = 0; c < C; ++c) gb[c] += g[i * C + c];
            }
            if (px < 0) return;
            auto& gx = t.grad_slot(px);
            if (!train) {
                for (std::size_t i = 0; i < M; ++i)
                    for (int c = 0; c < C; ++c) gx[i * C + c] += g[i * C + c] * gv[c] * inv_std[c];
                return;
            }
            std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
            for (std::size_t i = 0; i < M; ++i)
                for (int c = 0; c < C; ++c) {
                    const double dxh = static_cast<double>(g[i * C + c]) * gv[c];
                    sum_dy[c] += dxh;
                    sum_dy_xhat[c] += dxh * xhat[i * C + c];
                }
            const double m = static_cast<double>(M);
            for (std::size_t i = 0; i < M; ++i)
                for (int c = 0; c < C; ++c) {
                    const double dxh = static_cast<double>(g[i * C + c]) * gv[c];
                    gx[i * C + c] += static_cast<T>(
                        inv_std[c] * (dxh - sum_dy[c] / m - xhat[i * C + c] * sum_dy_xhat[c] / m));
                }
        };
    });
    return out;
}

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
    require_rank(x, 4, "maxpool2x2");
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw ShapeError("maxpool2x2: spatial dims must be even, got " + shape_str(x.shape));
    const int Ho = H / 2, Wo = W / 2;
    Tensor<T> out({N, Ho, Wo, C}, T(0));
    std::vector<std::uint32_t> arg(out.size());
    for (int n = 0; n < N; ++n)
        for (int y = 0; y < Ho; ++y)
            for (int xo = 0; xo < Wo; ++xo)
                for (int c = 0; c < C; ++c) {
                    // Ties go to the first index in row-major scan order.
                    std::size_t best = idx4(n, 2 * y, 2 * xo, c, H, W, C);
                    T bv = x.data[best];
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::size_t i = idx4(n, 2 * y + dy, 2 * xo + dx, c, H, W, C);
                            if (x.data[i] > bv) {
                                bv = x.data[i];
                                best = i;
                            }
                        }
                    const std::size_t o = idx4(n, y, xo, c, Ho, Wo, C);
                    out.data[o] = bv;
                    arg[o] = static_cast<std::uint32_t>(best);
                }
    finish(out, {&x}, [&] {
        return [p = x.node, arg](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
        };
    });
    return out;
}

template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x) {
    require_rank(x, 4, "upsample_bilinear2x");
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const int Ho = 2 * H, Wo = 2 * W;
    // Half-pixel centers: src = (dst + 0.5)/2 - 0.5, clamped at borders.
    auto coords = [](int o, int limit, int& i0, int& i1, T& w1) {
        const double s = (o + 0.5) / 2.0 - 0.5;
        const double f = std::floor(s);
        i0 = std::max(0, std::min(limit - 1, static_cast<int>(f)));
        i1 = std::max(0, std::min(limit - 1, static_cast<int>(f) + 1));
        w1 = static_cast<T>(s - f);
        if (s < 0) w1 = T(0);
        if (s > limit - 1) w1 = T(1);
    };
    Tensor<T> out({N, Ho, Wo, C}, T(0));
    for (int n = 0; n < N; ++n)
        for (int y = 0; y < Ho; ++y) {
            int y0, y1;
            T wy;
            coords(y, H, y0, y1, wy);
            for (int xo = 0; xo < Wo; ++xo) {
                int x0, x1;
                T wx;
                coords(xo, W, x0, x1, wx);
                for (int c = 0; c < C; ++c) {
                    const T v00 = x.data[idx4(n, y0, x0, c, H, W, C)];
                    const T v01 = x.data[idx4(n, y0, x1, c, H, W, C)];
                    const T v10 = x.data[idx4(n, y1, x0, c, H, W, C)];
                    const T v11 = x.data[idx4(n, y1, x1, c, H, W, C)];
                    out.data[idx4(n, y, xo, c, Ho, Wo, C)] =
                        (T(1) - wy) * ((T(1) - wx) * v00 + wx * v01) +
                        wy * ((T(1) - wx) * v10 + wx * v11);
                }
            }
        }
    finish(out, {&x}, [&] {
        return [p = x.node, N, H, W, C, coords](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            const int Ho = 2 * H, Wo = 2 * W;
            for (int n = 0; n < N; ++n)
                for (int y = 0; y < Ho; ++y) {
                    int y0, y1;
                    T wy;
                    coords(y, H, y0, y1, wy);
                    for (int xo = 0; xo < Wo; ++xo) {
                        int x0, x1;
                        T wx;
                        coords(xo, W, x0, x1, wx);
                        for (int c = 0; c < C; ++c) {
                            const T go = g[idx4(n, y, xo, c, Ho, Wo, C)];
                            gx[idx4(n, y0, x0, c, H, W, C)] += go * (T(1) - wy) * (T(1) - wx);
                            gx[idx4(n, y0, x1, c, H, W, C)] += go * (T(1) - wy) * wx;
                            gx[idx4(n, y1, x0, c, H, W, C)] += go * wy * (T(1) - wx);
                            gx[idx4(n, y1, x1, c, H, W, C)] += go * wy * wx;
                        }
                    }
                }
        };
    });
    return out;
}

template <typename T>
Tensor<T> channel_softmax(const Tensor<T>& x, int n_b) {
    require_rank(x, 4, "channel_softmax");
    const int Ctot = x.dim(3);
    if (n_b < 1 || Ctot % n_b != 0)
        throw ShapeError("channel_softmax: channel count " + std::to_string(Ctot) +
                         " not divisible into groups of " + std::to_string(n_b));
    const std::size_t groups = x.size() / static_cast<std::size_t>(n_b);
    Tensor<T> out = x.detached();
    for (std::size_t gidx = 0; gidx < groups; ++gidx) {
        T* v = &out.data[gidx * n_b];
        T mx = v[0];
        for (int m = 1; m < n_b; ++m) mx = std::max(mx, v[m]);
        T s = T(0);
        for (int m = 0; m < n_b; ++m) {
            v[m] = std::exp(v[m] - mx);
            s += v[m];
        }
        for (int m = 0; m < n_b; ++m) v[m] /= s;
    }
    finish(out, {&x}, [&] {
        return [p = x.node, ov = out.data, n_b, groups](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            for (std::size_t gidx = 0; gidx < groups; ++gidx) {
                const T* s = &ov[gidx * n_b];
                const T* go = &g[gidx * n_b];
                T dot = T(0);
                for (int m = 0; m < n_b; ++m) dot += go[m] * s[m];
                for (int m = 0; m < n_b; ++m) gx[gidx * n_b + m] += s[m] * (go[m] - dot);
            }
        };
    });
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    require_rank(x, 2, "linear input");
    require_rank(w, 2, "linear weights");
    const int N = x.dim(0), K = x.dim(1), M = w.dim(1);
    if (w.dim(0) != K) throw ConfigError("linear: weight rows != input features");
    if (b.size() != static_cast<std::size_t>(M)) throw ConfigError("linear: bias length mismatch");
    Tensor<T> out({N, M}, T(0));
    ConstMatMap<T> X(x.data.data(), N, K), Wm(w.data.data(), K, M);
    MatMap<T> O(out.data.data(), N, M);
    O.noalias() = X * Wm;
    for (int n = 0; n < N; ++n)
        for (int m = 0; m < M; ++m) out.data[static_cast<std::size_t>(n) * M + m] += b[m];
    finish(out, {&x, &w, &b}, [&] {
        return [px = x.node, pw = w.node, pb = b.node, xv = x.data, wv = w.data, N, K, M](
                   Tape<T>& t, const std::vector<T>& g) {
            ConstMatMap<T> G(g.data(), N, M);
            if (px >= 0) {
                MatMap<T> Gx(t.grad_slot(px).data(), N, K);
                ConstMatMap<T> Wm(wv.data(), K, M);
                Gx.noalias() += G * Wm.transpose();
            }
            if (pw >= 0) {
                MatMap<T> Gw(t.grad_slot(pw).data(), K, M);
                ConstMatMap<T> X(xv.data(), N, K);
                Gw.noalias() += X.transpose() * G;
            }
            if (pb >= 0) {
                auto& gb = t.grad_slot(pb);
                for (int n = 0; n < N; ++n)
                    for (int m = 0; m < M; ++m) gb[m] += g[static_cast<std::size_t>(n) * M + m];
            }
        };
    });
    return out;
}

template <typename T>
Tensor<T> extract_patches(const Tensor<T>& x, int size) {
    require_rank(x, 4, "extract_patches");
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (size < 1 || H % size != 0 || W % size != 0)
        throw ShapeError("extract_patches: " + shape_str(x.shape) + " not divisible by size " +
                         std::to_string(size));
    const int gy = H / size, gx_ = W / size;
    const int Np = gy * gx_;
    Tensor<T> out({N * Np, size, size, C}, T(0));
    for (int n = 0; n < N; ++n)
        for (int ty = 0; ty < gy; ++ty)
            for (int tx = 0; tx < gx_; ++tx) {
                const int o = (n * Np) + ty * gx_ + tx;
                for (int y = 0; y < size; ++y)
                    std::memcpy(&out.data[idx4(o, y, 0, 0, size, size, C)],
                                &x.data[idx4(n, ty * size + y, tx * size, 0, H, W, C)],
                                sizeof(T) * static_cast<std::size_t>(size) * C);
            }
    finish(out, {&x}, [&] {
        return [p = x.node, N, H, W, C, size, gy, gx_, Np](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            for (int n = 0; n < N; ++n)
                for (int ty = 0; ty < gy; ++ty)
                    for (int tx = 0; tx < gx_; ++tx) {
                        const int o = (n * Np) + ty * gx_ + tx;
                        for (int y = 0; y < size; ++y)
                            for (int xj = 0; xj < size; ++xj)
                                for (int c = 0; c < C; ++c)
                                    gx[idx4(n, ty * size + y, tx * size + xj, c, H, W, C)] +=
                                        g[idx4(o, y, xj, c, size, size, C)];
                    }
        };
    });
    return out;
}

template <typename T>
Tensor<T> roll_batch(const Tensor<T>& x) {
    if (x.rank() < 1) throw ShapeError("roll_batch: rank-0 input");
    const int N = x.dim(0);
    if (N < 2) throw DegenerateBatchError("roll_batch: batch size must be >= 2");
    const std::size_t item = x.size() / static_cast<std::size_t>(N);
    Tensor<T> out = x.detached();
    for (int i = 0; i < N; ++i)
        std::memcpy(&out.data[static_cast<std::size_t>(i) * item],
                    &x.data[(static_cast<std::size_t>((i + 1) % N)) * item], sizeof(T) * item);
    finish(out, {&x}, [&] {
        return [p = x.node, N, item](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            for (int i = 0; i < N; ++i) {
                const std::size_t src = static_cast<std::size_t>(i) * item;
                const std::size_t dst = (static_cast<std::size_t>((i + 1) % N)) * item;
                for (std::size_t k = 0; k < item; ++k) gx[dst + k] += g[src + k];
            }
        };
    });
    return out;
}

template <typename T>
Tensor<T> repeat_batch(const Tensor<T>& x, int k) {
    if (x.rank() < 1) throw ShapeError("repeat_batch: rank-0 input");
    if (k < 1) throw ShapeError("repeat_batch: k must be >= 1");
    const int N = x.dim(0);
    const std::size_t item = x.size() / static_cast<std::size_t>(N);
    std::vector<int> oshape = x.shape;
    oshape[0] = N * k;
    Tensor<T> out(oshape, T(0));
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < k; ++j)
            std::memcpy(&out.data[(static_cast<std::size_t>(i) * k + j) * item],
                        &x.data[static_cast<std::size_t>(i) * item], sizeof(T) * item);
    finish(out, {&x}, [&] {
        return [p = x.node, N, k, item](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_slot(p);
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < k; ++j) {
                    const std::size_t src = (static_cast<std::size_t>(i) * k + j) * item;
                    const std::size_t dst = static_cast<std::size_t>(i) * item;
                    for (std::size_t q = 0; q < item; ++q) gx[dst + q] += g[src + q];
                }
        };
    });
    return out;
}

#define DKN_INSTANTIATE(T)                                                                     \
    template void check_finite(const Tensor<T>&, const char*);                                 \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                        \
    template Tensor<T> mul_scalar(const Tensor<T>&, T);                                        \
    template Tensor<T> rsub_scalar(T, const Tensor<T>&);                                       \
    template Tensor<T> relu(const Tensor<T>&);                                                 \
    template Tensor<T> sigmoid(const Tensor<T>&);                                              \
    template Tensor<T> log_op(const Tensor<T>&);                                               \
    template Tensor<T> clamp(const Tensor<T>&, T, T);                                          \
    template Tensor<T> sum(const Tensor<T>&);                                                  \
    template Tensor<T> mean(const Tensor<T>&);                                                 \
    template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                           \
    template Tensor<T> reshape(const Tensor<T>&, std::vector<int>);                            \
    template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                         \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
    template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                   BatchNormStats&, bool, double, double);                     \
    template Tensor<T> maxpool2x2(const Tensor<T>&);                                           \
    template Tensor<T> upsample_bilinear2x(const Tensor<T>&);                                  \
    template Tensor<T> channel_softmax(const Tensor<T>&, int);                                 \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
    template Tensor<T> extract_patches(const Tensor<T>&, int);                                 \
    template Tensor<T> roll_batch(const Tensor<T>&);                                           \
    template Tensor<T> repeat_batch(const Tensor<T>&, int);

DKN_INSTANTIATE(float)
DKN_INSTANTIATE(double)

#undef DKN_INSTANTIATE

}  // namespace dkn
