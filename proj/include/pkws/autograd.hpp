#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pkws/array.hpp"
#include "pkws/errors.hpp"

namespace pkws {

// ---------------------------------------------------------------------------
// Raw kernels. These carry the numeric load; the Tape wraps them with
// recording and backward rules. Loop orders are fixed so results are
// bit-reproducible run to run.
// ---------------------------------------------------------------------------
namespace kernels {

/// C[MxN] = A[MxK] * B[KxN]
inline void gemm(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n) {
    std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline double dot4(const double* a, const double* b, std::size_t n);

/// C[MxK] += A[MxN] * B^T where B is [KxN]
inline void gemm_nt_acc(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            crow[p] += dot4(arow, b + p * n, n);
        }
    }
}

/// C[KxN] += A^T * B where A is [MxK], B is [MxN]
inline void gemm_tn_acc(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

/// Copies one image plane [C,H,W] into a zero-padded [C,H+2p,W+2p] buffer.
inline void pad_plane(const double* x, double* xp,
                      std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
    const std::size_t hp = h + 2 * p;
    const std::size_t wp = w + 2 * p;
    std::fill(xp, xp + c * hp * wp, 0.0);
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t y = 0; y < h; ++y) {
            const double* src = x + (ci * h + y) * w;
            double* dst = xp + (ci * hp + y + p) * wp + p;
            std::copy(src, src + w, dst);
        }
    }
}

struct Conv2dDims {
    std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
};

/// y += a*x over disjoint buffers.
inline void axpy(double a, const double* __restrict x, double* __restrict y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

/// Deterministic dot product with eight explicit accumulators (the reduction
/// stays vectorizable without reassociating under -ffast-math).
inline double dot4(const double* __restrict a, const double* __restrict b, std::size_t n) {
    double s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int t = 0; t < 8; ++t) s[t] += a[i + t] * b[i + t];
    }
    for (; i < n; ++i) s[0] += a[i] * b[i];
    return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
}

// The stride-1 convolution works on zero-padded planes and fuses the two
// spatial loops into one flat run of length Ho*Wp per kernel tap: output cell
// (oy,ox) lives at flat index oy*Wp+ox and reads xpad at a constant offset
// ky*Wp+kx. The few cells with ox >= Wo compute junk that is never copied
// out. GUARD elements absorb the tail reads/writes past the plane.
inline constexpr std::size_t kConvGuard = 8;

inline void conv2d_forward_s1(const double* x, const double* wgt, const double* bias,
                              double* y, const Conv2dDims& d) {
    const std::size_t hp = d.h + 2 * d.pad;
    const std::size_t wp = d.w + 2 * d.pad;
    const std::size_t flat = d.ho * wp;
    std::vector<double> xpad(d.cin * hp * wp + kConvGuard, 0.0);
    std::vector<double> ypad(flat + d.kh * wp + kConvGuard);
    for (std::size_t n = 0; n < d.batch; ++n) {
        pad_plane(x + n * d.cin * d.h * d.w, xpad.data(), d.cin, d.h, d.w, d.pad);
        for (std::size_t co = 0; co < d.cout; ++co) {
            std::fill(ypad.begin(), ypad.end(), 0.0);
            for (std::size_t ci = 0; ci < d.cin; ++ci) {
                const double* xplane = xpad.data() + ci * hp * wp;
                const double* wbase = wgt + (co * d.cin + ci) * d.kh * d.kw;
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        axpy(wbase[ky * d.kw + kx], xplane + ky * wp + kx, ypad.data(), flat);
                    }
                }
            }
            const double bv = bias ? bias[co] : 0.0;
            double* yplane = y + (n * d.cout + co) * d.ho * d.wo;
            for (std::size_t oy = 0; oy < d.ho; ++oy) {
                const double* src = ypad.data() + oy * wp;
                double* dst = yplane + oy * d.wo;
                for (std::size_t ox = 0; ox < d.wo; ++ox) dst[ox] = src[ox] + bv;
            }
        }
    }
}

inline void conv2d_backward_s1(const double* x, const double* wgt, const double* dy,
                               double* dx, double* dw, double* db, const Conv2dDims& d) {
    const std::size_t hp = d.h + 2 * d.pad;
    const std::size_t wp = d.w + 2 * d.pad;
    const std::size_t flat = d.ho * wp;
    const std::size_t guard = d.kh * wp + kConvGuard;
    std::vector<double> xpad(d.cin * hp * wp + guard, 0.0);
    std::vector<double> dxpad(dx ? d.cin * hp * wp + guard : 0);
    std::vector<double> dypad(flat + guard);
    for (std::size_t n = 0; n < d.batch; ++n) {
        pad_plane(x + n * d.cin * d.h * d.w, xpad.data(), d.cin, d.h, d.w, d.pad);
        if (dx) std::fill(dxpad.begin(), dxpad.end(), 0.0);
        for (std::size_t co = 0; co < d.cout; ++co) {
            // embed dy into the padded row layout; junk columns stay zero
            std::fill(dypad.begin(), dypad.end(), 0.0);
            const double* dyplane = dy + (n * d.cout + co) * d.ho * d.wo;
            double acc = 0.0;
            for (std::size_t oy = 0; oy < d.ho; ++oy) {
                const double* src = dyplane + oy * d.wo;
                double* dst = dypad.data() + oy * wp;
                for (std::size_t ox = 0; ox < d.wo; ++ox) {
                    dst[ox] = src[ox];
                    acc += src[ox];
                }
            }
            if (db) db[co] += acc;
            for (std::size_t ci = 0; ci < d.cin; ++ci) {
                const double* xplane = xpad.data() + ci * hp * wp;
                const double* wbase = wgt + (co * d.cin + ci) * d.kh * d.kw;
                double* dwbase = dw ? dw + (co * d.cin + ci) * d.kh * d.kw : nullptr;
                double* dxplane = dx ? dxpad.data() + ci * hp * wp : nullptr;
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        const std::size_t off = ky * wp + kx;
                        if (dx) axpy(wbase[ky * d.kw + kx], dypad.data(), dxplane + off, flat);
                        if (dw) dwbase[ky * d.kw + kx] += dot4(dypad.data(), xplane + off, flat);
                    }
                }
            }
        }
        if (!dx) continue;
        double* dxn = dx + n * d.cin * d.h * d.w;
        for (std::size_t ci = 0; ci < d.cin; ++ci) {
            for (std::size_t y2 = 0; y2 < d.h; ++y2) {
                const double* src = dxpad.data() + (ci * hp + y2 + d.pad) * wp + d.pad;
                double* dst = dxn + (ci * d.h + y2) * d.w;
                for (std::size_t xw = 0; xw < d.w; ++xw) dst[xw] += src[xw];
            }
        }
    }
}

inline void conv2d_forward_generic(const double* x, const double* wgt, const double* bias,
                                   double* y, const Conv2dDims& d) {
    const std::size_t hp = d.h + 2 * d.pad;
    const std::size_t wp = d.w + 2 * d.pad;
    std::vector<double> xpad(d.cin * hp * wp);
    for (std::size_t n = 0; n < d.batch; ++n) {
        pad_plane(x + n * d.cin * d.h * d.w, xpad.data(), d.cin, d.h, d.w, d.pad);
        for (std::size_t co = 0; co < d.cout; ++co) {
            double* yplane = y + (n * d.cout + co) * d.ho * d.wo;
            std::fill(yplane, yplane + d.ho * d.wo, bias ? bias[co] : 0.0);
            for (std::size_t ci = 0; ci < d.cin; ++ci) {
                const double* xplane = xpad.data() + ci * hp * wp;
                const double* wbase = wgt + (co * d.cin + ci) * d.kh * d.kw;
                for (std::size_t ky = 0; ky < d.kh; ++ky)
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        const double wv = wbase[ky * d.kw + kx];
                        for (std::size_t oy = 0; oy < d.ho; ++oy) {
                            const double* xrow = xplane + (oy * d.stride + ky) * wp + kx;
                            double* yrow = yplane + oy * d.wo;
                            for (std::size_t ox = 0; ox < d.wo; ++ox) yrow[ox] += wv * xrow[ox * d.stride];
                        }
                    }
            }
        }
    }
}

inline void conv2d_backward_generic(const double* x, const double* wgt, const double* dy,
                                    double* dx, double* dw, double* db, const Conv2dDims& d) {
    const std::size_t hp = d.h + 2 * d.pad;
    const std::size_t wp = d.w + 2 * d.pad;
    std::vector<double> xpad(d.cin * hp * wp);
    std::vector<double> dxpad(d.cin * hp * wp);
    for (std::size_t n = 0; n < d.batch; ++n) {
        pad_plane(x + n * d.cin * d.h * d.w, xpad.data(), d.cin, d.h, d.w, d.pad);
        std::fill(dxpad.begin(), dxpad.end(), 0.0);
        for (std::size_t co = 0; co < d.cout; ++co) {
            const double* dyplane = dy + (n * d.cout + co) * d.ho * d.wo;
            if (db) {
                double acc = 0.0;
                for (std::size_t i = 0; i < d.ho * d.wo; ++i) acc += dyplane[i];
                db[co] += acc;
            }
            for (std::size_t ci = 0; ci < d.cin; ++ci) {
                const double* xplane = xpad.data() + ci * hp * wp;
                double* dxplane = dxpad.data() + ci * hp * wp;
                const double* wbase = wgt + (co * d.cin + ci) * d.kh * d.kw;
                for (std::size_t ky = 0; ky < d.kh; ++ky)
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        const double wv = wbase[ky * d.kw + kx];
                        double dwv = 0.0;
                        for (std::size_t oy = 0; oy < d.ho; ++oy) {
                            const double* dyrow = dyplane + oy * d.wo;
                            const std::size_t off = (oy * d.stride + ky) * wp + kx;
                            const double* xrow = xplane + off;
                            double* dxrow = dxplane + off;
                            for (std::size_t ox = 0; ox < d.wo; ++ox) {
                                if (dx) dxrow[ox * d.stride] += wv * dyrow[ox];
                                dwv += dyrow[ox] * xrow[ox * d.stride];
                            }
                        }
                        if (dw) dw[(co * d.cin + ci) * d.kh * d.kw + ky * d.kw + kx] += dwv;
                    }
            }
        }
        if (!dx) continue;
        double* dxn = dx + n * d.cin * d.h * d.w;
        for (std::size_t ci = 0; ci < d.cin; ++ci) {
            for (std::size_t y2 = 0; y2 < d.h; ++y2) {
                const double* src = dxpad.data() + (ci * hp + y2 + d.pad) * wp + d.pad;
                double* dst = dxn + (ci * d.h + y2) * d.w;
                for (std::size_t xw = 0; xw < d.w; ++xw) dst[xw] += src[xw];
            }
        }
    }
}

inline void conv2d_forward(const double* x, const double* wgt, const double* bias,
                           double* y, const Conv2dDims& d) {
    if (d.stride == 1) conv2d_forward_s1(x, wgt, bias, y, d);
    else conv2d_forward_generic(x, wgt, bias, y, d);
}

inline void conv2d_backward(const double* x, const double* wgt, const double* dy,
                            double* dx, double* dw, double* db, const Conv2dDims& d) {
    if (d.stride == 1) conv2d_backward_s1(x, wgt, dy, dx, dw, db, d);
    else conv2d_backward_generic(x, wgt, dy, dx, dw, db, d);
}

/// Row-wise softmax with max subtraction.
inline void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double* yr = y + r * cols;
        double mx = xr[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        const double inv = 1.0 / sum;
        for (std::size_t c = 0; c < cols; ++c) yr[c] *= inv;
    }
}

/// Row-wise log-sum-exp with max subtraction.
inline double logsumexp_row(const double* x, std::size_t n) {
    double mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
    return mx + std::log(sum);
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

/// Handle to a value recorded on a Tape.
struct Var {
    std::uint32_t idx = UINT32_MAX;
    bool valid() const { return idx != UINT32_MAX; }
};

/// Define-by-run tape. Every operation appends one node; parents always
/// precede children, so a single reverse scan visits each node exactly once
/// during backward.
class Tape {
public:
    enum class Op : std::uint8_t {
        Leaf, Const,
        Add, AddRowVec, Mul, Scale,
        Exp, Log, Relu,
        Sum, Mean,
        Matmul, Conv2d, AvgPool2, GlobalAvgPool,
        SoftmaxRows, CrossEntropyRows, SquaredDistance, ClassMeans, ConcatRows,
    };

    /// Registers a trainable parameter. Gradients are reported under `name`.
    Var leaf(const std::string& name, Array value) {
        if (name.empty()) throw ShapeError("Tape::leaf: empty parameter name");
        value.requires_grad = true;
        Var v = push(Op::Leaf, std::move(value), {}, true);
        nodes_[v.idx].name = name;
        leaves_.push_back(v.idx);
        return v;
    }

    /// Registers a non-trainable input.
    Var constant(Array value) {
        value.requires_grad = false;
        return push(Op::Const, std::move(value), {}, false);
    }

    Var add(Var a, Var b) {
        const Array& x = value(a);
        const Array& y = value(b);
        if (!x.same_shape(y)) {
            throw ShapeError("add: shape mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(y.shape()));
        }
        Array out(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
        return push(Op::Add, std::move(out), {a, b});
    }

    /// m[R,C] + v[C] broadcast over rows (bias add).
    Var add_rowvec(Var a, Var b) {
        const Array& m = value(a);
        const Array& v = value(b);
        if (m.ndim() != 2 || v.ndim() != 1 || m.dim(1) != v.dim(0)) {
            throw ShapeError("add_rowvec: shape mismatch " + shape_str(m.shape()) + " vs " +
                             shape_str(v.shape()));
        }
        Array out(m.shape());
        const std::size_t rows = m.dim(0), cols = m.dim(1);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = m[r * cols + c] + v[c];
        return push(Op::AddRowVec, std::move(out), {a, b});
    }

    Var mul(Var a, Var b) {
        const Array& x = value(a);
        const Array& y = value(b);
        if (!x.same_shape(y)) {
            throw ShapeError("multiply: shape mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(y.shape()));
        }
        Array out(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * y[i];
        return push(Op::Mul, std::move(out), {a, b});
    }

    Var scale(Var a, double c) {
        const Array& x = value(a);
        Array out(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) out[i] = c * x[i];
        Var v = push(Op::Scale, std::move(out), {a});
        nodes_[v.idx].scalar = c;
        return v;
    }

    Var vexp(Var a) {
        const Array& x = value(a);
        Array out(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::exp(x[i]);
        check_finite(out, "exp");
        return push(Op::Exp, std::move(out), {a});
    }

    Var vlog(Var a) {
        const Array& x = value(a);
        Array out(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::log(x[i]);
        check_finite(out, "log");
        return push(Op::Log, std::move(out), {a});
    }

    Var relu(Var a) {
        const Array& x = value(a);
        Array out(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
        return push(Op::Relu, std::move(out), {a});
    }

    Var sum(Var a) {
        const Array& x = value(a);
        double acc = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
        return push(Op::Sum, Array::scalar(acc), {a});
    }

    Var mean(Var a) {
        const Array& x = value(a);
        double acc = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
        return push(Op::Mean, Array::scalar(acc / static_cast<double>(x.numel())), {a});
    }

    Var matmul(Var a, Var b) {
        const Array& x = value(a);
        const Array& y = value(b);
        if (x.ndim() != 2 || y.ndim() != 2 || x.dim(1) != y.dim(0)) {
            throw ShapeError("matmul: shape mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(y.shape()));
        }
        Array out(Shape{x.dim(0), y.dim(1)});
        kernels::gemm(x.data(), y.data(), out.data(), x.dim(0), x.dim(1), y.dim(1));
        return push(Op::Matmul, std::move(out), {a, b});
    }

    /// x[B,Ci,H,W] (*) w[Co,Ci,KH,KW] + bias[Co] -> y[B,Co,Ho,Wo]
    Var conv2d(Var xa, Var wa, Var ba, std::size_t stride, std::size_t pad) {
        const Array& x = value(xa);
        const Array& w = value(wa);
        const Array& b = value(ba);
        if (x.ndim() != 4 || w.ndim() != 4) {
            throw ShapeError("conv2d: need 4-D input and kernel, got " + shape_str(x.shape()) +
                             " and " + shape_str(w.shape()));
        }
        if (x.dim(1) != w.dim(1)) {
            throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(w.shape()));
        }
        if (b.ndim() != 1 || b.dim(0) != w.dim(0)) {
            throw ShapeError("conv2d: bias shape " + shape_str(b.shape()) + " vs kernel " +
                             shape_str(w.shape()));
        }
        if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
        kernels::Conv2dDims d;
        d.batch = x.dim(0); d.cin = x.dim(1); d.h = x.dim(2); d.w = x.dim(3);
        d.cout = w.dim(0); d.kh = w.dim(2); d.kw = w.dim(3);
        d.stride = stride; d.pad = pad;
        if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw) {
            throw ShapeError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel " +
                             shape_str(w.shape()));
        }
        d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
        d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
        Array out(Shape{d.batch, d.cout, d.ho, d.wo});
        kernels::conv2d_forward(x.data(), w.data(), b.data(), out.data(), d);
        Var v = push(Op::Conv2d, std::move(out), {xa, wa, ba});
        nodes_[v.idx].i0 = static_cast<int>(stride);
        nodes_[v.idx].i1 = static_cast<int>(pad);
        return v;
    }

    /// 2x2 average pooling with stride 2; trailing odd row/col dropped.
    Var avgpool2(Var a) {
        const Array& x = value(a);
        if (x.ndim() != 4) throw ShapeError("avgpool2: need 4-D input, got " + shape_str(x.shape()));
        const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        const std::size_t ho = h / 2, wo = w / 2;
        if (ho == 0 || wo == 0) throw ShapeError("avgpool2: input too small " + shape_str(x.shape()));
        Array out(Shape{b, c, ho, wo});
        for (std::size_t n = 0; n < b * c; ++n) {
            const double* xp = x.data() + n * h * w;
            double* yp = out.data() + n * ho * wo;
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox)
                    yp[oy * wo + ox] = 0.25 * (xp[(2 * oy) * w + 2 * ox] + xp[(2 * oy) * w + 2 * ox + 1] +
                                               xp[(2 * oy + 1) * w + 2 * ox] + xp[(2 * oy + 1) * w + 2 * ox + 1]);
        }
        return push(Op::AvgPool2, std::move(out), {a});
    }

    /// [B,C,H,W] -> [B,C] spatial mean.
    Var global_avgpool(Var a) {
        const Array& x = value(a);
        if (x.ndim() != 4) throw ShapeError("global_avgpool: need 4-D input, got " + shape_str(x.shape()));
        const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        Array out(Shape{b, c});
        for (std::size_t n = 0; n < b * c; ++n) {
            const double* xp = x.data() + n * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += xp[i];
            out[n] = acc / static_cast<double>(hw);
        }
        return push(Op::GlobalAvgPool, std::move(out), {a});
    }

    Var softmax_rows(Var a) {
        const Array& x = value(a);
        if (x.ndim() != 2) throw ShapeError("softmax: need 2-D input, got " + shape_str(x.shape()));
        Array out(x.shape());
        kernels::softmax_rows(x.data(), out.data(), x.dim(0), x.dim(1));
        return push(Op::SoftmaxRows, std::move(out), {a});
    }

    /// Mean over rows of (logsumexp(row) - row[label]).
    Var cross_entropy_rows(Var a, std::vector<int> labels) {
        const Array& x = value(a);
        if (x.ndim() != 2) throw ShapeError("cross_entropy: need 2-D logits, got " + shape_str(x.shape()));
        const std::size_t rows = x.dim(0), cols = x.dim(1);
        if (labels.size() != rows) {
            throw ShapeError("cross_entropy: " + std::to_string(rows) + " rows vs " +
                             std::to_string(labels.size()) + " labels");
        }
        double acc = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            const int lb = labels[r];
            if (lb < 0 || static_cast<std::size_t>(lb) >= cols) {
                throw ShapeError("cross_entropy: label " + std::to_string(lb) + " outside [0, " +
                                 std::to_string(cols) + ") at row " + std::to_string(r));
            }
            acc += kernels::logsumexp_row(x.data() + r * cols, cols) - x.at(r, lb);
        }
        Var v = push(Op::CrossEntropyRows, Array::scalar(acc / static_cast<double>(rows)), {a});
        nodes_[v.idx].labels = std::move(labels);
        return v;
    }

    /// Pairwise squared Euclidean distances: a[Q,D], b[P,D] -> [Q,P].
    Var squared_distance(Var aa, Var bb) {
        const Array& a = value(aa);
        const Array& b = value(bb);
        if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1)) {
            throw ShapeError("squared_distance: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        }
        const std::size_t q = a.dim(0), p = b.dim(0), d = a.dim(1);
        Array out(Shape{q, p});
        for (std::size_t i = 0; i < q; ++i) {
            const double* ai = a.data() + i * d;
            for (std::size_t j = 0; j < p; ++j) {
                const double* bj = b.data() + j * d;
                double acc = 0.0;
                for (std::size_t t = 0; t < d; ++t) {
                    const double diff = ai[t] - bj[t];
                    acc += diff * diff;
                }
                out[i * p + j] = acc;
            }
        }
        return push(Op::SquaredDistance, std::move(out), {aa, bb});
    }

    /// Per-class means of embedding rows. Each class must contribute exactly
    /// k rows. Rows of a class are summed in value-sorted order so that
    /// permuting the inputs leaves the result bit-identical.
    Var class_means(Var ea, std::vector<int> labels, int n_classes, int k) {
        const Array& e = value(ea);
        if (e.ndim() != 2) throw ShapeError("class_means: need 2-D embeddings, got " + shape_str(e.shape()));
        const std::size_t rows = e.dim(0), d = e.dim(1);
        if (labels.size() != rows) throw ShapeError("class_means: labels size mismatch");
        if (n_classes < 1 || k < 1 || rows != static_cast<std::size_t>(n_classes) * static_cast<std::size_t>(k)) {
            throw ShapeError("class_means: " + std::to_string(rows) + " rows cannot split into " +
                             std::to_string(n_classes) + " classes of " + std::to_string(k));
        }
        std::vector<std::vector<const double*>> members(static_cast<std::size_t>(n_classes));
        for (std::size_t r = 0; r < rows; ++r) {
            const int lb = labels[r];
            if (lb < 0 || lb >= n_classes) {
                throw ShapeError("class_means: label " + std::to_string(lb) + " outside [0, " +
                                 std::to_string(n_classes) + ")");
            }
            members[static_cast<std::size_t>(lb)].push_back(e.data() + r * d);
        }
        Array out(Shape{static_cast<std::size_t>(n_classes), d});
        for (int cls = 0; cls < n_classes; ++cls) {
            auto& rows_of = members[static_cast<std::size_t>(cls)];
            if (rows_of.size() != static_cast<std::size_t>(k)) {
                throw ShapeError("class_means: class " + std::to_string(cls) + " has " +
                                 std::to_string(rows_of.size()) + " rows, expected " + std::to_string(k));
            }
            std::sort(rows_of.begin(), rows_of.end(), [d](const double* x, const double* y) {
                return std::lexicographical_compare(x, x + d, y, y + d);
            });
            double* orow = out.data() + static_cast<std::size_t>(cls) * d;
            for (const double* src : rows_of) {
                for (std::size_t t = 0; t < d; ++t) orow[t] += src[t];
            }
            const double inv = 1.0 / static_cast<double>(k);
            for (std::size_t t = 0; t < d; ++t) orow[t] *= inv;
        }
        Var v = push(Op::ClassMeans, std::move(out), {ea});
        nodes_[v.idx].labels = std::move(labels);
        nodes_[v.idx].i0 = n_classes;
        nodes_[v.idx].i1 = k;
        return v;
    }

    /// Stack a[N,D] on top of b[M,D] (b may also be a flat [D] vector).
    Var concat_rows(Var aa, Var bb) {
        const Array& a = value(aa);
        const Array& b = value(bb);
        const std::size_t d = a.ndim() == 2 ? a.dim(1) : a.dim(0);
        const std::size_t bd = b.ndim() == 2 ? b.dim(1) : b.dim(0);
        if (d != bd) {
            throw ShapeError("concat_rows: width mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        }
        const std::size_t an = a.ndim() == 2 ? a.dim(0) : 1;
        const std::size_t bn = b.ndim() == 2 ? b.dim(0) : 1;
        Array out(Shape{an + bn, d});
        std::copy(a.data(), a.data() + a.numel(), out.data());
        std::copy(b.data(), b.data() + b.numel(), out.data() + a.numel());
        return push(Op::ConcatRows, std::move(out), {aa, bb});
    }

    const Array& value(Var v) const {
        if (!v.valid() || v.idx >= nodes_.size()) throw ShapeError("Tape: invalid Var");
        return nodes_[v.idx].value;
    }

    std::size_t size() const { return nodes_.size(); }

    /// Reverse pass from a scalar loss. Returns one gradient per registered
    /// leaf; leaves the loss does not reach get zero gradients.
    std::map<std::string, Array> backward(Var loss) const {
        const Array& lv = value(loss);
        if (lv.numel() != 1) {
            throw ShapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
        }
        std::vector<Array> grads(nodes_.size());
        grads[loss.idx] = Array::scalar(1.0);
        for (std::uint32_t i = loss.idx + 1; i-- > 0;) {
            const Node& node = nodes_[i];
            if (!node.needs_grad || grads[i].empty()) continue;
            backward_node(i, grads);
        }
        std::map<std::string, Array> out;
        for (std::uint32_t li : leaves_) {
            const Node& node = nodes_[li];
            if (grads[li].empty()) {
                out.emplace(node.name, Array(node.value.shape(), 0.0));
            } else {
                out.emplace(node.name, std::move(grads[li]));
            }
        }
        return out;
    }

private:
    struct Node {
        Op op;
        std::array<std::uint32_t, 3> parent{UINT32_MAX, UINT32_MAX, UINT32_MAX};
        Array value;
        bool needs_grad = false;
        double scalar = 0.0;
        int i0 = 0, i1 = 0;
        std::vector<int> labels;
        std::string name;
    };

    Var push(Op op, Array value, std::initializer_list<Var> parents, bool force_grad = false) {
        Node node;
        node.op = op;
        node.value = std::move(value);
        node.needs_grad = force_grad;
        std::size_t i = 0;
        for (Var p : parents) {
            if (!p.valid() || p.idx >= nodes_.size()) throw ShapeError("Tape: invalid parent Var");
            node.parent[i++] = p.idx;
            node.needs_grad = node.needs_grad || nodes_[p.idx].needs_grad;
        }
        nodes_.push_back(std::move(node));
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    Array& grad_for(std::uint32_t idx, std::vector<Array>& grads) const {
        if (grads[idx].empty()) grads[idx] = Array(nodes_[idx].value.shape(), 0.0);
        return grads[idx];
    }

    void backward_node(std::uint32_t i, std::vector<Array>& grads) const {
        const Node& node = nodes_[i];
        const Array& g = grads[i];
        auto wants = [&](int slot) {
            return node.parent[slot] != UINT32_MAX && nodes_[node.parent[slot]].needs_grad;
        };
        switch (node.op) {
        case Op::Leaf:
        case Op::Const:
            break;
        case Op::Add: {
            for (int s = 0; s < 2; ++s) {
                if (!wants(s)) continue;
                Array& d = grad_for(node.parent[s], grads);
                for (std::size_t t = 0; t < g.numel(); ++t) d[t] += g[t];
            }
            break;
        }
        case Op::AddRowVec: {
            const std::size_t rows = g.dim(0), cols = g.dim(1);
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                for (std::size_t t = 0; t < g.numel(); ++t) d[t] += g[t];
            }
            if (wants(1)) {
                Array& d = grad_for(node.parent[1], grads);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) d[c] += g[r * cols + c];
            }
            break;
        }
        case Op::Mul: {
            const Array& a = nodes_[node.parent[0]].value;
            const Array& b = nodes_[node.parent[1]].value;
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                for (std::size_t t = 0; t < g.numel(); ++t) d[t] += g[t] * b[t];
            }
            if (wants(1)) {
                Array& d = grad_for(node.parent[1], grads);
                for (std::size_t t = 0; t < g.numel(); ++t) d[t] += g[t] * a[t];
            }
            break;
        }
        case Op::Scale: {
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                for (std::size_t t = 0; t < g.numel(); ++t) d[t] += node.scalar * g[t];
            }
            break;
        }
        case Op::Exp: {
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                for (std::size_t t = 0; t < g.numel(); ++t) d[t] += g[t] * node.value[t];
            }
            break;
        }
        case Op::Log: {
            const Array& x = nodes_[node.parent[0]].value;
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                for (std::size_t t = 0; t < g.numel(); ++t) d[t] += g[t] / x[t];
            }
            break;
        }
        case Op::Relu: {
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                for (std::size_t t = 0; t < g.numel(); ++t) d[t] += node.value[t] > 0.0 ? g[t] : 0.0;
            }
            break;
        }
        case Op::Sum: {
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                const double gv = g[0];
                for (std::size_t t = 0; t < d.numel(); ++t) d[t] += gv;
            }
            break;
        }
        case Op::Mean: {
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                const double gv = g[0] / static_cast<double>(d.numel());
                for (std::size_t t = 0; t < d.numel(); ++t) d[t] += gv;
            }
            break;
        }
        case Op::Matmul: {
            const Array& a = nodes_[node.parent[0]].value;
            const Array& b = nodes_[node.parent[1]].value;
            const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                kernels::gemm_nt_acc(g.data(), b.data(), d.data(), m, n, k);
            }
            if (wants(1)) {
                Array& d = grad_for(node.parent[1], grads);
                kernels::gemm_tn_acc(a.data(), g.data(), d.data(), m, k, n);
            }
            break;
        }
        case Op::Conv2d: {
            const Array& x = nodes_[node.parent[0]].value;
            const Array& w = nodes_[node.parent[1]].value;
            kernels::Conv2dDims dd;
            dd.batch = x.dim(0); dd.cin = x.dim(1); dd.h = x.dim(2); dd.w = x.dim(3);
            dd.cout = w.dim(0); dd.kh = w.dim(2); dd.kw = w.dim(3);
            dd.stride = static_cast<std::size_t>(node.i0);
            dd.pad = static_cast<std::size_t>(node.i1);
            dd.ho = node.value.dim(2); dd.wo = node.value.dim(3);
            double* dx = wants(0) ? grad_for(node.parent[0], grads).data() : nullptr;
            double* dw = wants(1) ? grad_for(node.parent[1], grads).data() : nullptr;
            double* db = wants(2) ? grad_for(node.parent[2], grads).data() : nullptr;
            kernels::conv2d_backward(x.data(), w.data(), g.data(), dx, dw, db, dd);
            break;
        }
        case Op::AvgPool2: {
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                const std::size_t h = d.dim(2), w = d.dim(3);
                const std::size_t ho = node.value.dim(2), wo = node.value.dim(3);
                for (std::size_t n = 0; n < d.dim(0) * d.dim(1); ++n) {
                    const double* gp = g.data() + n * ho * wo;
                    double* dp = d.data() + n * h * w;
                    for (std::size_t oy = 0; oy < ho; ++oy)
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const double gv = 0.25 * gp[oy * wo + ox];
                            dp[(2 * oy) * w + 2 * ox] += gv;
                            dp[(2 * oy) * w + 2 * ox + 1] += gv;
                            dp[(2 * oy + 1) * w + 2 * ox] += gv;
                            dp[(2 * oy + 1) * w + 2 * ox + 1] += gv;
                        }
                }
            }
            break;
        }
        case Op::GlobalAvgPool: {
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                const std::size_t hw = d.dim(2) * d.dim(3);
                const double inv = 1.0 / static_cast<double>(hw);
                for (std::size_t n = 0; n < d.dim(0) * d.dim(1); ++n) {
                    const double gv = g[n] * inv;
                    double* dp = d.data() + n * hw;
                    for (std::size_t t = 0; t < hw; ++t) dp[t] += gv;
                }
            }
            break;
        }
        case Op::SoftmaxRows: {
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                const std::size_t rows = g.dim(0), cols = g.dim(1);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* yr = node.value.data() + r * cols;
                    const double* gr = g.data() + r * cols;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
                    double* dr = d.data() + r * cols;
                    for (std::size_t c = 0; c < cols; ++c) dr[c] += yr[c] * (gr[c] - dot);
                }
            }
            break;
        }
        case Op::CrossEntropyRows: {
            if (wants(0)) {
                const Array& x = nodes_[node.parent[0]].value;
                Array& d = grad_for(node.parent[0], grads);
                const std::size_t rows = x.dim(0), cols = x.dim(1);
                const double gv = g[0] / static_cast<double>(rows);
                std::vector<double> sm(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    kernels::softmax_rows(x.data() + r * cols, sm.data(), 1, cols);
                    double* dr = d.data() + r * cols;
                    for (std::size_t c = 0; c < cols; ++c) dr[c] += gv * sm[c];
                    dr[node.labels[r]] -= gv;
                }
            }
            break;
        }
        case Op::SquaredDistance: {
            const Array& a = nodes_[node.parent[0]].value;
            const Array& b = nodes_[node.parent[1]].value;
            const std::size_t q = a.dim(0), p = b.dim(0), dim = a.dim(1);
            const bool wa = wants(0), wb = wants(1);
            Array* da = wa ? &grad_for(node.parent[0], grads) : nullptr;
            Array* db = wb ? &grad_for(node.parent[1], grads) : nullptr;
            for (std::size_t i2 = 0; i2 < q; ++i2) {
                const double* ai = a.data() + i2 * dim;
                for (std::size_t j = 0; j < p; ++j) {
                    const double coef = 2.0 * g[i2 * p + j];
                    if (coef == 0.0) continue;
                    const double* bj = b.data() + j * dim;
                    double* dai = wa ? da->data() + i2 * dim : nullptr;
                    double* dbj = wb ? db->data() + j * dim : nullptr;
                    for (std::size_t t = 0; t < dim; ++t) {
                        const double diff = coef * (ai[t] - bj[t]);
                        if (wa) dai[t] += diff;
                        if (wb) dbj[t] -= diff;
                    }
                }
            }
            break;
        }
        case Op::ClassMeans: {
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                const std::size_t dim = d.dim(1);
                const double inv = 1.0 / static_cast<double>(node.i1);
                for (std::size_t r = 0; r < d.dim(0); ++r) {
                    const double* gr = g.data() + static_cast<std::size_t>(node.labels[r]) * dim;
                    double* dr = d.data() + r * dim;
                    for (std::size_t t = 0; t < dim; ++t) dr[t] += inv * gr[t];
                }
            }
            break;
        }
        case Op::ConcatRows: {
            const Array& a = nodes_[node.parent[0]].value;
            if (wants(0)) {
                Array& d = grad_for(node.parent[0], grads);
                for (std::size_t t = 0; t < a.numel(); ++t) d[t] += g[t];
            }
            if (wants(1)) {
                Array& d = grad_for(node.parent[1], grads);
                for (std::size_t t = 0; t < d.numel(); ++t) d[t] += g[a.numel() + t];
            }
            break;
        }
        }
    }

    std::vector<Node> nodes_;
    std::vector<std::uint32_t> leaves_;
};

}  // namespace pkws
