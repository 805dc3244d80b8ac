#include "csvnet/kernels.hpp"

#include <algorithm>
#include <vector>

#include <omp.h>

#include "csvnet/common.hpp"

namespace csvnet::kernels {

namespace {

// Keeps one im2col buffer around 1M scalars so it stays cache-resident.
constexpr Eigen::Index kIm2colBudget = 1024 * 1024;

template <typename S>
void check_conv_shapes(ConstRef<S> w, ConstRef<S> x, int side, int kernel) {
    require_shape(kernel % 2 == 1 && kernel >= 1, "convolution kernel size must be odd");
    const Eigen::Index pixels = static_cast<Eigen::Index>(side) * side;
    require_shape(pixels > 0 && x.cols() % pixels == 0, "feature map columns are not a multiple of side^2");
    require_shape(w.cols() == x.rows() * kernel * kernel, "convolution weight columns do not match input channels");
}

template <typename S>
void im2col(ConstRef<S> x, int side, int kernel, Eigen::Index first_item, Eigen::Index items, Matrix<S>& col) {
    const Eigen::Index cin = x.rows();
    const Eigen::Index pixels = static_cast<Eigen::Index>(side) * side;
    const int pad = kernel / 2;
    col.resize(cin * kernel * kernel, items * pixels);
#pragma omp parallel for schedule(static)
    for (Eigen::Index it = 0; it < items; ++it) {
        const Eigen::Index src_base = (first_item + it) * pixels;
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                S* dst = col.col(it * pixels + r * side + c).data();
                for (int dy = 0; dy < kernel; ++dy) {
                    const int sr = r + dy - pad;
                    for (int dx = 0; dx < kernel; ++dx, dst += cin) {
                        const int sc = c + dx - pad;
                        if (sr < 0 || sr >= side || sc < 0 || sc >= side) {
                            std::fill(dst, dst + cin, S(0));
                        } else {
                            const S* src = x.col(src_base + sr * side + sc).data();
                            std::copy(src, src + cin, dst);
                        }
                    }
                }
            }
    }
}

template <typename S>
void col2im_accumulate(const Matrix<S>& dcol, int side, int kernel, Eigen::Index first_item, Eigen::Index items,
                       Matrix<S>& dx) {
    const Eigen::Index cin = dx.rows();
    const Eigen::Index pixels = static_cast<Eigen::Index>(side) * side;
    const int pad = kernel / 2;
#pragma omp parallel for schedule(static)
    for (Eigen::Index it = 0; it < items; ++it) {
        const Eigen::Index dst_base = (first_item + it) * pixels;
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                const S* src = dcol.col(it * pixels + r * side + c).data();
                for (int dy = 0; dy < kernel; ++dy) {
                    const int sr = r + dy - pad;
                    for (int dxk = 0; dxk < kernel; ++dxk, src += cin) {
                        const int sc = c + dxk - pad;
                        if (sr < 0 || sr >= side || sc < 0 || sc >= side) continue;
                        S* dst = dx.col(dst_base + sr * side + sc).data();
                        for (Eigen::Index ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
                    }
                }
            }
    }
}

// Direct kernels for layers with a single input or output map, where
// im2col + GEMM is dominated by memory traffic.

template <typename S>
void direct_forward_single_in(ConstRef<S> w, ConstRef<S> b, ConstRef<S> x, int side, int kernel, MutRef<S> y) {
    const Eigen::Index cout = w.rows();
    const Eigen::Index pixels = static_cast<Eigen::Index>(side) * side;
    const Eigen::Index items = x.cols() / pixels;
    const int pad = kernel / 2;
    const Matrix<S> wc = w;  // contiguous (cout, taps)
    const S* bias = b.data();
#pragma omp parallel for schedule(static)
    for (Eigen::Index it = 0; it < items; ++it) {
        const Eigen::Index base = it * pixels;
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                S* out = y.col(base + r * side + c).data();
                for (Eigen::Index co = 0; co < cout; ++co) out[co] = bias[co];
                for (int ky = 0; ky < kernel; ++ky) {
                    const int sr = r + ky - pad;
                    if (sr < 0 || sr >= side) continue;
                    for (int kx = 0; kx < kernel; ++kx) {
                        const int sc = c + kx - pad;
                        if (sc < 0 || sc >= side) continue;
                        const S v = x(0, base + sr * side + sc);
                        const S* wk = wc.data() + (ky * kernel + kx) * cout;
                        for (Eigen::Index co = 0; co < cout; ++co) out[co] += v * wk[co];
                    }
                }
            }
    }
}

template <typename S>
void direct_forward_single_out(ConstRef<S> w, ConstRef<S> b, ConstRef<S> x, int side, int kernel, MutRef<S> y) {
    const Eigen::Index cin = x.rows();
    const Eigen::Index pixels = static_cast<Eigen::Index>(side) * side;
    const Eigen::Index items = x.cols() / pixels;
    const int pad = kernel / 2;
    const Matrix<S> wc = w;  // contiguous (1, taps*cin)
    const S bias = b(0, 0);
#pragma omp parallel for schedule(static)
    for (Eigen::Index it = 0; it < items; ++it) {
        const Eigen::Index base = it * pixels;
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                S acc = bias;
                for (int ky = 0; ky < kernel; ++ky) {
                    const int sr = r + ky - pad;
                    if (sr < 0 || sr >= side) continue;
                    for (int kx = 0; kx < kernel; ++kx) {
                        const int sc = c + kx - pad;
                        if (sc < 0 || sc >= side) continue;
                        const S* xv = x.col(base + sr * side + sc).data();
                        const S* wk = wc.data() + (ky * kernel + kx) * cin;
                        S part = S(0);
                        for (Eigen::Index ci = 0; ci < cin; ++ci) part += wk[ci] * xv[ci];
                        acc += part;
                    }
                }
                y(0, base + r * side + c) = acc;
            }
    }
}

// Per-thread partial weight gradients, reduced in thread order.
template <typename S, typename Body>
void reduce_weight_grad(Eigen::Index items, Eigen::Index rows, Eigen::Index cols, MutRef<S> dw, Body&& body) {
    const int threads = omp_get_max_threads();
    std::vector<Matrix<S>> partial(static_cast<std::size_t>(threads));
#pragma omp parallel num_threads(threads)
    {
        const int tid = omp_get_thread_num();
        Matrix<S>& acc = partial[static_cast<std::size_t>(tid)];
        acc.setZero(rows, cols);
#pragma omp for schedule(static)
        for (Eigen::Index it = 0; it < items; ++it) body(it, acc);
    }
    for (const auto& p : partial)
        if (p.size() > 0) dw += p;
}

template <typename S>
void direct_backward_single_in(ConstRef<S> w, ConstRef<S> x, ConstRef<S> dy, int side, int kernel, MutRef<S> dw,
                               Matrix<S>* dx) {
    const Eigen::Index cout = w.rows();
    const Eigen::Index pixels = static_cast<Eigen::Index>(side) * side;
    const Eigen::Index items = x.cols() / pixels;
    const int pad = kernel / 2;
    const int taps = kernel * kernel;
    if (dx) dx->setZero(1, x.cols());
    reduce_weight_grad<S>(items, cout, taps, dw, [&](Eigen::Index it, Matrix<S>& acc) {
        const Eigen::Index base = it * pixels;
        Eigen::Matrix<S, Eigen::Dynamic, 1> proj(taps);
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                const auto g = dy.col(base + r * side + c);
                if (dx) proj.noalias() = w.transpose() * g;
                for (int ky = 0; ky < kernel; ++ky) {
                    const int sr = r + ky - pad;
                    if (sr < 0 || sr >= side) continue;
                    for (int kx = 0; kx < kernel; ++kx) {
                        const int sc = c + kx - pad;
                        if (sc < 0 || sc >= side) continue;
                        const Eigen::Index src = base + sr * side + sc;
                        acc.col(ky * kernel + kx) += x(0, src) * g;
                        if (dx) (*dx)(0, src) += proj(ky * kernel + kx);
                    }
                }
            }
    });
}

template <typename S>
void direct_backward_single_out(ConstRef<S> w, ConstRef<S> x, ConstRef<S> dy, int side, int kernel, MutRef<S> dw,
                                Matrix<S>* dx) {
    const Eigen::Index cin = x.rows();
    const Eigen::Index pixels = static_cast<Eigen::Index>(side) * side;
    const Eigen::Index items = x.cols() / pixels;
    const int pad = kernel / 2;
    if (dx) dx->setZero(cin, x.cols());
    reduce_weight_grad<S>(items, 1, w.cols(), dw, [&](Eigen::Index it, Matrix<S>& acc) {
        const Eigen::Index base = it * pixels;
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                const S g = dy(0, base + r * side + c);
                if (g == S(0)) continue;
                for (int ky = 0; ky < kernel; ++ky) {
                    const int sr = r + ky - pad;
                    if (sr < 0 || sr >= side) continue;
                    for (int kx = 0; kx < kernel; ++kx) {
                        const int sc = c + kx - pad;
                        if (sc < 0 || sc >= side) continue;
                        const Eigen::Index src = base + sr * side + sc;
                        const Eigen::Index off = (ky * kernel + kx) * cin;
                        acc.row(0).segment(off, cin) += g * x.col(src).transpose();
                        if (dx) dx->col(src) += g * w.row(0).segment(off, cin).transpose();
                    }
                }
            }
    });
}

// --- reference --------------------------------------------------------------

template <typename S>
void ref_matmul(ConstRef<S> a, bool trans_a, ConstRef<S> b, bool trans_b, MutRef<S> c, bool accumulate) {
    const Eigen::Index m = trans_a ? a.cols() : a.rows();
    const Eigen::Index k = trans_a ? a.rows() : a.cols();
    const Eigen::Index n = trans_b ? b.rows() : b.cols();
    require_shape((trans_b ? b.cols() : b.rows()) == k && c.rows() == m && c.cols() == n, "matmul shape mismatch");
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            S acc = accumulate ? c(i, j) : S(0);
            for (Eigen::Index p = 0; p < k; ++p) {
                const S av = trans_a ? a(p, i) : a(i, p);
                const S bv = trans_b ? b(j, p) : b(p, j);
                acc += av * bv;
            }
            c(i, j) = acc;
        }
}

template <typename S>
void ref_conv_forward(ConstRef<S> w, ConstRef<S> b, ConstRef<S> x, int side, int kernel, MutRef<S> y) {
    const Eigen::Index cin = x.rows();
    const Eigen::Index cout = w.rows();
    const Eigen::Index pixels = static_cast<Eigen::Index>(side) * side;
    const Eigen::Index items = x.cols() / pixels;
    const int pad = kernel / 2;
    for (Eigen::Index it = 0; it < items; ++it)
        for (Eigen::Index co = 0; co < cout; ++co)
            for (int r = 0; r < side; ++r)
                for (int c = 0; c < side; ++c) {
                    S acc = b(co, 0);
                    for (int dy = 0; dy < kernel; ++dy)
                        for (int dx = 0; dx < kernel; ++dx) {
                            const int sr = r + dy - pad;
                            const int sc = c + dx - pad;
                            if (sr < 0 || sr >= side || sc < 0 || sc >= side) continue;
                            for (Eigen::Index ci = 0; ci < cin; ++ci)
                                acc += w(co, (dy * kernel + dx) * cin + ci) * x(ci, it * pixels + sr * side + sc);
                        }
                    y(co, it * pixels + r * side + c) = acc;
                }
}

template <typename S>
void ref_conv_backward(ConstRef<S> w, ConstRef<S> x, ConstRef<S> dy, int side, int kernel, MutRef<S> dw,
                       MutRef<S> db, Matrix<S>* dx) {
    const Eigen::Index cin = x.rows();
    const Eigen::Index cout = w.rows();
    const Eigen::Index pixels = static_cast<Eigen::Index>(side) * side;
    const Eigen::Index items = x.cols() / pixels;
    const int pad = kernel / 2;
    if (dx) dx->setZero(cin, x.cols());
    for (Eigen::Index it = 0; it < items; ++it)
        for (Eigen::Index co = 0; co < cout; ++co)
            for (int r = 0; r < side; ++r)
                for (int c = 0; c < side; ++c) {
                    const S g = dy(co, it * pixels + r * side + c);
                    db(co, 0) += g;
                    for (int ky = 0; ky < kernel; ++ky)
                        for (int kx = 0; kx < kernel; ++kx) {
                            const int sr = r + ky - pad;
                            const int sc = c + kx - pad;
                            if (sr < 0 || sr >= side || sc < 0 || sc >= side) continue;
                            const Eigen::Index src = it * pixels + sr * side + sc;
                            for (Eigen::Index ci = 0; ci < cin; ++ci) {
                                const Eigen::Index wc = (ky * kernel + kx) * cin + ci;
                                dw(co, wc) += g * x(ci, src);
                                if (dx) (*dx)(ci, src) += g * w(co, wc);
                            }
                        }
                }
}

}  // namespace

template <typename S>
void affine_forward(Backend be, ConstRef<S> w, ConstRef<S> b, ConstRef<S> x, MutRef<S> y) {
    require_shape(w.cols() == x.rows() && y.rows() == w.rows() && y.cols() == x.cols() && b.rows() == w.rows(),
                  "affine shape mismatch");
    if (be == Backend::reference) {
        ref_matmul<S>(w, false, x, false, y, false);
        for (Eigen::Index j = 0; j < y.cols(); ++j)
            for (Eigen::Index i = 0; i < y.rows(); ++i) y(i, j) += b(i, 0);
        return;
    }
    y.noalias() = w * x;
    y.colwise() += b.col(0);
}

template <typename S>
void affine_backward(Backend be, ConstRef<S> w, ConstRef<S> x, ConstRef<S> dy, MutRef<S> dw, MutRef<S> db,
                     Matrix<S>* dx) {
    require_shape(dy.rows() == w.rows() && dy.cols() == x.cols() && x.rows() == w.cols(), "affine grad shape mismatch");
    if (be == Backend::reference) {
        ref_matmul<S>(dy, false, x, true, dw, true);
        for (Eigen::Index j = 0; j < dy.cols(); ++j)
            for (Eigen::Index i = 0; i < dy.rows(); ++i) db(i, 0) += dy(i, j);
        if (dx) {
            dx->resize(w.cols(), dy.cols());
            ref_matmul<S>(w, true, dy, false, *dx, false);
        }
        return;
    }
    dw.noalias() += dy * x.transpose();
    db.col(0) += dy.rowwise().sum();
    if (dx) dx->noalias() = w.transpose() * dy;
}

template <typename S>
void matmul_accumulate(Backend be, ConstRef<S> w, ConstRef<S> x, MutRef<S> y) {
    if (be == Backend::reference) return ref_matmul<S>(w, false, x, false, y, true);
    require_shape(w.cols() == x.rows() && y.rows() == w.rows() && y.cols() == x.cols(), "matmul shape mismatch");
    y.noalias() += w * x;
}

template <typename S>
void matmul_transposed(Backend be, ConstRef<S> w, ConstRef<S> x, MutRef<S> y) {
    if (be == Backend::reference) return ref_matmul<S>(w, true, x, false, y, false);
    require_shape(w.rows() == x.rows() && y.rows() == w.cols() && y.cols() == x.cols(), "matmul shape mismatch");
    y.noalias() = w.transpose() * x;
}

template <typename S>
void outer_accumulate(Backend be, ConstRef<S> dy, ConstRef<S> x, MutRef<S> dw) {
    if (be == Backend::reference) return ref_matmul<S>(dy, false, x, true, dw, true);
    require_shape(dw.rows() == dy.rows() && dw.cols() == x.rows() && dy.cols() == x.cols(), "outer shape mismatch");
    dw.noalias() += dy * x.transpose();
}

template <typename S>
void conv_forward(Backend be, ConstRef<S> w, ConstRef<S> b, ConstRef<S> x, int side, int kernel, MutRef<S> y) {
    check_conv_shapes<S>(w, x, side, kernel);
    require_shape(y.rows() == w.rows() && y.cols() == x.cols() && b.rows() == w.rows(), "conv output shape mismatch");
    if (be == Backend::reference) return ref_conv_forward<S>(w, b, x, side, kernel, y);
    if (x.rows() == 1) return direct_forward_single_in<S>(w, b, x, side, kernel, y);
    if (w.rows() == 1) return direct_forward_single_out<S>(w, b, x, side, kernel, y);

    const Eigen::Index pixels = static_cast<Eigen::Index>(side) * side;
    const Eigen::Index items = x.cols() / pixels;
    const Eigen::Index chunk = std::max<Eigen::Index>(1, kIm2colBudget / (w.cols() * pixels));
    Matrix<S> col;
    for (Eigen::Index first = 0; first < items; first += chunk) {
        const Eigen::Index count = std::min(chunk, items - first);
        im2col<S>(x, side, kernel, first, count, col);
        auto out = y.middleCols(first * pixels, count * pixels);
        out.noalias() = w * col;
        out.colwise() += b.col(0);
    }
}

template <typename S>
void conv_backward(Backend be, ConstRef<S> w, ConstRef<S> x, ConstRef<S> dy, int side, int kernel, MutRef<S> dw,
                   MutRef<S> db, Matrix<S>* dx) {
    check_conv_shapes<S>(w, x, side, kernel);
    require_shape(dy.rows() == w.rows() && dy.cols() == x.cols(), "conv gradient shape mismatch");
    if (be == Backend::reference) return ref_conv_backward<S>(w, x, dy, side, kernel, dw, db, dx);
    if (x.rows() == 1 || w.rows() == 1) {
        db.col(0) += dy.rowwise().sum();
        if (x.rows() == 1) return direct_backward_single_in<S>(w, x, dy, side, kernel, dw, dx);
        return direct_backward_single_out<S>(w, x, dy, side, kernel, dw, dx);
    }

    const Eigen::Index pixels = static_cast<Eigen::Index>(side) * side;
    const Eigen::Index items = x.cols() / pixels;
    const Eigen::Index cin = x.rows();
    const Eigen::Index cout = w.rows();
    const Eigen::Index chunk = std::max<Eigen::Index>(1, kIm2colBudget / (std::max(cin, cout) * kernel * kernel * pixels));
    // With fewer output than input channels, the input gradient is cheaper as a
    // convolution of dy with the spatially flipped, transposed kernel.
    const bool flipped = cout < cin;
    Matrix<S> w_flip;
    if (dx && flipped) {
        w_flip.resize(cin, kernel * kernel * cout);
        for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
                const Eigen::Index src = ((kernel - 1 - ky) * kernel + (kernel - 1 - kx)) * cin;
                const Eigen::Index dst = (ky * kernel + kx) * cout;
                w_flip.middleCols(dst, cout) = w.middleCols(src, cin).transpose();
            }
    }
    if (dx) dx->setZero(cin, x.cols());
    db.col(0) += dy.rowwise().sum();
    Matrix<S> col;
    Matrix<S> dcol;
    for (Eigen::Index first = 0; first < items; first += chunk) {
        const Eigen::Index count = std::min(chunk, items - first);
        im2col<S>(x, side, kernel, first, count, col);
        const auto g = dy.middleCols(first * pixels, count * pixels);
        dw.noalias() += g * col.transpose();
        if (!dx) continue;
        if (flipped) {
            im2col<S>(dy, side, kernel, first, count, dcol);
            dx->middleCols(first * pixels, count * pixels).noalias() = w_flip * dcol;
        } else {
            dcol.noalias() = w.transpose() * g;
            col2im_accumulate<S>(dcol, side, kernel, first, count, *dx);
        }
    }
}

template <typename S>
void relu_inplace(Backend be, MutRef<S> y) {
    const Eigen::Index cols = y.cols();
    if (be == Backend::reference) {
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < y.rows(); ++i) y(i, j) = y(i, j) > S(0) ? y(i, j) : S(0);
        return;
    }
#pragma omp parallel for schedule(static)
    for (Eigen::Index j = 0; j < cols; ++j) y.col(j) = y.col(j).cwiseMax(S(0));
}

template <typename S>
void relu_backward_inplace(Backend be, ConstRef<S> y, MutRef<S> dy) {
    require_shape(y.rows() == dy.rows() && y.cols() == dy.cols(), "relu gradient shape mismatch");
    const Eigen::Index cols = y.cols();
    if (be == Backend::reference) {
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < y.rows(); ++i)
                if (!(y(i, j) > S(0))) dy(i, j) = S(0);
        return;
    }
#pragma omp parallel for schedule(static)
    for (Eigen::Index j = 0; j < cols; ++j)
        dy.col(j) = (y.col(j).array() > S(0)).select(dy.col(j), S(0));
}

int thread_count() { return omp_get_max_threads(); }

void set_thread_count(int threads) {
    require(threads >= 1, "thread count must be positive");
    omp_set_num_threads(threads);
}

#define CSVNET_INSTANTIATE(S)                                                                                      \
    template void affine_forward<S>(Backend, ConstRef<S>, ConstRef<S>, ConstRef<S>, MutRef<S>);                   \
    template void affine_backward<S>(Backend, ConstRef<S>, ConstRef<S>, ConstRef<S>, MutRef<S>, MutRef<S>,        \
                                     Matrix<S>*);                                                                 \
    template void matmul_accumulate<S>(Backend, ConstRef<S>, ConstRef<S>, MutRef<S>);                             \
    template void matmul_transposed<S>(Backend, ConstRef<S>, ConstRef<S>, MutRef<S>);                             \
    template void outer_accumulate<S>(Backend, ConstRef<S>, ConstRef<S>, MutRef<S>);                              \
    template void conv_forward<S>(Backend, ConstRef<S>, ConstRef<S>, ConstRef<S>, int, int, MutRef<S>);           \
    template void conv_backward<S>(Backend, ConstRef<S>, ConstRef<S>, ConstRef<S>, int, int, MutRef<S>, MutRef<S>, \
                                   Matrix<S>*);                                                                   \
    template void relu_inplace<S>(Backend, MutRef<S>);                                                            \
    template void relu_backward_inplace<S>(Backend, ConstRef<S>, MutRef<S>);

CSVNET_INSTANTIATE(float)
CSVNET_INSTANTIATE(double)

#undef CSVNET_INSTANTIATE

}  // namespace csvnet::kernels
