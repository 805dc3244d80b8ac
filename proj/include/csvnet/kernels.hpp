#pragma once

// Dense, convolution and activation kernels used by the decoder.
//
// Two interchangeable backends:
//   reference  naive serial loops, kept as the correctness oracle;
//   parallel   im2col + Eigen GEMM with OpenMP over batch items.
//
// Feature maps are column-major matrices of shape (channels, items * side^2);
// column j = item * side^2 + row * side + col. Convolution weights are
// (cout, k*k*cin) with column index (dy*k + dx)*cin + ci. All convolutions
// use stride 1 and zero padding k/2, so spatial size is preserved.

#include <Eigen/Core>

namespace csvnet::kernels {

enum class Backend { reference, parallel };

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
using ConstRef = Eigen::Ref<const Matrix<S>>;

template <typename S>
using MutRef = Eigen::Ref<Matrix<S>>;

/// y = W x + b (b broadcast over columns).
template <typename S>
void affine_forward(Backend be, ConstRef<S> w, ConstRef<S> b, ConstRef<S> x, MutRef<S> y);

/// dW += dY x^T, db += dY 1; if dx is non-null, *dx = W^T dY.
template <typename S>
void affine_backward(Backend be, ConstRef<S> w, ConstRef<S> x, ConstRef<S> dy, MutRef<S> dw, MutRef<S> db,
                     Matrix<S>* dx);

/// y += W x.
template <typename S>
void matmul_accumulate(Backend be, ConstRef<S> w, ConstRef<S> x, MutRef<S> y);

/// y = W^T x.
template <typename S>
void matmul_transposed(Backend be, ConstRef<S> w, ConstRef<S> x, MutRef<S> y);

/// dW += dY x^T.
template <typename S>
void outer_accumulate(Backend be, ConstRef<S> dy, ConstRef<S> x, MutRef<S> dw);

template <typename S>
void conv_forward(Backend be, ConstRef<S> w, ConstRef<S> b, ConstRef<S> x, int side, int kernel, MutRef<S> y);

/// dW += .., db += ..; if dx is non-null it is resized and overwritten.
template <typename S>
void conv_backward(Backend be, ConstRef<S> w, ConstRef<S> x, ConstRef<S> dy, int side, int kernel, MutRef<S> dw,
                   MutRef<S> db, Matrix<S>* dx);

template <typename S>
void relu_inplace(Backend be, MutRef<S> y);

/// dy *= (y > 0), where y is the post-activation value.
template <typename S>
void relu_backward_inplace(Backend be, ConstRef<S> y, MutRef<S> dy);

/// Number of OpenMP threads the parallel backend will use.
int thread_count();
void set_thread_count(int threads);

}  // namespace csvnet::kernels
