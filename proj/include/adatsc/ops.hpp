#pragma once

#include <vector>

#include "adatsc/autodiff.hpp"

// Differentiable tensor ops. Binary elementwise ops broadcast with numpy
// rules (shapes right-aligned, size-1 axes stretch). Spatial ops use NHWC.
namespace adatsc::ad {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> neg(const Var<T>& x);
template <typename T> Var<T> scale(const Var<T>& x, T c);
template <typename T> Var<T> add_scalar(const Var<T>& x, T c);
template <typename T> Var<T> pow_scalar(const Var<T>& x, T p);
template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> log(const Var<T>& x);
// log(max(x, eps)); zero gradient where x < eps.
template <typename T> Var<T> floor_log(const Var<T>& x, T eps);
template <typename T> Var<T> sqrt(const Var<T>& x);
template <typename T> Var<T> square(const Var<T>& x);
template <typename T> Var<T> abs(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> tanh(const Var<T>& x);
template <typename T> Var<T> clamp_min(const Var<T>& x, T lo);
// sign(x) * max(|x| - theta, 0)
template <typename T> Var<T> shrink(const Var<T>& x, T theta);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
template <typename T> Var<T> sum_axis(const Var<T>& x, int axis, bool keepdim = false);
template <typename T> Var<T> mean_axis(const Var<T>& x, int axis, bool keepdim = false);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> permute(const Var<T>& x, const std::vector<int>& perm);
template <typename T> Var<T> broadcast_to(const Var<T>& x, const Shape& shape);
template <typename T> Var<T> slice(const Var<T>& x, int axis, std::int64_t start, std::int64_t length);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int axis);
template <typename T> Var<T> stack(const std::vector<Var<T>>& xs, int axis);
// out[..., i, ...] = x[..., index[i], ...] along `axis`; repeated indices accumulate in backward.
template <typename T> Var<T> gather(const Var<T>& x, int axis, const std::vector<std::int64_t>& index);

// 2-D product with optional transposes: op(a) @ op(b).
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);
// Batched 3-D product over the leading axis.
template <typename T> Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);
// x[..., in] @ w[in, out] + bias[out]; bias may be undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

// Same-padded stride-1 convolution. x (N,H,W,Cin), w (k,k,Cin,Cout), bias (Cout) or undefined.
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias);
// 2x2 spatial max pool on (N,H,W,C); H, W even.
template <typename T> Var<T> maxpool2x2(const Var<T>& x);
// Nearest-neighbour 2x spatial upsample on (N,H,W,C).
template <typename T> Var<T> upsample2x(const Var<T>& x);
// Normalises over the last axis, then applies gain/bias (each of that length, may be undefined).
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5));
template <typename T> Var<T> softmax_last(const Var<T>& x);
// Convolutional-LSTM pointwise update. pre (..., 4F) holds gate pre-activations in
// [input, forget, output, candidate] order, c (..., F) the previous cell.
// Returns (..., 2F) = [h', c'].
template <typename T> Var<T> lstm_pointwise(const Var<T>& pre, const Var<T>& c);
// Squared Euclidean distances between rows: a (n,D), b (m,D) -> (n,m).
template <typename T> Var<T> pairwise_sqdist(const Var<T>& a, const Var<T>& b);

}  // namespace adatsc::ad
