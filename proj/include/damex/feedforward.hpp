// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <random>

#include "damex/autodiff.hpp"
#include "damex/matrix.hpp"

namespace damex {

enum class Activation { gelu, linear };

/// Two-layer map D -> H -> D: act(x W_in + b_in) W_out + b_out.
struct FeedForward {
  Matrix w_in;   // D x H
  Matrix b_in;   // 1 x H
  Matrix w_out;  // H x D
  Matrix b_out;  // 1 x D

  std::size_t dim() const noexcept { return w_in.rows(); }
  std::size_t hidden() const noexcept { return w_in.cols(); }
  bool operator==(const FeedForward&) const = default;

  /// Gaussian init with std 1/sqrt(fan_in) on W_in, out_scale/sqrt(H) on
  /// W_out and zero biases.
  static FeedForward random(std::size_t dim, std::size_t hidden, std::mt19937_64& rng,
                            double out_scale = 1.0);
  static FeedForward zeros(std::size_t dim, std::size_t hidden);
};

struct FeedForwardVars {
  Var w_in, b_in, w_out, b_out;
};

FeedForwardVars bind(Tape& tape, const FeedForward& ff, bool trainable = true);

double activate(Activation act, double x);
double activate_derivative(Activation act, double x);

/// Value-level evaluation. `pre` and `hidden`, if given, receive the
/// pre-activation and post-activation hidden layers.
Matrix apply(const FeedForward& ff, const Matrix& x, Activation act, Matrix* pre = nullptr,
             Matrix* hidden = nullptr);

/// Same arithmetic as apply(), recorded on a tape.
Var apply(const FeedForwardVars& ff, Var x, Activation act);

}  // namespace damex
