// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "damex/matrix.hpp"

namespace damex {

/// A batch of tokens: one feature row per token plus its dataset of origin,
/// whether it is foreground, and its class in the union label space.
struct TokenBatch {
  Matrix features;  // T x D
  std::vector<int> dataset_ids;
  std::vector<bool> foreground;
  std::vector<std::optional<int>> labels;  // present iff foreground

  std::size_t size() const noexcept { return features.rows(); }
  std::size_t dim() const noexcept { return features.cols(); }

  /// Throws ShapeError / ContractError when the per-token columns disagree
  /// or a label is present on a background token (or missing on foreground).
  void validate() const;

  std::vector<std::size_t> foreground_rows() const;
  std::vector<std::size_t> all_rows() const;
  TokenBatch subset(std::span<const std::size_t> rows) const;
};

TokenBatch concat(const TokenBatch& a, const TokenBatch& b);

}  // namespace damex
