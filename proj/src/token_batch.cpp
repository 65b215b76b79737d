// SPDX-License-Identifier: Apache-2.0
#include "damex/token_batch.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "damex/error.hpp"

namespace damex {

void TokenBatch::validate() const {
  const std::size_t t = size();
  if (dataset_ids.size() != t || foreground.size() != t || labels.size() != t) {
    throw ShapeError("token batch columns disagree on length");
  }
  for (std::size_t i = 0; i < t; ++i) {
    if (foreground[i] != labels[i].has_value()) {
      throw ContractError("token " + std::to_string(i) + ": label must be present iff foreground");
    }
  }
}

std::vector<std::size_t> TokenBatch::foreground_rows() const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < foreground.size(); ++i)
    if (foreground[i]) rows.push_back(i);
  return rows;
}

std::vector<std::size_t> TokenBatch::all_rows() const {
  std::vector<std::size_t> rows(size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

TokenBatch TokenBatch::subset(std::span<const std::size_t> rows) const {
  TokenBatch out;
  out.features = Matrix(rows.size(), dim());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = features.row(rows[i]);
    std::copy(src.begin(), src.end(), out.features.row(i).begin());
    out.dataset_ids.push_back(dataset_ids[rows[i]]);
    out.foreground.push_back(foreground[rows[i]]);
    out.labels.push_back(labels[rows[i]]);
  }
  return out;
}

TokenBatch concat(const TokenBatch& a, const TokenBatch& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  if (a.dim() != b.dim()) throw ShapeError("concat: feature dimensions differ");
  TokenBatch out;
  std::vector<double> data(a.features.data().begin(), a.features.data().end());
  data.insert(data.end(), b.features.data().begin(), b.features.data().end());
  out.features = Matrix(a.size() + b.size(), a.dim(), std::move(data));
  out.dataset_ids = a.dataset_ids;
  out.dataset_ids.insert(out.dataset_ids.end(), b.dataset_ids.begin(), b.dataset_ids.end());
  out.foreground = a.foreground;
  out.foreground.insert(out.foreground.end(), b.foreground.begin(), b.foreground.end());
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

}  // namespace damex
