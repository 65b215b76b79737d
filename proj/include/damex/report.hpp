// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>

#include "damex/metrics.hpp"

namespace damex {

/// Header `layer,dataset,expert0..expert{E-1}`; absent datasets print NA.
std::string utilization_csv(std::span<const UtilizationMatrix> layers);

/// One grid per layer, one rect per (dataset, expert) cell. Cell gray level
/// is the routing weight (black 0, white 1); rows are labelled by dataset id
/// and columns by expert id.
std::string utilization_svg(std::span<const UtilizationMatrix> layers);

}  // namespace damex
