// SPDX-License-Identifier: Apache-2.0
#include "damex/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace damex {

namespace {

constexpr int kCell = 40;
constexpr int kMargin = 60;
constexpr int kGap = 40;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string utilization_csv(std::span<const UtilizationMatrix> layers) {
  std::ostringstream out;
  const std::size_t experts = layers.empty() ? 0 : layers.front().weights.cols();
  out << "layer,dataset";
  for (std::size_t e = 0; e < experts; ++e) out << ",expert" << e;
  out << '\n';
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const UtilizationMatrix& u = layers[l];
    for (std::size_t i = 0; i < u.datasets.size(); ++i) {
      out << l << ',' << u.datasets[i];
      for (std::size_t e = 0; e < u.weights.cols(); ++e) {
        out << ',' << (u.present[i] ? fmt(u.weights(i, e)) : std::string("NA"));
      }
      out << '\n';
    }
  }
  return out.str();
}

std::string utilization_svg(std::span<const UtilizationMatrix> layers) {
  int width = kMargin;
  int height = 0;
  for (const UtilizationMatrix& u : layers) {
    width += static_cast<int>(u.weights.cols()) * kCell + kGap;
    height = std::max(height, static_cast<int>(u.datasets.size()) * kCell);
  }
  height += 2 * kMargin;

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
      << "\" fill=\"#f4f4f4\"/>\n";
  int x0 = kMargin;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const UtilizationMatrix& u = layers[l];
    svg << "<g id=\"layer" << l << "\">\n"
        << "<text x=\"" << x0 << "\" y=\"" << kMargin - 30 << "\">MoE layer " << l << "</text>\n";
    for (std::size_t e = 0; e < u.weights.cols(); ++e) {
      svg << "<text x=\"" << x0 + static_cast<int>(e) * kCell + kCell / 2 << "\" y=\"" << kMargin - 8
          << "\" text-anchor=\"middle\">e" << e << "</text>\n";
    }
    for (std::size_t i = 0; i < u.datasets.size(); ++i) {
      const int y = kMargin + static_cast<int>(i) * kCell;
      svg << "<text x=\"" << x0 - 6 << "\" y=\"" << y + kCell / 2 + 4
          << "\" text-anchor=\"end\">d" << u.datasets[i] << "</text>\n";
      for (std::size_t e = 0; e < u.weights.cols(); ++e) {
        const double w = u.present[i] ? std::clamp(u.weights(i, e), 0.0, 1.0) : 0.0;
        const int gray = static_cast<int>(std::lround(255.0 * w));
        svg << "<rect x=\"" << x0 + static_cast<int>(e) * kCell << "\" y=\"" << y << "\" width=\""
            << kCell << "\" height=\"" << kCell << "\" fill=\"rgb(" << gray << ',' << gray << ','
            << gray << ")\" stroke=\"#888\" data-weight=\""
            << (u.present[i] ? fmt(u.weights(i, e)) : std::string("NA")) << "\"/>\n";
      }
    }
    svg << "</g>\n";
    x0 += static_cast<int>(u.weights.cols()) * kCell + kGap;
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace damex
