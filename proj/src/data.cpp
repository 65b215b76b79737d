// SPDX-License-Identifier: Apache-2.0
#include "damex/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "damex/error.hpp"
#include "damex/keyvalue.hpp"

namespace damex {

namespace {

// Preset geometry. Axis 0 carries the domain signal; class prototypes live
// on the remaining axes. Every preset adds one large offset shared by all
// tokens. Router updates along that direction favour whichever expert already
// holds more tokens, so without an auxiliary loss routing drifts onto a
// single expert.
constexpr double kClassScale = 1.0;
constexpr double kClassSpread = 1.0;
constexpr double kDomainShift = 1.5;
constexpr double kDomainNoise = 0.4;
constexpr double kCommonOffset = 10.0;
constexpr double kBackgroundFraction = 0.2;
constexpr double kBackgroundSpread = 1.5;

std::vector<double> gaussian_vector(std::size_t dim, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(dim);
  for (double& x : v) x = dist(rng);
  return v;
}

struct Geometry {
  std::vector<std::vector<double>> prototypes;  // per union label
  std::vector<double> common;
};

Geometry make_geometry(std::size_t dim, std::size_t labels, std::mt19937_64& rng) {
  if (dim < 2) throw ConfigError("presets need at least 2 feature dimensions");
  Geometry g;
  for (std::size_t c = 0; c < labels; ++c) {
    auto p = gaussian_vector(dim, kClassScale, rng);
    p[0] = 0.0;
    g.prototypes.push_back(std::move(p));
  }
  g.common = gaussian_vector(dim, 1.0, rng);
  g.common[0] = 0.0;
  double norm = 0.0;
  for (double v : g.common) norm += v * v;
  norm = std::sqrt(norm);
  for (double& v : g.common) v *= kCommonOffset / norm;
  return g;
}

DatasetSpec make_spec(int id, std::size_t train, std::size_t eval, const Geometry& g,
                      std::span<const int> labels, double shift) {
  DatasetSpec spec;
  spec.dataset_id = id;
  spec.num_train = train;
  spec.num_eval = eval;
  spec.domain_offset = g.common;
  spec.domain_offset[0] = shift;
  for (int label : labels) {
    spec.classes.push_back({label, g.prototypes[static_cast<std::size_t>(label)], kClassSpread});
  }
  spec.background_fraction = kBackgroundFraction;
  spec.background_spread = kBackgroundSpread;
  return spec;
}

void append_token(TokenBatch& batch, std::vector<double>& features, int dataset, bool fg,
                  std::optional<int> label, std::span<const double> x) {
  features.insert(features.end(), x.begin(), x.end());
  batch.dataset_ids.push_back(dataset);
  batch.foreground.push_back(fg);
  batch.labels.push_back(label);
}

TokenBatch draw_split(std::span<const DatasetSpec> specs, bool train, std::size_t dim,
                      std::mt19937_64& rng) {
  TokenBatch batch;
  std::vector<double> features;
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> x(dim);
  for (const DatasetSpec& spec : specs) {
    const std::size_t fg = train ? spec.num_train : spec.num_eval;
    const auto bg = static_cast<std::size_t>(std::llround(
        static_cast<double>(fg) * spec.background_fraction / (1.0 - spec.background_fraction)));
    for (std::size_t i = 0; i < fg; ++i) {
      const ClassCluster& cls = spec.classes[i % spec.classes.size()];
      for (std::size_t d = 0; d < dim; ++d) {
        // The domain axis keeps a tight spread so domains stay separable.
        const double noise = d == 0 ? kDomainNoise : cls.spread;
        x[d] = spec.domain_offset[d] + cls.mean[d] + noise * unit(rng);
      }
      append_token(batch, features, spec.dataset_id, true, cls.label, x);
    }
    for (std::size_t i = 0; i < bg; ++i) {
      for (std::size_t d = 0; d < dim; ++d) {
        const double noise = d == 0 ? kDomainNoise : spec.background_spread;
        x[d] = spec.domain_offset[d] + noise * unit(rng);
      }
      append_token(batch, features, spec.dataset_id, false, std::nullopt, x);
    }
  }
  const std::size_t count = batch.dataset_ids.size();
  batch.features = Matrix(count, dim, std::move(features));
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return batch.subset(order);
}

bool parse_long(std::string_view s, long long& out) {
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

void DatasetSpec::validate(std::size_t dim) const {
  const std::string who = "dataset " + std::to_string(dataset_id) + ": ";
  if (classes.empty()) throw ConfigError(who + "no classes");
  if (num_train == 0 || num_eval == 0) throw ConfigError(who + "token counts must be positive");
  if (domain_offset.size() != dim) throw ConfigError(who + "domain offset has the wrong dimension");
  if (!(background_fraction >= 0.0 && background_fraction < 1.0)) {
    throw ConfigError(who + "background fraction must lie in [0, 1)");
  }
  if (!(background_spread > 0.0)) throw ConfigError(who + "background spread must be positive");
  for (const ClassCluster& c : classes) {
    if (c.mean.size() != dim) throw ConfigError(who + "class mean has the wrong dimension");
    if (!(c.spread > 0.0)) throw ConfigError(who + "class spread must be positive");
    if (c.label < 0) throw ConfigError(who + "negative class label");
  }
}

Mixture generate_mixture(std::span<const DatasetSpec> specs, std::uint64_t seed) {
  if (specs.empty()) throw ConfigError("mixture needs at least one dataset");
  const std::size_t dim = specs.front().domain_offset.size();
  for (const DatasetSpec& s : specs) s.validate(dim);
  std::mt19937_64 rng(seed);
  Mixture m;
  m.train = draw_split(specs, true, dim, rng);
  m.eval = draw_split(specs, false, dim, rng);
  return m;
}

std::vector<DatasetSpec> preset_specs(const std::string& preset, std::size_t dim,
                                      const DataConfig& data) {
  std::mt19937_64 rng(data.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t train = data.train_per_dataset;
  const std::size_t eval = data.eval_per_dataset;
  if (preset == "domains") {
    const Geometry g = make_geometry(dim, 4, rng);
    const int labels[] = {0, 1, 2, 3};
    return {make_spec(0, train, eval, g, labels, kDomainShift),
            make_spec(1, train, eval, g, labels, -kDomainShift)};
  }
  if (preset == "divergent") {
    const Geometry g = make_geometry(dim, 8, rng);
    const int first[] = {0, 1, 2, 3};
    const int second[] = {4, 5, 6, 7};
    return {make_spec(0, train, eval, g, first, 0.0), make_spec(1, train, eval, g, second, 0.0)};
  }
  if (preset == "limited") {
    const Geometry g = make_geometry(dim, 4, rng);
    const int labels[] = {0, 1, 2, 3};
    DatasetSpec major = make_spec(0, train, eval, g, labels, kDomainShift);
    DatasetSpec minor = make_spec(1, data.shots, eval, g, labels, -kDomainShift);
    // The minority domain permutes the class prototypes, so what the large
    // dataset teaches about a region of feature space is wrong there.
    for (std::size_t i = 0; i < minor.classes.size(); ++i) {
      minor.classes[i].mean = g.prototypes[(i + 1) % minor.classes.size()];
    }
    return {major, minor};
  }
  throw ConfigError("unknown preset `" + preset + "`");
}

Mixture load_mixture(const RunConfig& config) {
  if (config.data.preset == "csv") {
    Mixture m;
    m.train = read_tokens_csv(config.data.train_csv);
    m.eval = config.data.eval_csv.empty() ? m.train : read_tokens_csv(config.data.eval_csv);
    return m;
  }
  const auto specs = preset_specs(config.data.preset, config.model.dim, config.data);
  return generate_mixture(specs, config.data.seed);
}

std::string tokens_to_csv(const TokenBatch& batch) {
  batch.validate();
  std::ostringstream out;
  out << "dataset_id,foreground,label";
  for (std::size_t d = 0; d < batch.dim(); ++d) out << ",f" << d;
  out << '\n';
  for (std::size_t t = 0; t < batch.size(); ++t) {
    out << batch.dataset_ids[t] << ',' << (batch.foreground[t] ? 1 : 0) << ',';
    if (batch.labels[t]) out << *batch.labels[t];
    for (double v : batch.features.row(t)) out << ',' << format_double(v);
    out << '\n';
  }
  return out.str();
}

TokenBatch tokens_from_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("token CSV is empty", 1);
  const auto header = split(trim(line), ',');
  if (header.size() < 4 || header[0] != "dataset_id" || header[1] != "foreground" ||
      header[2] != "label") {
    throw ConfigError("token CSV header must be dataset_id,foreground,label,f0..", 1);
  }
  const std::size_t dim = header.size() - 3;
  for (std::size_t d = 0; d < dim; ++d) {
    if (header[3 + d] != "f" + std::to_string(d)) throw ConfigError("bad feature column name", 1);
  }
  TokenBatch batch;
  std::vector<double> features;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split(trim(line), ',');
    if (cells.size() != dim + 3) throw ConfigError("expected " + std::to_string(dim + 3) + " cells", line_no);
    long long id = 0, fg = 0, label = 0;
    if (!parse_long(cells[0], id)) throw ConfigError("bad dataset_id", line_no);
    if (!parse_long(cells[1], fg) || (fg != 0 && fg != 1)) throw ConfigError("bad foreground flag", line_no);
    std::optional<int> lab;
    if (!cells[2].empty()) {
      if (!parse_long(cells[2], label) || label < 0) throw ConfigError("bad label", line_no);
      lab = static_cast<int>(label);
    }
    if ((fg == 1) != lab.has_value()) {
      throw ConfigError("label must be present exactly for foreground tokens", line_no);
    }
    for (std::size_t d = 0; d < dim; ++d) {
      const std::string& cell = cells[3 + d];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw ConfigError("bad feature value `" + cell + "`", line_no);
      }
      features.push_back(v);
    }
    batch.dataset_ids.push_back(static_cast<int>(id));
    batch.foreground.push_back(fg == 1);
    batch.labels.push_back(lab);
  }
  batch.features = Matrix(batch.dataset_ids.size(), dim, std::move(features));
  return batch;
}

void write_tokens_csv(const std::string& path, const TokenBatch& batch) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write `" + path + "`");
  out << tokens_to_csv(batch);
}

TokenBatch read_tokens_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read token file `" + path + "`");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return tokens_from_csv(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace damex
