// SPDX-License-Identifier: Apache-2.0
#include "damex/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>

#include "damex/config.hpp"
#include "damex/data.hpp"
#include "damex/error.hpp"
#include "damex/gradcheck_suite.hpp"
#include "damex/report.hpp"
#include "damex/train.hpp"

namespace damex {

namespace fs = std::filesystem;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write `" + path.string() + "`");
  out << text;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

struct TrainArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> random_mapping;
};

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  if (!fs::exists(args.config)) {
    err << "error: config file `" << args.config << "` does not exist\n";
    return kExitUsage;
  }
  RunConfig config = load_run_config(args.config);
  if (args.seed) config.train.seed = *args.seed;
  if (args.random_mapping) config.mapping = randomize_mapping(config.mapping, *args.random_mapping);
  std::error_code ec;
  fs::create_directories(args.out, ec);
  if (ec) throw ConfigError("cannot create output directory `" + args.out + "`");

  const Mixture data = load_mixture(config);
  write_file(fs::path(args.out) / "config.resolved", to_text(config));
  try {
    const TrainResult result = train(config, data, config.train.seed);
    save_checkpoint((fs::path(args.out) / "checkpoint.txt").string(), config, result.model);
    write_file(fs::path(args.out) / "metrics.csv", result.metrics.to_csv());
    const EvalRecord& last = result.metrics.evals.back();
    out << "trained " << config.train.steps << " steps\n";
    for (const auto& [d, acc] : last.accuracy) {
      out << "dataset " << d << " accuracy " << fixed(acc) << '\n';
    }
    if (!last.purity.empty()) out << "mean purity " << fixed(last.mean_purity()) << '\n';
    out << "max collapse " << fixed(last.max_collapse()) << '\n';
  } catch (const NumericalError& e) {
    const fs::path dump = fs::path(args.out) / "diagnostic_batch.csv";
    write_file(dump, e.diagnostic());
    err << "error: " << e.what() << " (batch written to " << dump.string() << ")\n";
    return kExitNumerical;
  }
  return kExitOk;
}

struct AnalyzeArgs {
  std::string checkpoint, data, heatmap_out, utilization_out;
};

int cmd_analyze(const AnalyzeArgs& args, bool write_outputs, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(args.checkpoint);
  const TokenBatch batch = read_tokens_csv(args.data);
  check_batch(batch, ckpt.config);
  const EvalRecord rec = evaluate(ckpt.model, batch, ckpt.config.mapping);

  for (const auto& [d, acc] : rec.accuracy) out << "dataset " << d << " accuracy " << fixed(acc) << '\n';
  for (std::size_t l = 0; l < rec.collapse.size(); ++l) {
    if (l < rec.purity.size()) {
      for (const auto& [d, v] : rec.purity[l]) {
        out << "layer " << l << " dataset " << d << " purity " << fixed(v) << '\n';
      }
    }
    out << "layer " << l << " collapse " << fixed(rec.collapse[l]) << '\n';
    out << "layer " << l << " drop_rate " << fixed(rec.drop_rate[l]) << '\n';
  }
  if (!write_outputs) return kExitOk;
  if (rec.utilization.empty()) throw ConfigError("checkpoint has no dataset mapping to analyze");

  std::string csv_path = args.utilization_out;
  if (csv_path.empty()) {
    csv_path = args.heatmap_out.empty()
                   ? (fs::path(args.checkpoint).parent_path() / "utilization.csv").string()
                   : fs::path(args.heatmap_out).replace_extension(".csv").string();
  }
  write_file(csv_path, utilization_csv(rec.utilization));
  out << "utilization written to " << csv_path << '\n';
  if (!args.heatmap_out.empty()) {
    if (fs::path(args.heatmap_out).extension() != ".svg") {
      throw ConfigError("--heatmap-out must end in .svg");
    }
    write_file(args.heatmap_out, utilization_svg(rec.utilization));
    out << "heatmap written to " << args.heatmap_out << '\n';
  }
  return kExitOk;
}

struct GradArgs {
  std::uint64_t seed = 0;
  double eps = 1e-5;
  std::size_t instances = 100;
  std::string corrupt;
};

int cmd_gradcheck(const GradArgs& args, std::ostream& out) {
  out << "gradcheck seed=" << args.seed << " eps=" << format_double(args.eps)
      << " instances=" << args.instances << " tolerance=1e-4\n";
  GradSuiteOptions opts;
  opts.seed = args.seed;
  opts.eps = args.eps;
  opts.instances = args.instances;
  opts.corrupt = args.corrupt;
  bool ok = true;
  for (const GradSuiteCheck& c : run_gradcheck_suite(opts)) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "max_rel_error=%.3e worst_instance=%zu analytic=%.6e numeric=%.6e",
                  c.max_relative_error, c.worst_instance, c.worst_analytic, c.worst_numeric);
    out << (c.passed ? "PASS " : "FAIL ") << c.name << ' ' << buf << '\n';
    ok = ok && c.passed;
  }
  return ok ? kExitOk : kExitVerificationFailed;
}

struct GenArgs {
  std::string preset, out;
  std::uint64_t seed = 0;
  std::size_t shots = 50;
  std::size_t dim = 16;
};

int cmd_gen_data(const GenArgs& args, std::ostream& out, std::ostream& err) {
  if (args.preset != "domains" && args.preset != "limited" && args.preset != "divergent") {
    err << "error: unknown preset `" << args.preset << "` (domains, limited, divergent)\n";
    return kExitUsage;
  }
  DataConfig data;
  data.preset = args.preset;
  data.seed = args.seed;
  data.shots = args.shots;
  const Mixture m = generate_mixture(preset_specs(args.preset, args.dim, data), args.seed);
  std::error_code ec;
  fs::create_directories(args.out, ec);
  if (ec) throw ConfigError("cannot create output directory `" + args.out + "`");
  write_tokens_csv((fs::path(args.out) / "train.csv").string(), m.train);
  write_tokens_csv((fs::path(args.out) / "eval.csv").string(), m.eval);
  out << "wrote " << m.train.size() << " training and " << m.eval.size() << " evaluation tokens to "
      << args.out << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dataset-aware mixture-of-experts routing: training and analysis"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a model from a run config");
  train->add_option("--config", train_args.config, "Run config file")->required();
  train->add_option("--out", train_args.out, "Output directory")->required();
  train->add_option("--seed", train_args.seed, "Overrides train.seed");
  train->add_option("--random-mapping", train_args.random_mapping,
                    "Replace the mapping by a random assignment drawn with this seed");

  AnalyzeArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Report accuracy, purity and collapse of a checkpoint");
  eval->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", eval_args.data, "Token CSV")->required();

  AnalyzeArgs analyze_args;
  auto* analyze = app.add_subcommand("analyze", "Write utilization matrices and heatmaps");
  analyze->add_option("--checkpoint", analyze_args.checkpoint, "Checkpoint file")->required();
  analyze->add_option("--data", analyze_args.data, "Token CSV")->required();
  analyze->add_option("--heatmap-out", analyze_args.heatmap_out, "SVG heatmap path");
  analyze->add_option("--utilization-out", analyze_args.utilization_out, "Utilization CSV path");

  GradArgs grad_args;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every loss");
  grad->add_option("--seed", grad_args.seed, "Base seed");
  grad->add_option("--eps", grad_args.eps, "Central-difference step")->check(CLI::Range(1e-7, 1e-3));
  grad->add_option("--instances", grad_args.instances, "Random instances per loss");
  grad->add_option("--corrupt", grad_args.corrupt, "Negative control: corrupt one check's gradient");

  GenArgs gen_args;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic mixture as token CSVs");
  gen->add_option("--preset", gen_args.preset, "domains, limited or divergent")->required();
  gen->add_option("--seed", gen_args.seed, "Data seed");
  gen->add_option("--out", gen_args.out, "Output directory")->required();
  gen->add_option("--shots", gen_args.shots, "Minority training tokens for `limited`");
  gen->add_option("--dim", gen_args.dim, "Feature dimension");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(train_args, out, err);
    if (*eval) return cmd_analyze(eval_args, false, out);
    if (*analyze) return cmd_analyze(analyze_args, true, out);
    if (*grad) return cmd_gradcheck(grad_args, out);
    if (*gen) return cmd_gen_data(gen_args, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const MappingError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  }
  return kExitUsage;
}

}  // namespace damex
