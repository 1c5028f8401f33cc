#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dm1/config.hpp"
#include "dm1/flow.hpp"
#include "dm1/metrics.hpp"
#include "dm1/objective.hpp"
#include "dm1/toy_data.hpp"
#include "dm1/velocity_net.hpp"

namespace dm1::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitDivergence = 3;

inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kResolvedConfigFile = "config.txt";

// Worker count: hardware concurrency, capped by DM1_THREADS when set.
inline std::size_t thread_cap() {
  std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DM1_THREADS")) {
    const std::string s(env);
    std::size_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size() || v == 0)
      throw FormatError("DM1_THREADS must be a positive integer", "DM1_THREADS");
    n = std::min(n, v);
  }
  return n;
}

// Evaluates a field over contiguous row blocks on up to `threads` workers.
// Rows are computed independently, so the result is bit-identical to the
// single-threaded evaluation.
template <VelocityField F>
class RowParallelField {
 public:
  RowParallelField(const F& field, std::size_t threads) : field_(&field), threads_(std::max<std::size_t>(1, threads)) {}

  Tensor velocity(const Tensor& z, const Tensor& r, const Tensor& t, const Tensor& obs) const {
    const std::size_t B = z.rows();
    const std::size_t workers = std::min(threads_, B);
    if (workers <= 1) return field_->velocity(z, r, t, obs);
    std::vector<Tensor> parts(workers);
    std::vector<std::thread> pool;
    const std::size_t chunk = (B + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t lo = w * chunk, hi = std::min(B, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([&, w, lo, hi] {
        parts[w] = field_->velocity(rows(z, lo, hi), rows(r, lo, hi), rows(t, lo, hi), rows(obs, lo, hi));
      });
    }
    for (auto& th : pool) th.join();
    Tensor out = Tensor::matrix(B, z.cols());
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
      off += p.size();
    }
    return out;
  }

 private:
  static Tensor rows(const Tensor& x, std::size_t lo, std::size_t hi) {
    const std::size_t C = x.cols();
    return Tensor::matrix(hi - lo, C,
                          std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(lo * C),
                                              x.data().begin() + static_cast<std::ptrdiff_t>(hi * C)));
  }

  const F* field_;
  std::size_t threads_;
};

namespace detail {

inline std::vector<double> parse_reals(const std::string& csv, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(dm1::detail::parse_number<double>(what, dm1::detail::trim(item)));
  if (out.empty()) throw FormatError(what + " needs at least one value", what);
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << text;
  if (!out) throw Error("write failed: " + path);
}

inline void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
  } else {
    write_text(path, text);
  }
}

inline std::string samples_csv(const Tensor& s) {
  std::string csv = "sample";
  for (std::size_t j = 0; j < s.cols(); ++j) csv += ",a_" + std::to_string(j);
  csv += "\n";
  for (std::size_t i = 0; i < s.rows(); ++i) {
    csv += std::to_string(i);
    for (std::size_t j = 0; j < s.cols(); ++j) csv += "," + dm1::detail::real_str(s.at(i, j));
    csv += "\n";
  }
  return csv;
}

inline std::string metrics_csv(const std::vector<StepRecord>& log) {
  using dm1::detail::real_str;
  std::string csv = metrics_csv_header() + "\n";
  for (const StepRecord& r : log) {
    csv += std::to_string(r.step) + "," + real_str(r.loss.mf_loss) + "," + real_str(r.loss.disp_T) + "," +
           real_str(r.loss.disp_R) + "," + real_str(r.loss.disp_Cond) + "," + real_str(r.loss.total) + "," +
           real_str(r.wall_ms) + "\n";
  }
  return csv;
}

inline Tensor obs_batch(const std::vector<double>& row, std::size_t n, std::size_t D_o) {
  if (row.size() != D_o)
    throw FormatError("--obs has " + std::to_string(row.size()) + " values, network expects " + std::to_string(D_o),
                      "obs");
  Tensor obs = Tensor::matrix(n, D_o);
  for (std::size_t i = 0; i < n; ++i) std::copy(row.begin(), row.end(), obs.data().begin() + i * D_o);
  return obs;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Report JSON. Deterministic content and timing live under separate keys.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const DispersionReport& r) {
  nlohmann::ordered_json layers = nlohmann::ordered_json::object();
  for (const LayerDispersion& l : r.layers) {
    layers[std::string(to_string(l.tag))] = {
        {"mean_pairwise_distance", l.mean_pairwise_distance},
        {"mean_pairwise_cosine", l.mean_pairwise_cosine},
        {"covariance_trace", l.covariance_trace},
        {"covariance_offdiag_frobenius", l.covariance_offdiag_frobenius},
    };
  }
  return {{"n_probe", r.n_probe}, {"layers", layers}};
}

inline std::string to_csv(const DispersionReport& r) {
  using dm1::detail::real_str;
  std::string csv = "layer,mean_pairwise_distance,mean_pairwise_cosine,covariance_trace,covariance_offdiag_frobenius\n";
  for (const LayerDispersion& l : r.layers) {
    csv += std::string(to_string(l.tag)) + "," + real_str(l.mean_pairwise_distance) + "," +
           real_str(l.mean_pairwise_cosine) + "," + real_str(l.covariance_trace) + "," +
           real_str(l.covariance_offdiag_frobenius) + "\n";
  }
  return csv;
}

inline nlohmann::ordered_json to_json(const std::vector<EfficiencyReport>& reps) {
  nlohmann::ordered_json samplers = nlohmann::ordered_json::array(), timing = nlohmann::ordered_json::array();
  for (const auto& r : reps) {
    samplers.push_back({{"method", r.method}, {"nfe", r.nfe}, {"samples", r.samples}});
    timing.push_back({{"method", r.method}, {"wall_ms_per_sample", r.wall_ms_per_sample}});
  }
  return {{"samplers", samplers}, {"timing", timing}};
}

inline std::string to_csv(const std::vector<EfficiencyReport>& reps) {
  std::string csv = "method,nfe,samples,wall_ms_per_sample\n";
  for (const auto& r : reps) {
    csv += r.method + "," + std::to_string(r.nfe) + "," + std::to_string(r.samples) + "," +
           dm1::detail::real_str(r.wall_ms_per_sample) + "\n";
  }
  return csv;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string spec_path;
  std::string out_path;
  std::optional<std::uint64_t> seed;
};

inline int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  RunConfig cfg = load_config(a.spec_path);
  if (a.seed) cfg.seed = *a.seed;
  const ToyTaskSpec spec = cfg.resolved_task();
  const Dataset ds = generate(spec);
  save_dataset(ds, a.out_path);
  out << "wrote " << ds.size() << " samples to " << a.out_path << " checksum=" << ds.checksum() << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config_path;
  std::string data_path;
  std::string out_dir;
  std::optional<double> alpha_disp;
  std::optional<std::string> variant;
  std::optional<double> rho;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> log_every;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::vector<std::string> overrides;  // key=value
};

inline RunConfig resolve_train_config(const TrainArgs& a) {
  RunConfig cfg = a.config_path.empty() ? RunConfig{} : load_config(a.config_path);
  for (const std::string& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw FormatError("--set expects key=value, got '" + kv + "'", kv);
    set_config_value(cfg, dm1::detail::trim(std::string_view(kv).substr(0, eq)),
                     dm1::detail::trim(std::string_view(kv).substr(eq + 1)));
  }
  if (a.alpha_disp) set_config_value(cfg, "disp.alpha_disp", dm1::detail::real_str(*a.alpha_disp));
  if (a.variant) set_config_value(cfg, "disp.variant", *a.variant);
  if (a.rho) set_config_value(cfg, "time.rho", dm1::detail::real_str(*a.rho));
  if (a.steps) cfg.train.steps = *a.steps;
  if (a.log_every) cfg.train.log_every = *a.log_every;
  if (a.seed) cfg.seed = *a.seed;
  if (a.mode) set_config_value(cfg, "train.mode", *a.mode);
  if (!a.data_path.empty()) cfg.data_path = a.data_path;
  if (!a.out_dir.empty()) cfg.output_dir = a.out_dir;
  cfg.validate();
  return cfg;
}

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  const RunConfig cfg = resolve_train_config(a);
  const Dataset data = cfg.data_path.empty() ? generate(cfg.resolved_task()) : load_dataset(cfg.data_path);
  const NetDims dims = cfg.net_dims();
  if (data.actions.cols() != dims.action_size() || data.observations.cols() != dims.D_o)
    throw FormatError("dataset shape does not match task.* dimensions", "data.path");
  VelocityNet net = VelocityNet::init(cfg.resolved_init_seed(), dims);
  std::filesystem::create_directories(cfg.output_dir);
  const std::filesystem::path dir(cfg.output_dir);
  TrainResult res = train(std::move(net), data, cfg.resolved_train());
  save_checkpoint(res.net, (dir / kCheckpointFile).string());
  detail::write_text((dir / kMetricsFile).string(), detail::metrics_csv(res.log));
  detail::write_text((dir / kResolvedConfigFile).string(), to_config_text(cfg));
  const LossBreakdown& last = res.log.back().loss;
  out << "trained " << res.log.back().step + 1 << " steps, final mf_loss=" << last.mf_loss << " total=" << last.total
      << "\ncheckpoint " << (dir / kCheckpointFile).string() << " checksum=" << res.net.checksum() << "\n";
  return kExitOk;
}

struct SampleArgs {
  std::string checkpoint;
  std::size_t steps = 1;
  std::optional<std::size_t> euler;
  std::size_t n = 1;
  std::uint64_t seed = 0;
  std::string obs;
  std::string out_path;
  double a_min = -2.0;
  double a_max = 2.0;
  bool no_clip = false;
};

inline int cmd_sample(const SampleArgs& a, std::ostream& out, std::ostream& log) {
  const VelocityNet net = load_checkpoint(a.checkpoint);
  if (a.n == 0) throw FormatError("--n must be positive", "n");
  const Tensor obs = detail::obs_batch(detail::parse_reals(a.obs, "obs"), a.n, net.dims().D_o);
  std::optional<ActionBounds> bounds;
  if (!a.no_clip) bounds = ActionBounds::uniform(net.dims().D_a, a.a_min, a.a_max);
  const SamplerSpec spec = a.euler ? SamplerSpec{SamplerKind::Euler, *a.euler} : SamplerSpec{SamplerKind::MeanFlow, a.steps};
  RowParallelField parallel(net, thread_cap());
  CountingField counter(parallel);
  const Tensor s = run_sampler(counter, spec, obs, net.dims().action_size(), a.seed, bounds);
  detail::emit(a.out_path, detail::samples_csv(s), out);
  log << "sampler=" << spec.name() << " samples=" << s.rows() << " nfe=" << counter.rows()
      << " nfe_per_sample=" << counter.calls() << "\n";
  return kExitOk;
}

struct BenchArgs {
  std::string checkpoint;
  std::size_t n = 100;
  std::string samplers = "MF-1,MF-5,Euler-32,Euler-128";
  std::string obs;
  std::uint64_t seed = 0;
  std::size_t repeats = 3;
  std::string out_path;
  std::string csv_path;
};

inline int cmd_bench(const BenchArgs& a, std::ostream& out) {
  const VelocityNet net = load_checkpoint(a.checkpoint);
  std::vector<SamplerSpec> specs;
  std::stringstream ss(a.samplers);
  std::string item;
  while (std::getline(ss, item, ',')) specs.push_back(parse_sampler(std::string(dm1::detail::trim(item))));
  if (specs.empty()) throw FormatError("--samplers is empty", "samplers");
  const std::vector<double> obs_row =
      a.obs.empty() ? std::vector<double>(net.dims().D_o, 0.0) : detail::parse_reals(a.obs, "obs");
  const Tensor obs = Tensor::row(obs_row);
  if (obs.size() != net.dims().D_o) throw FormatError("--obs width does not match the network", "obs");
  const auto reps = bench(net, specs, obs, a.n, a.seed, a.repeats);
  detail::emit(a.out_path, to_json(reps).dump(2) + "\n", out);
  if (!a.csv_path.empty()) detail::write_text(a.csv_path, to_csv(reps));
  return kExitOk;
}

struct CollapseArgs {
  std::string checkpoint;
  std::string data_path;
  std::string config_path;
  std::size_t n_probe = 16;
  std::uint64_t seed = 0;
  std::string out_path;
  std::string csv_path;
};

inline int cmd_collapse_report(const CollapseArgs& a, std::ostream& out) {
  const VelocityNet net = load_checkpoint(a.checkpoint);
  Dataset data;
  if (!a.data_path.empty()) {
    data = load_dataset(a.data_path);
  } else {
    const RunConfig cfg = a.config_path.empty() ? RunConfig{} : load_config(a.config_path);
    data = generate(cfg.resolved_task());
  }
  if (data.observations.cols() != net.dims().D_o) throw FormatError("dataset D_o does not match the network", "data");
  const DispersionReport rep = collapse_report(net, data, a.n_probe, a.seed);
  detail::emit(a.out_path, to_json(rep).dump(2) + "\n", out);
  if (!a.csv_path.empty()) detail::write_text(a.csv_path, to_csv(rep));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

// argv[0] is the program name. Exit codes: 0 ok, 2 input error (bad flags,
// config, files), 3 training divergence.
inline int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"dm1: one-step action generation with average-velocity flows"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate a toy dataset from a task spec");
  g->add_option("--spec", gen.spec_path, "key=value file with task.* keys")->required();
  g->add_option("--out", gen.out_path, "dataset file to write")->required();
  g->add_option("--seed", gen.seed, "root seed (task.seed derives from it unless set)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a velocity network");
  t->add_option("--config", tr.config_path, "key=value run config");
  t->add_option("--data", tr.data_path, "dataset file (default: generate from task.*)");
  t->add_option("--out-dir", tr.out_dir, "output directory (default: train.output_dir)");
  t->add_option("--alpha-disp", tr.alpha_disp, "dispersive weight");
  t->add_option("--variant", tr.variant, "infonce_l2 | infonce_cos | hinge | covariance");
  t->add_option("--rho", tr.rho, "fraction of pairs with r = t");
  t->add_option("--steps", tr.steps, "optimizer steps");
  t->add_option("--steps-log-every", tr.log_every, "metrics CSV stride");
  t->add_option("--seed", tr.seed, "root seed");
  t->add_option("--mode", tr.mode, "meanflow | rectified");
  t->add_option("--set", tr.overrides, "extra key=value overrides")->take_all();

  SampleArgs sa;
  auto* s = app.add_subcommand("sample", "draw actions from a checkpoint");
  s->add_option("--checkpoint", sa.checkpoint)->required();
  auto* steps_opt = s->add_option("--steps", sa.steps, "average-velocity steps (default 1)");
  auto* euler_opt = s->add_option("--euler", sa.euler, "Euler steps on the instantaneous field instead");
  steps_opt->excludes(euler_opt);
  s->add_option("--n", sa.n, "number of samples");
  s->add_option("--seed", sa.seed, "noise seed");
  s->add_option("--obs", sa.obs, "observation, comma separated")->required();
  s->add_option("--out", sa.out_path, "CSV path (default stdout)");
  s->add_option("--a-min", sa.a_min);
  s->add_option("--a-max", sa.a_max);
  s->add_flag("--no-clip", sa.no_clip);

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "time samplers and count network evaluations");
  b->add_option("--checkpoint", be.checkpoint)->required();
  b->add_option("--n", be.n, "samples per sampler");
  b->add_option("--samplers", be.samplers, "comma list of MF-<k> / Euler-<K>");
  b->add_option("--obs", be.obs, "observation, comma separated (default zeros)");
  b->add_option("--seed", be.seed);
  b->add_option("--repeats", be.repeats, "timed repetitions; the fastest is kept");
  b->add_option("--out", be.out_path, "JSON path (default stdout)");
  b->add_option("--csv", be.csv_path, "optional CSV path");

  CollapseArgs co;
  auto* c = app.add_subcommand("collapse-report", "per-layer embedding dispersion statistics");
  c->add_option("--checkpoint", co.checkpoint)->required();
  c->add_option("--data", co.data_path, "dataset supplying probe observations");
  c->add_option("--config", co.config_path, "config whose task.* generates the dataset when --data is absent");
  c->add_option("--n-probe", co.n_probe);
  c->add_option("--seed", co.seed);
  c->add_option("--out", co.out_path, "JSON path (default stdout)");
  c->add_option("--csv", co.csv_path, "optional CSV path");

  std::vector<const char*> raw;
  for (const std::string& a : argv) raw.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(raw.size()), raw.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitInput;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (s->parsed()) return cmd_sample(sa, out, err);
    if (b->parsed()) return cmd_bench(be, out);
    if (c->parsed()) return cmd_collapse_report(co, out);
  } catch (const DivergenceError& e) {
    err << "error: training diverged at step " << e.step() << "\n";
    return kExitDivergence;
  } catch (const FormatError& e) {
    err << "error: " << e.what();
    if (!e.key().empty()) err << " [key: " << e.key() << "]";
    err << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}

}  // namespace dm1::cli
