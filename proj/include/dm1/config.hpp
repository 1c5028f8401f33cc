#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "dm1/metrics.hpp"
#include "dm1/objective.hpp"
#include "dm1/toy_data.hpp"
#include "dm1/velocity_net.hpp"

namespace dm1 {

// Everything one run needs. Text form is flat `key = value` lines; '#'
// starts a comment; keys carry a section prefix (task., net., opt., time.,
// disp., train.) except the root `seed`. Unset seeds derive from the root:
// task.seed from label "data", network init from "init".
struct RunConfig {
  std::uint64_t seed = 0;
  ToyTaskSpec task;
  bool task_seed_set = false;
  std::string data_path;  // optional dataset file; generated from `task` when empty
  std::size_t d_emb = 32;
  std::size_t width = 128;
  std::size_t depth = 3;
  TrainConfig train;
  std::string output_dir = ".";
  std::optional<std::uint64_t> init_seed;
  double a_min = -2.0;
  double a_max = 2.0;
  bool clip = true;

  NetDims net_dims() const { return {task.T_a, task.D_a, task.D_o, d_emb, width, depth}; }

  ToyTaskSpec resolved_task() const {
    ToyTaskSpec t = task;
    if (!task_seed_set) t.seed = derive_seed(seed, "data");
    return t;
  }

  std::uint64_t resolved_init_seed() const { return init_seed ? *init_seed : derive_seed(seed, "init"); }

  ActionBounds bounds() const { return ActionBounds::uniform(task.D_a, a_min, a_max); }

  TrainConfig resolved_train() const {
    TrainConfig c = train;
    c.seed = seed;
    c.bounds = clip ? std::optional<ActionBounds>(bounds()) : std::nullopt;
    return c;
  }

  void validate() const {
    task.validate();
    if (d_emb == 0 || d_emb % 2 != 0) throw FormatError("net.d_emb must be even and positive", "net.d_emb");
    if (width == 0) throw FormatError("net.width must be positive", "net.width");
    if (depth == 0) throw FormatError("net.depth must be positive", "net.depth");
    if (!(a_min < a_max)) throw FormatError("train.a_min must be below train.a_max", "train.a_min");
    if (!data_path.empty() && !std::filesystem::exists(data_path))
      throw FormatError("dataset file does not exist: " + data_path, "data.path");
    train.validate();
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class N>
N parse_number(std::string_view key, std::string_view v) {
  N out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
    throw FormatError("invalid value '" + std::string(v) + "' for " + std::string(key), std::string(key));
  if constexpr (std::is_floating_point_v<N>) {
    if (!std::isfinite(out)) throw FormatError("non-finite value for " + std::string(key), std::string(key));
  }
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw FormatError("expected true/false for " + std::string(key), std::string(key));
}

// Rethrows library validation errors as FormatError naming `key`.
template <class F>
auto keyed(std::string_view key, F&& f) {
  try {
    return f();
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(std::string(key) + ": " + e.what(), std::string(key));
  }
}

// Shortest text that parses back to the same double.
inline std::string real_str(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

using Setter = std::function<void(RunConfig&, std::string_view key, std::string_view value)>;

inline const std::map<std::string, Setter, std::less<>>& config_setters() {
  using std::size_t;
  auto sz = [](size_t RunConfig::*m) {
    return Setter([m](RunConfig& c, std::string_view k, std::string_view v) { c.*m = parse_number<size_t>(k, v); });
  };
  auto task_sz = [](size_t ToyTaskSpec::*m) {
    return Setter([m](RunConfig& c, std::string_view k, std::string_view v) { c.task.*m = parse_number<size_t>(k, v); });
  };
  auto task_real = [](double ToyTaskSpec::*m) {
    return Setter([m](RunConfig& c, std::string_view k, std::string_view v) { c.task.*m = parse_number<double>(k, v); });
  };
  auto opt_real = [](double AdamConfig::*m) {
    return Setter([m](RunConfig& c, std::string_view k, std::string_view v) { c.train.opt.*m = parse_number<double>(k, v); });
  };
  auto time_real = [](double TimePairConfig::*m) {
    return Setter([m](RunConfig& c, std::string_view k, std::string_view v) { c.train.time.*m = parse_number<double>(k, v); });
  };
  auto disp_real = [](double DispersiveConfig::*m) {
    return Setter([m](RunConfig& c, std::string_view k, std::string_view v) {
      c.train.objective.disp.*m = parse_number<double>(k, v);
    });
  };
  auto train_sz = [](size_t TrainConfig::*m) {
    return Setter([m](RunConfig& c, std::string_view k, std::string_view v) { c.train.*m = parse_number<size_t>(k, v); });
  };

  static const std::map<std::string, Setter, std::less<>> table{
      {"seed", [](RunConfig& c, std::string_view k, std::string_view v) { c.seed = parse_number<std::uint64_t>(k, v); }},
      {"task.name", [](RunConfig& c, std::string_view, std::string_view v) { c.task.name = std::string(v); }},
      {"task.D_o", task_sz(&ToyTaskSpec::D_o)},
      {"task.T_a", task_sz(&ToyTaskSpec::T_a)},
      {"task.D_a", task_sz(&ToyTaskSpec::D_a)},
      {"task.modes_per_obs", task_sz(&ToyTaskSpec::modes_per_obs)},
      {"task.n_buckets", task_sz(&ToyTaskSpec::n_buckets)},
      {"task.n_samples", task_sz(&ToyTaskSpec::n_samples)},
      {"task.mode_separation", task_real(&ToyTaskSpec::mode_separation)},
      {"task.noise_std", task_real(&ToyTaskSpec::noise_std)},
      {"task.seed",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.task.seed = parse_number<std::uint64_t>(k, v);
         c.task_seed_set = true;
       }},
      {"data.path", [](RunConfig& c, std::string_view, std::string_view v) { c.data_path = std::string(v); }},
      {"net.d_emb", sz(&RunConfig::d_emb)},
      {"net.width", sz(&RunConfig::width)},
      {"net.depth", sz(&RunConfig::depth)},
      {"net.init_seed",
       [](RunConfig& c, std::string_view k, std::string_view v) { c.init_seed = parse_number<std::uint64_t>(k, v); }},
      {"opt.lr", opt_real(&AdamConfig::lr)},
      {"opt.beta1", opt_real(&AdamConfig::beta1)},
      {"opt.beta2", opt_real(&AdamConfig::beta2)},
      {"opt.eps", opt_real(&AdamConfig::eps)},
      {"opt.cosine_decay",
       [](RunConfig& c, std::string_view k, std::string_view v) { c.train.opt.cosine_decay = parse_bool(k, v); }},
      {"time.mu", time_real(&TimePairConfig::mu)},
      {"time.sigma", time_real(&TimePairConfig::sigma)},
      {"time.rho", time_real(&TimePairConfig::rho)},
      {"disp.variant",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.train.objective.disp.variant = keyed(k, [&] { return parse_variant(v); });
       }},
      {"disp.cosine_form",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         if (v == "dispersive") c.train.objective.disp.cosine_form = CosineForm::Dispersive;
         else if (v == "literal") c.train.objective.disp.cosine_form = CosineForm::Literal;
         else throw FormatError("disp.cosine_form must be dispersive or literal", std::string(k));
       }},
      {"disp.tau", disp_real(&DispersiveConfig::tau)},
      {"disp.delta", disp_real(&DispersiveConfig::delta)},
      {"disp.lambda_cov", disp_real(&DispersiveConfig::lambda_cov)},
      {"disp.sigma_min", disp_real(&DispersiveConfig::sigma_min)},
      {"disp.alpha_disp", disp_real(&DispersiveConfig::alpha_disp)},
      {"train.epochs", train_sz(&TrainConfig::epochs)},
      {"train.steps", train_sz(&TrainConfig::steps)},
      {"train.batch_size", train_sz(&TrainConfig::batch_size)},
      {"train.log_every", train_sz(&TrainConfig::log_every)},
      {"train.mode",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.train.objective.mode = keyed(k, [&] { return parse_mode(v); });
       }},
      {"train.anchor",
       [](RunConfig& c, std::string_view k, std::string_view v) {
         c.train.objective.anchor = keyed(k, [&] { return parse_anchor(v); });
       }},
      {"train.output_dir", [](RunConfig& c, std::string_view, std::string_view v) { c.output_dir = std::string(v); }},
      {"train.a_min", [](RunConfig& c, std::string_view k, std::string_view v) { c.a_min = parse_number<double>(k, v); }},
      {"train.a_max", [](RunConfig& c, std::string_view k, std::string_view v) { c.a_max = parse_number<double>(k, v); }},
      {"train.clip", [](RunConfig& c, std::string_view k, std::string_view v) { c.clip = parse_bool(k, v); }},
  };
  return table;
}

}  // namespace detail

// Applies one assignment; unknown keys and bad values throw FormatError
// carrying the key.
inline void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  const auto& table = detail::config_setters();
  const auto it = table.find(key);
  if (it == table.end()) throw FormatError("unknown config key '" + std::string(key) + "'", std::string(key));
  if (value.empty()) throw FormatError("empty value for " + std::string(key), std::string(key));
  it->second(cfg, key, value);
}

// Parses `key = value` text on top of `base`. Does not validate.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      const std::string key(detail::trim(line));
      throw FormatError("line " + std::to_string(line_no) + ": expected key = value for '" + key + "'", key);
    }
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// Round-trippable text form of every key.
inline std::string to_config_text(const RunConfig& c) {
  std::ostringstream o;
  const auto& d = c.train.objective.disp;
  o << "seed = " << c.seed << "\n"
    << "task.name = " << c.task.name << "\n"
    << "task.D_o = " << c.task.D_o << "\n"
    << "task.T_a = " << c.task.T_a << "\n"
    << "task.D_a = " << c.task.D_a << "\n"
    << "task.modes_per_obs = " << c.task.modes_per_obs << "\n"
    << "task.n_buckets = " << c.task.n_buckets << "\n"
    << "task.n_samples = " << c.task.n_samples << "\n"
    << "task.mode_separation = " << detail::real_str(c.task.mode_separation) << "\n"
    << "task.noise_std = " << detail::real_str(c.task.noise_std) << "\n";
  if (c.task_seed_set) o << "task.seed = " << c.task.seed << "\n";
  if (!c.data_path.empty()) o << "data.path = " << c.data_path << "\n";
  o << "net.d_emb = " << c.d_emb << "\n"
    << "net.width = " << c.width << "\n"
    << "net.depth = " << c.depth << "\n";
  if (c.init_seed) o << "net.init_seed = " << *c.init_seed << "\n";
  o << "opt.lr = " << detail::real_str(c.train.opt.lr) << "\n"
    << "opt.beta1 = " << detail::real_str(c.train.opt.beta1) << "\n"
    << "opt.beta2 = " << detail::real_str(c.train.opt.beta2) << "\n"
    << "opt.eps = " << detail::real_str(c.train.opt.eps) << "\n"
    << "opt.cosine_decay = " << (c.train.opt.cosine_decay ? "true" : "false") << "\n"
    << "time.mu = " << detail::real_str(c.train.time.mu) << "\n"
    << "time.sigma = " << detail::real_str(c.train.time.sigma) << "\n"
    << "time.rho = " << detail::real_str(c.train.time.rho) << "\n"
    << "disp.variant = " << to_string(d.variant) << "\n"
    << "disp.cosine_form = " << (d.cosine_form == CosineForm::Dispersive ? "dispersive" : "literal") << "\n"
    << "disp.tau = " << detail::real_str(d.tau) << "\n"
    << "disp.delta = " << detail::real_str(d.delta) << "\n"
    << "disp.lambda_cov = " << detail::real_str(d.lambda_cov) << "\n"
    << "disp.sigma_min = " << detail::real_str(d.sigma_min) << "\n"
    << "disp.alpha_disp = " << detail::real_str(d.alpha_disp) << "\n"
    << "train.epochs = " << c.train.epochs << "\n"
    << "train.steps = " << c.train.steps << "\n"
    << "train.batch_size = " << c.train.batch_size << "\n"
    << "train.log_every = " << c.train.log_every << "\n"
    << "train.mode = " << to_string(c.train.objective.mode) << "\n"
    << "train.anchor = " << to_string(c.train.objective.anchor) << "\n"
    << "train.output_dir = " << c.output_dir << "\n"
    << "train.a_min = " << detail::real_str(c.a_min) << "\n"
    << "train.a_max = " << detail::real_str(c.a_max) << "\n"
    << "train.clip = " << (c.clip ? "true" : "false") << "\n";
  return o.str();
}

}  // namespace dm1
