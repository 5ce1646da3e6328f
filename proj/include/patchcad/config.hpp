#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "patchcad/error.hpp"

namespace patchcad {

// Effective configuration of every stage, serialized (sorted keys) into every
// artifact the tools write.
struct Config {
  // contrastive embedding
  double tau = 0.15;
  double c = 24.0;
  std::uint32_t embed_dim = 32;
  std::uint32_t hidden_dim = 64;
  std::uint32_t patch_resample = 16;
  std::uint32_t negatives_pool = 4096;
  std::uint32_t negatives_keep = 1024;
  double learning_rate = 0.5;
  std::uint32_t epochs = 200;
  std::uint32_t batch_size = 256;
  std::uint32_t train_views_per_shape = 8;
  std::uint32_t anchors_per_view = 9;

  // patch oracle
  double theta_p = 0.4;
  double theta_n = 0.6;
  double patch_fraction = 1.0 / 3.0;
  std::uint32_t hist_bins = 16;
  std::uint32_t descriptor_max_samples = 64;
  double min_coverage = 0.10;

  // views and rendering
  std::uint32_t num_views = 16;
  std::uint32_t view_candidates = 256;
  std::uint32_t kmedoids_max_iters = 50;
  std::uint32_t render_resolution = 96;
  std::array<double, 3> light_dir{0.2672612419124244, 0.5345224838248488, 0.8017837257372732};
  double noise_sigma = 0.02;

  // retrieval
  std::uint32_t patches_per_view = 8;
  std::uint32_t kq = 9;
  std::uint32_t kr = 24;

  // pose
  std::uint32_t pose_bins = 16;
  double huber_delta = 1.0;
  double pose_learning_rate = 0.05;
  std::uint32_t pose_epochs = 300;
  std::uint32_t pose_views_per_shape = 48;

  // evaluation
  double fscore_threshold = 0.05;
  std::uint32_t fscore_samples = 10000;

  std::uint64_t seed = 0;

  bool operator==(const Config&) const = default;
};

namespace detail {

template <typename Fn>
void visit_config(Config& c, Fn&& fn) {
  fn("anchors_per_view", c.anchors_per_view);
  fn("batch_size", c.batch_size);
  fn("c", c.c);
  fn("descriptor_max_samples", c.descriptor_max_samples);
  fn("embed_dim", c.embed_dim);
  fn("epochs", c.epochs);
  fn("fscore_samples", c.fscore_samples);
  fn("fscore_threshold", c.fscore_threshold);
  fn("hidden_dim", c.hidden_dim);
  fn("hist_bins", c.hist_bins);
  fn("huber_delta", c.huber_delta);
  fn("kmedoids_max_iters", c.kmedoids_max_iters);
  fn("kq", c.kq);
  fn("kr", c.kr);
  fn("learning_rate", c.learning_rate);
  fn("light_dir", c.light_dir);
  fn("min_coverage", c.min_coverage);
  fn("negatives_keep", c.negatives_keep);
  fn("negatives_pool", c.negatives_pool);
  fn("noise_sigma", c.noise_sigma);
  fn("num_views", c.num_views);
  fn("patch_fraction", c.patch_fraction);
  fn("patch_resample", c.patch_resample);
  fn("patches_per_view", c.patches_per_view);
  fn("pose_bins", c.pose_bins);
  fn("pose_epochs", c.pose_epochs);
  fn("pose_learning_rate", c.pose_learning_rate);
  fn("pose_views_per_shape", c.pose_views_per_shape);
  fn("render_resolution", c.render_resolution);
  fn("seed", c.seed);
  fn("tau", c.tau);
  fn("theta_n", c.theta_n);
  fn("theta_p", c.theta_p);
  fn("train_views_per_shape", c.train_views_per_shape);
  fn("view_candidates", c.view_candidates);
}

}  // namespace detail

inline nlohmann::json config_to_json(const Config& config) {
  nlohmann::json j = nlohmann::json::object();
  Config copy = config;
  detail::visit_config(copy, [&](const char* key, auto& value) { j[key] = value; });
  return j;
}

// Returns one message per violated rule; each message starts with the key.
inline std::vector<std::string> validate(const Config& c) {
  std::vector<std::string> errors;
  auto require = [&](bool ok, const char* key, const char* rule) {
    if (!ok) errors.push_back(std::string(key) + ": " + rule);
  };
  require(c.tau > 0.0 && std::isfinite(c.tau), "tau", "must be > 0");
  require(c.c > 0.0 && std::isfinite(c.c), "c", "must be > 0");
  require(c.theta_p > 0.0, "theta_p", "must be > 0");
  require(c.theta_n <= 1.0, "theta_n", "must be <= 1");
  require(c.patch_fraction > 0.0 && c.patch_fraction <= 1.0, "patch_fraction", "must be in (0, 1]");
  require(c.min_coverage >= 0.0 && c.min_coverage <= 1.0, "min_coverage", "must be in [0, 1]");
  require(c.learning_rate >= 0.0, "learning_rate", "must be >= 0");
  require(c.pose_learning_rate >= 0.0, "pose_learning_rate", "must be >= 0");
  require(c.noise_sigma >= 0.0, "noise_sigma", "must be >= 0");
  require(c.huber_delta > 0.0, "huber_delta", "must be > 0");
  require(c.fscore_threshold > 0.0, "fscore_threshold", "must be > 0");
  require(c.negatives_keep <= c.negatives_pool, "negatives_keep", "must be <= negatives_pool");
  require(c.hist_bins >= 2, "hist_bins", "must be >= 2");
  require(c.pose_bins >= 2, "pose_bins", "must be >= 2");
  require(c.render_resolution >= 8, "render_resolution", "must be >= 8");
  require(c.num_views <= c.view_candidates, "num_views", "must be <= view_candidates");
  const double light_norm = std::sqrt(c.light_dir[0] * c.light_dir[0] +
                                      c.light_dir[1] * c.light_dir[1] +
                                      c.light_dir[2] * c.light_dir[2]);
  require(std::abs(light_norm - 1.0) <= 1e-6, "light_dir", "must be unit length");

  Config copy = c;
  detail::visit_config(copy, [&](const char* key, auto& value) {
    if constexpr (std::is_same_v<std::decay_t<decltype(value)>, std::uint32_t>) {
      if (value < 1) errors.push_back(std::string(key) + ": must be >= 1");
    }
  });
  return errors;
}

// Absent keys keep their defaults; unknown keys and wrong types are errors.
inline Config config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("config_invalid", "config must be a JSON object");
  Config config;
  std::vector<std::string> errors;
  std::vector<std::string> known;
  detail::visit_config(config, [&](const char* key, auto& value) {
    known.emplace_back(key);
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
      value = it->template get<std::decay_t<decltype(value)>>();
    } catch (const nlohmann::json::exception&) {
      errors.push_back(std::string(key) + ": wrong type");
    }
  });
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      errors.push_back(key + ": unknown key");
    }
  }
  for (auto& e : validate(config)) errors.push_back(std::move(e));
  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw Error("config_invalid", msg);
  }
  return config;
}

inline Config parse_config(const std::string& text) {
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return Config{};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("config_parse", std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("config_unreadable", "cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Canonical text form: sorted keys, two-space indent, trailing newline.
inline std::string dump_config(const Config& config) { return config_to_json(config).dump(2) + "\n"; }

inline void save_config(const Config& config, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io_error", "cannot write config file " + path);
  out << dump_config(config);
}

// --config wins over P2C_CONFIG; neither means defaults.
inline Config resolve_config(const std::string& explicit_path) {
  if (!explicit_path.empty()) return load_config(explicit_path);
  if (const char* env = std::getenv("P2C_CONFIG"); env != nullptr && *env != '\0') {
    return load_config(env);
  }
  return Config{};
}

}  // namespace patchcad
