#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "remixse/corpus.hpp"
#include "remixse/distill.hpp"
#include "remixse/error.hpp"
#include "remixse/model.hpp"

namespace remixse {

/// Flat `section.key=value` settings. Later assignments win, so a file can be
/// loaded first and command-line values set on top.
class RunConfig {
 public:
  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "model.preset",      "model.depth",        "model.hidden",        "model.kernel",
        "model.stride",      "model.resample",     "train.epochs",        "train.batch_size",
        "train.length",      "train.lr",           "train.loss",          "train.snr_lo",
        "train.snr_hi",      "train.seed",         "train.strategy",      "train.tup",
        "train.gamma",       "train.augment_in_distill",                  "augment.shift",
        "augment.max_shift", "augment.remix",      "augment.bandmask",    "augment.bandmask_fraction",
        "synth.seed",        "synth.num",          "synth.duration",      "synth.sample_rate",
        "synth.snr_lo",      "synth.snr_hi",       "paths.noisy",         "paths.ext_noise",
        "paths.clean",       "paths.teacher",      "paths.out",           "paths.in",
        "paths.stages",      "paths.ref",          "paths.deg",           "paths.report",
        "paths.pesq_csv",    "paths.stats",        "eval.metrics",        "run.threads",
        "run.resample",
    };
    return keys;
  }

  static RunConfig parse(std::istream& in, const std::string& origin = "<config>") {
    RunConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      require(eq != std::string::npos, ErrorKind::ParseError,
              origin + ":" + std::to_string(lineno) + ": expected key=value");
      try {
        c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
      } catch (const Error& e) {
        throw Error(ErrorKind::ParseError, origin + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::MissingFile, "cannot open config " + path.string());
    return parse(in, path.string());
  }

  void set(const std::string& key, const std::string& value) {
    require(known_keys().count(key) > 0, ErrorKind::InvalidArgument, "unknown config key '" + key + "'");
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string str(const std::string& key, const std::string& fallback = {}) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  long long integer(const std::string& key, long long fallback) const {
    if (!has(key)) return fallback;
    const std::string v = str(key);
    std::size_t used = 0;
    long long r = 0;
    try {
      r = std::stoll(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == v.size() && !v.empty(), ErrorKind::InvalidArgument, key + ": '" + v + "' is not an integer");
    return r;
  }

  double real(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const std::string v = str(key);
    std::size_t used = 0;
    double r = 0.0;
    try {
      r = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == v.size() && !v.empty(), ErrorKind::InvalidArgument, key + ": '" + v + "' is not a number");
    return r;
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error(ErrorKind::InvalidArgument, key + ": '" + v + "' is not a boolean");
  }

  /// Sorted key=value lines, suitable for echoing next to outputs.
  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

inline ModelConfig model_config_from(const RunConfig& c) {
  const std::string preset = c.str("model.preset", "tiny");
  ModelConfig m;
  if (preset == "large") m = ModelConfig::large();
  else require(preset == "tiny", ErrorKind::InvalidArgument, "model.preset must be tiny or large");
  m.depth = static_cast<int>(c.integer("model.depth", m.depth));
  m.hidden = static_cast<int>(c.integer("model.hidden", m.hidden));
  m.kernel = static_cast<int>(c.integer("model.kernel", m.kernel));
  m.stride = static_cast<int>(c.integer("model.stride", m.stride));
  m.resample = static_cast<int>(c.integer("model.resample", m.resample));
  m.validate();
  return m;
}

inline TrainConfig train_config_from(const RunConfig& c, const TrainConfig& defaults = {}) {
  TrainConfig t = defaults;
  auto nonneg = [&](const std::string& key, long long fallback) {
    const long long v = c.integer(key, fallback);
    require(v >= 0, ErrorKind::InvalidArgument, key + " must be non-negative");
    return v;
  };
  t.epochs = static_cast<int>(c.integer("train.epochs", t.epochs));
  t.batch_size = static_cast<std::size_t>(nonneg("train.batch_size", static_cast<long long>(t.batch_size)));
  t.length = static_cast<std::size_t>(nonneg("train.length", static_cast<long long>(t.length)));
  t.learning_rate = c.real("train.lr", t.learning_rate);
  if (c.has("train.loss")) t.loss = parse_loss(c.str("train.loss"));
  t.snr_lo_db = c.real("train.snr_lo", t.snr_lo_db);
  t.snr_hi_db = c.real("train.snr_hi", t.snr_hi_db);
  t.seed = static_cast<std::uint64_t>(nonneg("train.seed", static_cast<long long>(t.seed)));
  if (c.has("train.strategy")) t.strategy = parse_strategy(c.str("train.strategy"));
  if (c.has("train.tup")) {
    const std::string tup = c.str("train.tup");
    if (tup == "static") t.tup = TeacherUpdateProtocol::static_teacher();
    else if (tup == "ema") t.tup = TeacherUpdateProtocol::ema(t.tup.gamma);
    else throw Error(ErrorKind::InvalidArgument, "train.tup must be static or ema");
  }
  t.tup.gamma = c.real("train.gamma", t.tup.gamma);
  require(t.tup.gamma > 0.0 && t.tup.gamma <= 1.0, ErrorKind::InvalidArgument, "train.gamma must be in (0, 1]");
  t.augment_in_distill = c.boolean("train.augment_in_distill", t.augment_in_distill);
  t.augment.shift = c.boolean("augment.shift", t.augment.shift);
  t.augment.max_shift_samples =
      static_cast<std::size_t>(nonneg("augment.max_shift", static_cast<long long>(t.augment.max_shift_samples)));
  t.augment.remix = c.boolean("augment.remix", t.augment.remix);
  t.augment.bandmask = c.boolean("augment.bandmask", t.augment.bandmask);
  t.augment.bandmask_fraction = c.real("augment.bandmask_fraction", t.augment.bandmask_fraction);
  return t;
}

inline SynthSpec synth_spec_from(const RunConfig& c) {
  SynthSpec s;
  const long long seed = c.integer("synth.seed", static_cast<long long>(s.seed));
  const long long num = c.integer("synth.num", static_cast<long long>(s.num_utterances));
  require(seed >= 0, ErrorKind::InvalidArgument, "synth.seed must be non-negative");
  require(num >= 1, ErrorKind::InvalidArgument, "synth.num must be >= 1");
  s.seed = static_cast<std::uint64_t>(seed);
  s.num_utterances = static_cast<std::size_t>(num);
  s.duration_s = c.real("synth.duration", s.duration_s);
  s.sample_rate_hz = static_cast<int>(c.integer("synth.sample_rate", s.sample_rate_hz));
  s.snr_lo_db = c.real("synth.snr_lo", s.snr_lo_db);
  s.snr_hi_db = c.real("synth.snr_hi", s.snr_hi_db);
  s.validate();
  return s;
}

}  // namespace remixse
