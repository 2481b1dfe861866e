#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "remixse/corpus.hpp"
#include "remixse/error.hpp"
#include "remixse/fft.hpp"
#include "remixse/parallel.hpp"
#include "remixse/resample.hpp"
#include "remixse/signal.hpp"
#include "remixse/wav.hpp"

namespace remixse {

// ---------------------------------------------------------------------------
// STOI (Taal et al. 2011), with the customary constants.

namespace stoi_detail {

constexpr int kFs = 10000;
constexpr std::size_t kFrame = 256;
constexpr std::size_t kHop = 128;
constexpr std::size_t kFft = 512;
constexpr std::size_t kBands = 15;
constexpr double kMinFreq = 150.0;
constexpr std::size_t kSegment = 30;
constexpr double kBeta = -15.0;
constexpr double kDynamicRange = 40.0;
constexpr double kEps = std::numeric_limits<double>::epsilon();

// Hann of length n+2 with the zero end points dropped.
inline const std::vector<double>& window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(kFrame);
    for (std::size_t i = 0; i < kFrame; ++i)
      v[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i + 1) / static_cast<double>(kFrame + 1));
    return v;
  }();
  return w;
}

inline std::size_t frame_count(std::size_t len) { return len < kFrame ? 0 : (len - kFrame) / kHop + 1; }

// Drops frames whose clean-signal energy is more than 40 dB below the
// loudest frame and overlap-adds the survivors for both signals.
inline std::pair<std::vector<double>, std::vector<double>> remove_silent_frames(std::span<const double> x,
                                                                                 std::span<const double> y) {
  const auto& w = window();
  const std::size_t frames = frame_count(x.size());
  std::vector<double> energy(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t i = 0; i < kFrame; ++i) {
      const double v = w[i] * x[f * kHop + i];
      acc += v * v;
    }
    energy[f] = 20.0 * std::log10(std::sqrt(acc) + kEps);
  }
  const double top = frames ? *std::max_element(energy.begin(), energy.end()) : 0.0;
  std::vector<std::size_t> keep;
  for (std::size_t f = 0; f < frames; ++f)
    if (top - kDynamicRange - energy[f] < 0.0) keep.push_back(f);

  const std::size_t out_len = keep.empty() ? 0 : (keep.size() - 1) * kHop + kFrame;
  std::vector<double> xs(out_len, 0.0), ys(out_len, 0.0);
  for (std::size_t k = 0; k < keep.size(); ++k)
    for (std::size_t i = 0; i < kFrame; ++i) {
      xs[k * kHop + i] += w[i] * x[keep[k] * kHop + i];
      ys[k * kHop + i] += w[i] * y[keep[k] * kHop + i];
    }
  return {std::move(xs), std::move(ys)};
}

// One-third octave band magnitudes, [bands][frames].
inline std::vector<std::vector<double>> band_envelopes(std::span<const double> x) {
  const auto& w = window();
  const auto& fft = dsp::RealFft::of_size(kFft);
  const std::size_t frames = frame_count(x.size());
  const std::size_t bins = kFft / 2 + 1;

  // Band edges snapped to the nearest FFT bin; band j covers [lo_j, hi_j).
  static const std::vector<std::pair<std::size_t, std::size_t>> edges = [] {
    std::vector<std::pair<std::size_t, std::size_t>> e(kBands);
    auto nearest = [](double hz) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k <= kFft / 2; ++k) {
        const double f = static_cast<double>(k) * kFs / static_cast<double>(kFft);
        const double d = (f - hz) * (f - hz);
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      return best;
    };
    for (std::size_t j = 0; j < kBands; ++j) {
      const double jj = static_cast<double>(j);
      e[j] = {nearest(kMinFreq * std::pow(2.0, (2 * jj - 1) / 6.0)),
              nearest(kMinFreq * std::pow(2.0, (2 * jj + 1) / 6.0))};
    }
    return e;
  }();

  std::vector<std::vector<double>> out(kBands, std::vector<double>(frames, 0.0));
  std::vector<double> buf(kFft);
  std::vector<double> power(bins);
  for (std::size_t f = 0; f < frames; ++f) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = 0; i < kFrame; ++i) buf[i] = w[i] * x[f * kHop + i];
    const auto spec = fft.forward(buf);
    for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(spec[k]);
    for (std::size_t j = 0; j < kBands; ++j) {
      double acc = 0.0;
      for (std::size_t k = edges[j].first; k < edges[j].second; ++k) acc += power[k];
      out[j][f] = std::sqrt(acc);
    }
  }
  return out;
}

}  // namespace stoi_detail

/// Short-time objective intelligibility of `degraded` against `clean`.
/// Both must share length and sample rate; at least 30 spectral frames must
/// survive silence removal.
inline double stoi(const Waveform& clean, const Waveform& degraded) {
  using namespace stoi_detail;
  require(clean.size() == degraded.size(), ErrorKind::LengthMismatch, "stoi: signals differ in length");
  require(clean.sample_rate_hz == degraded.sample_rate_hz, ErrorKind::SampleRateMismatch,
          "stoi: signals differ in sample rate");
  std::vector<double> x = clean.samples, y = degraded.samples;
  if (clean.sample_rate_hz != kFs) {
    dsp::Resampler rs(kFs, clean.sample_rate_hz);
    x = rs.apply(x);
    y = rs.apply(y);
  }
  auto [xs, ys] = remove_silent_frames(x, y);
  const std::size_t frames = frame_count(xs.size());
  require(frames >= kSegment, ErrorKind::TooShort,
          "stoi: only " + std::to_string(frames) + " frames after silence removal, need " + std::to_string(kSegment));

  const auto X = band_envelopes(xs);
  const auto Y = band_envelopes(ys);
  const double clip = std::pow(10.0, -kBeta / 20.0);
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> xseg(kSegment), yseg(kSegment);
  for (std::size_t m = kSegment; m <= frames; ++m) {
    for (std::size_t j = 0; j < kBands; ++j) {
      double xn = 0.0, yn = 0.0;
      for (std::size_t i = 0; i < kSegment; ++i) {
        xseg[i] = X[j][m - kSegment + i];
        yseg[i] = Y[j][m - kSegment + i];
        xn += xseg[i] * xseg[i];
        yn += yseg[i] * yseg[i];
      }
      const double gain = std::sqrt(xn) / (std::sqrt(yn) + kEps);
      double xm = 0.0, ym = 0.0;
      for (std::size_t i = 0; i < kSegment; ++i) {
        yseg[i] = std::min(yseg[i] * gain, xseg[i] * (1.0 + clip));
        xm += xseg[i];
        ym += yseg[i];
      }
      xm /= kSegment;
      ym /= kSegment;
      double sxy = 0.0, sxx = 0.0, syy = 0.0;
      for (std::size_t i = 0; i < kSegment; ++i) {
        const double a = xseg[i] - xm, b = yseg[i] - ym;
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
      }
      total += sxy / ((std::sqrt(sxx) + kEps) * (std::sqrt(syy) + kEps));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

inline constexpr double kSiSdrClampDb = 100.0;

/// Scale-invariant SDR in dB, clamped to +-100.
inline double si_sdr(std::span<const double> reference, std::span<const double> estimate) {
  require(reference.size() == estimate.size(), ErrorKind::LengthMismatch, "si_sdr: signals differ in length");
  double rr = 0.0, er = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    rr += reference[i] * reference[i];
    er += estimate[i] * reference[i];
  }
  require(rr > 0.0, ErrorKind::ZeroReference, "si_sdr: reference has zero energy");
  const double alpha = er / rr;
  double tt = 0.0, ee = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double t = alpha * reference[i];
    const double e = estimate[i] - t;
    tt += t * t;
    ee += e * e;
  }
  if (ee == 0.0) return kSiSdrClampDb;
  if (tt == 0.0) return -kSiSdrClampDb;
  return std::clamp(10.0 * std::log10(tt / ee), -kSiSdrClampDb, kSiSdrClampDb);
}

inline double si_sdr(const Waveform& reference, const Waveform& estimate) {
  return si_sdr(std::span<const double>(reference.samples), std::span<const double>(estimate.samples));
}

// ---------------------------------------------------------------------------
// Reports

struct MetricSelection {
  bool stoi = true;
  bool si_sdr = true;

  static MetricSelection parse(const std::string& list) {
    MetricSelection s{false, false};
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item == "stoi") s.stoi = true;
      else if (item == "sisdr" || item == "si_sdr") s.si_sdr = true;
      else if (!item.empty()) throw Error(ErrorKind::InvalidArgument, "unknown metric '" + item + "'");
    }
    require(s.stoi || s.si_sdr, ErrorKind::InvalidArgument, "no metrics selected");
    return s;
  }
};

struct UtteranceMetrics {
  std::string id;
  std::optional<double> stoi;
  std::optional<double> si_sdr_db;
  std::optional<double> pesq;  // external, never computed here
};

struct MetricFailure {
  std::string id;
  std::string error;
};

struct MetricReport {
  std::vector<UtteranceMetrics> utterances;
  std::vector<std::string> ref_only;
  std::vector<std::string> deg_only;
  std::vector<MetricFailure> failures;
  std::map<std::string, std::string> metadata;

  static std::optional<double> mean_of(const std::vector<UtteranceMetrics>& u,
                                       std::optional<double> UtteranceMetrics::*field) {
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& r : u)
      if (r.*field) {
        acc += *(r.*field);
        ++n;
      }
    if (n == 0) return std::nullopt;
    return acc / static_cast<double>(n);
  }
  std::optional<double> mean_stoi() const { return mean_of(utterances, &UtteranceMetrics::stoi); }
  std::optional<double> mean_si_sdr() const { return mean_of(utterances, &UtteranceMetrics::si_sdr_db); }
  std::optional<double> mean_pesq() const { return mean_of(utterances, &UtteranceMetrics::pesq); }

  nlohmann::json to_json() const {
    using nlohmann::json;
    auto opt = [](std::optional<double> v) { return v ? json(*v) : json(nullptr); };
    json j;
    j["schema"] = "remixse.metrics/1";
    j["metadata"] = json::object();
    for (const auto& [k, v] : metadata) j["metadata"][k] = v;
    j["utterances"] = json::array();
    for (const auto& u : utterances) {
      json r{{"id", u.id}};
      if (u.stoi) r["stoi"] = *u.stoi;
      if (u.si_sdr_db) r["si_sdr_db"] = *u.si_sdr_db;
      if (u.pesq) r["pesq"] = *u.pesq;
      j["utterances"].push_back(std::move(r));
    }
    j["aggregate"] = {{"count", utterances.size()},
                      {"stoi", opt(mean_stoi())},
                      {"si_sdr_db", opt(mean_si_sdr())},
                      {"pesq", opt(mean_pesq())}};
    j["unpaired"] = {{"ref_only", ref_only}, {"deg_only", deg_only}};
    j["failures"] = json::array();
    for (const auto& f : failures) j["failures"].push_back({{"id", f.id}, {"error", f.error}});
    return j;
  }

  std::string to_csv() const {
    auto cell = [](std::optional<double> v) {
      if (!v) return std::string();
      std::ostringstream os;
      os.precision(17);
      os << *v;
      return os.str();
    };
    std::string out = "id,stoi,si_sdr_db,pesq\n";
    for (const auto& u : utterances)
      out += u.id + "," + cell(u.stoi) + "," + cell(u.si_sdr_db) + "," + cell(u.pesq) + "\n";
    return out;
  }
};

/// Checks that `j` has the layout written by MetricReport::to_json.
/// Returns an empty string when valid, otherwise the first problem found.
inline std::string check_report_schema(const nlohmann::json& j) {
  auto number_or_null = [](const nlohmann::json& v) { return v.is_number() || v.is_null(); };
  if (!j.is_object()) return "report is not an object";
  for (const char* k : {"schema", "metadata", "utterances", "aggregate", "unpaired", "failures"})
    if (!j.contains(k)) return std::string("missing key '") + k + "'";
  if (j["schema"] != "remixse.metrics/1") return "unknown schema tag";
  if (!j["metadata"].is_object()) return "metadata is not an object";
  for (const auto& [k, v] : j["metadata"].items())
    if (!v.is_string()) return "metadata value '" + k + "' is not a string";
  if (!j["utterances"].is_array()) return "utterances is not an array";
  for (const auto& u : j["utterances"]) {
    if (!u.is_object() || !u.contains("id") || !u["id"].is_string()) return "utterance without string id";
    for (const auto& [k, v] : u.items()) {
      if (k == "id") continue;
      if (k != "stoi" && k != "si_sdr_db" && k != "pesq") return "unexpected utterance field '" + k + "'";
      if (!v.is_number()) return "utterance field '" + k + "' is not a number";
    }
    if (u.contains("stoi") && (u["stoi"].get<double>() < -1.0 || u["stoi"].get<double>() > 1.0))
      return "stoi outside [-1, 1]";
  }
  const auto& a = j["aggregate"];
  if (!a.is_object() || !a.contains("count") || !a["count"].is_number_unsigned()) return "aggregate.count missing";
  for (const char* k : {"stoi", "si_sdr_db", "pesq"})
    if (!a.contains(k) || !number_or_null(a[k])) return std::string("aggregate.") + k + " invalid";
  const auto& p = j["unpaired"];
  if (!p.is_object() || !p.contains("ref_only") || !p.contains("deg_only") || !p["ref_only"].is_array() ||
      !p["deg_only"].is_array())
    return "unpaired lists missing";
  if (!j["failures"].is_array()) return "failures is not an array";
  return {};
}

/// Reads `id,pesq` rows produced by an external PESQ tool. A header row is
/// allowed; blank lines are skipped.
inline std::map<std::string, double> read_pesq_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::MissingFile, "cannot open " + path.string());
  std::map<std::string, double> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    require(comma != std::string::npos, ErrorKind::ParseError,
            path.string() + ":" + std::to_string(lineno) + ": expected 'id,pesq'");
    const std::string id = line.substr(0, comma);
    const std::string value = line.substr(comma + 1);
    double v = 0.0;
    std::size_t used = 0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != value.size()) {
      require(lineno == 1, ErrorKind::ParseError,
              path.string() + ":" + std::to_string(lineno) + ": bad PESQ value '" + value + "'");
      continue;  // header
    }
    out[id] = v;
  }
  return out;
}

/// Pairs entries by id and scores every pair. Unpaired ids and per-pair
/// failures are listed without stopping the run.
inline MetricReport evaluate_manifest(const Manifest& ref, const Manifest& deg, MetricSelection selection = {},
                                      const std::map<std::string, double>* pesq = nullptr, int threads = 1) {
  std::map<std::string, std::size_t> deg_index;
  for (std::size_t i = 0; i < deg.size(); ++i) deg_index[deg.entries[i].id] = i;
  MetricReport report;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::map<std::string, bool> ref_ids;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto& id = ref.entries[i].id;
    ref_ids[id] = true;
    auto it = deg_index.find(id);
    if (it == deg_index.end()) report.ref_only.push_back(id);
    else pairs.emplace_back(i, it->second);
  }
  for (const auto& e : deg.entries)
    if (!ref_ids.count(e.id)) report.deg_only.push_back(e.id);

  std::vector<std::optional<UtteranceMetrics>> rows(pairs.size());
  std::vector<std::optional<std::string>> errors(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t k) {
    const auto& r = ref.entries[pairs[k].first];
    const auto& d = deg.entries[pairs[k].second];
    try {
      const Waveform x = read_wav(ref.resolve(r));
      const Waveform y = read_wav(deg.resolve(d));
      UtteranceMetrics m{r.id, std::nullopt, std::nullopt, std::nullopt};
      if (selection.stoi) m.stoi = stoi(x, y);
      if (selection.si_sdr) m.si_sdr_db = si_sdr(x, y);
      rows[k] = std::move(m);
    } catch (const std::exception& ex) {
      errors[k] = ex.what();
    }
  });
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (rows[k]) {
      if (pesq) {
        auto it = pesq->find(rows[k]->id);
        if (it != pesq->end()) rows[k]->pesq = it->second;
      }
      report.utterances.push_back(std::move(*rows[k]));
    } else {
      report.failures.push_back({ref.entries[pairs[k].first].id, *errors[k]});
    }
  }
  return report;
}

}  // namespace remixse
