#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "remixse/error.hpp"
#include "remixse/hash.hpp"
#include "remixse/parallel.hpp"
#include "remixse/rng.hpp"
#include "remixse/signal.hpp"
#include "remixse/wav.hpp"

namespace remixse {

enum class Role { Noisy, Noise, Clean, Enhanced };

inline std::string to_string(Role r) {
  switch (r) {
    case Role::Noisy: return "noisy";
    case Role::Noise: return "noise";
    case Role::Clean: return "clean";
    case Role::Enhanced: return "enhanced";
  }
  return "noisy";
}

inline Role parse_role(const std::string& s) {
  if (s == "noisy") return Role::Noisy;
  if (s == "noise") return Role::Noise;
  if (s == "clean") return Role::Clean;
  if (s == "enhanced") return Role::Enhanced;
  throw Error(ErrorKind::ParseError, "unknown role '" + s + "'");
}

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest's directory
  Role role = Role::Noisy;
  double duration_s = 0.0;

  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;  // directory entry paths are resolved against

  std::filesystem::path resolve(const ManifestEntry& e) const { return base_dir / e.path; }
  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

/// Newline-delimited JSON, one {id, path, role, duration_s} object per line.
/// Blank lines are skipped; any other field, a missing field, or a repeated
/// id is a ParseError carrying the line number.
inline Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir, bool check_files = true) {
  Manifest m;
  m.base_dir = base_dir;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  static const std::set<std::string> kFields = {"id", "path", "role", "duration_s"};
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "manifest line " + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::ParseError, where + e.what());
    }
    if (!j.is_object()) throw Error(ErrorKind::ParseError, where + "expected a JSON object");
    for (const auto& [k, v] : j.items())
      if (!kFields.count(k)) throw Error(ErrorKind::ParseError, where + "unknown field '" + k + "'");
    for (const auto& k : kFields)
      if (!j.contains(k)) throw Error(ErrorKind::ParseError, where + "missing field '" + k + "'");
    if (!j["id"].is_string() || !j["path"].is_string() || !j["role"].is_string() || !j["duration_s"].is_number())
      throw Error(ErrorKind::ParseError, where + "field has the wrong type");
    ManifestEntry e;
    e.id = j["id"].get<std::string>();
    e.path = j["path"].get<std::string>();
    try {
      e.role = parse_role(j["role"].get<std::string>());
    } catch (const Error& err) {
      throw Error(ErrorKind::ParseError, where + err.what());
    }
    e.duration_s = j["duration_s"].get<double>();
    if (!ids.insert(e.id).second) throw Error(ErrorKind::ParseError, where + "duplicate id '" + e.id + "'");
    if (check_files && !std::filesystem::exists(m.base_dir / e.path))
      throw Error(ErrorKind::MissingFile, where + "missing file " + (m.base_dir / e.path).string());
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path, bool check_files = true) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path(), check_files);
}

inline std::string format_manifest_line(const ManifestEntry& e) {
  nlohmann::json j = {{"id", e.id}, {"path", e.path}, {"role", to_string(e.role)}, {"duration_s", e.duration_s}};
  return j.dump();
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write manifest " + path.string());
  for (const auto& e : m.entries) out << format_manifest_line(e) << "\n";
  if (!out) throw Error(ErrorKind::Io, "short write to " + path.string());
}

/// Reads every entry's audio, checking role and that the recorded duration
/// is within one 256-sample hop of the file length.
inline std::vector<Waveform> load_waveforms(const Manifest& m, std::optional<Role> role = std::nullopt) {
  std::vector<Waveform> out;
  out.reserve(m.size());
  for (const auto& e : m.entries) {
    if (role && e.role != *role)
      throw Error(ErrorKind::RoleMismatch,
                  "entry '" + e.id + "' has role " + to_string(e.role) + ", expected " + to_string(*role));
    Waveform w = read_wav(m.resolve(e));
    const double actual = static_cast<double>(w.size()) / w.sample_rate_hz;
    require(std::abs(actual - e.duration_s) <= 256.0 / w.sample_rate_hz, ErrorKind::ParseError,
            "entry '" + e.id + "' duration does not match its file");
    out.push_back(std::move(w));
  }
  return out;
}

/// Random contiguous crop when longer than M, right zero-pad when shorter.
inline Waveform crop_or_pad(const Waveform& w, std::size_t M, Rng& rng) {
  Waveform out;
  out.sample_rate_hz = w.sample_rate_hz;
  if (w.size() == M) return w;
  if (w.size() > M) {
    const auto start = static_cast<std::size_t>(rng.index(w.size() - M + 1));
    out.samples.assign(w.samples.begin() + static_cast<std::ptrdiff_t>(start),
                       w.samples.begin() + static_cast<std::ptrdiff_t>(start + M));
  } else {
    out.samples = w.samples;
    out.samples.resize(M, 0.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthSpec {
  std::uint64_t seed = 0;
  std::size_t num_utterances = 64;
  double duration_s = 1.0;
  int sample_rate_hz = kDefaultSampleRate;
  double snr_lo_db = 0.0;   // in-domain mixing range for the noisy set
  double snr_hi_db = 10.0;
  double f0_lo_hz = 100.0;  // speech proxy
  double f0_hi_hz = 300.0;
  int harmonics = 5;
  double syllable_rate_hz = 4.0;
  double duty_lo = 0.3;     // extraneous burst duty cycle range
  double duty_hi = 0.8;

  void validate() const {
    require(num_utterances >= 1, ErrorKind::InvalidArgument, "synth: need at least one utterance");
    require(duration_s >= 1.0, ErrorKind::InvalidArgument, "synth: duration must be >= 1 s");
    require(sample_rate_hz > 0, ErrorKind::InvalidArgument, "synth: sample rate must be positive");
    require(snr_lo_db <= snr_hi_db, ErrorKind::InvalidArgument, "synth: snr range is inverted");
    require(f0_lo_hz > 0 && f0_lo_hz <= f0_hi_hz && harmonics >= 1, ErrorKind::InvalidArgument,
            "synth: bad speech-proxy parameters");
    require(duty_lo > 0 && duty_lo <= duty_hi && duty_hi <= 1, ErrorKind::InvalidArgument,
            "synth: bad duty-cycle range");
  }
};

namespace synth_detail {

enum Stream : std::uint64_t { kSpeech = 1, kInDomain = 2, kExtraneous = 3, kMix = 4 };

inline void normalize_peak(std::vector<double>& x, double peak) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  if (m > 0.0)
    for (auto& v : x) v *= peak / m;
}

}  // namespace synth_detail

/// Harmonic stack with a gliding f0 and a syllabic amplitude envelope.
inline std::vector<double> synth_speech_proxy(const SynthSpec& spec, std::size_t n, Rng& rng) {
  const double fs = spec.sample_rate_hz;
  const double f0 = rng.uniform(spec.f0_lo_hz, spec.f0_hi_hz);
  const double glide_rate = rng.uniform(0.3, 1.0), glide_phase = rng.uniform(0.0, 2 * std::numbers::pi);
  const double syl_rate = spec.syllable_rate_hz * rng.uniform(0.85, 1.15);
  const double syl_phase = rng.uniform(0.0, 2 * std::numbers::pi);
  std::vector<double> amps(static_cast<std::size_t>(spec.harmonics));
  for (std::size_t k = 0; k < amps.size(); ++k) amps[k] = rng.uniform(0.5, 1.0) / static_cast<double>(k + 1);
  // Per-syllable loudness so some syllables are nearly silent.
  const auto syllables = static_cast<std::size_t>(std::ceil(n / fs * syl_rate)) + 2;
  std::vector<double> syl_gain(syllables);
  for (auto& g : syl_gain) g = rng.uniform() < 0.2 ? 0.05 : rng.uniform(0.5, 1.0);

  std::vector<double> x(n, 0.0);
  double phase = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double time = static_cast<double>(t) / fs;
    const double f = f0 * (1.0 + 0.06 * std::sin(2 * std::numbers::pi * glide_rate * time + glide_phase));
    phase += 2 * std::numbers::pi * f / fs;
    double v = 0.0;
    for (std::size_t k = 0; k < amps.size(); ++k) {
      if (f * static_cast<double>(k + 1) >= fs / 2) break;
      v += amps[k] * std::sin(static_cast<double>(k + 1) * phase);
    }
    const double cyc = syl_rate * time + syl_phase / (2 * std::numbers::pi);
    const double env = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * cyc);
    const auto syl = static_cast<std::size_t>(std::floor(cyc)) % syllables;
    x[t] = v * env * env * syl_gain[syl];
  }
  synth_detail::normalize_peak(x, 0.5);
  return x;
}

/// Pink noise plus two amplitude-modulated tones.
inline std::vector<double> synth_in_domain_noise(const SynthSpec& spec, std::size_t n, Rng& rng) {
  const double fs = spec.sample_rate_hz;
  std::vector<double> x(n, 0.0);
  // Paul Kellet's economy pink filter.
  double b0 = 0, b1 = 0, b2 = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double w = rng.normal();
    b0 = 0.99765 * b0 + w * 0.0990460;
    b1 = 0.96300 * b1 + w * 0.2965164;
    b2 = 0.57000 * b2 + w * 1.0526913;
    x[t] = (b0 + b1 + b2 + w * 0.1848) * 0.1;
  }
  for (int k = 0; k < 2; ++k) {
    const double f = rng.uniform(300.0, 3000.0), am = rng.uniform(0.5, 3.0);
    const double ph = rng.uniform(0.0, 2 * std::numbers::pi), amp = rng.uniform(0.1, 0.3);
    for (std::size_t t = 0; t < n; ++t) {
      const double time = static_cast<double>(t) / fs;
      x[t] += amp * (0.6 + 0.4 * std::sin(2 * std::numbers::pi * am * time + ph)) *
              std::sin(2 * std::numbers::pi * f * time);
    }
  }
  synth_detail::normalize_peak(x, 0.5);
  return x;
}

/// White-noise bursts with a randomized duty cycle.
inline std::vector<double> synth_extraneous_noise(const SynthSpec& spec, std::size_t n, Rng& rng) {
  const double fs = spec.sample_rate_hz;
  const double duty = rng.uniform(spec.duty_lo, spec.duty_hi);
  std::vector<double> x(n, 0.0);
  std::size_t t = 0;
  bool on = rng.uniform() < duty;
  bool any = false;
  while (t < n) {
    const auto len = static_cast<std::size_t>(rng.uniform(0.05, 0.3) * fs);
    const double gain = rng.uniform(0.3, 1.0);
    for (std::size_t i = t; i < std::min(n, t + len); ++i) x[i] = on ? gain * rng.normal() : 0.0;
    any = any || on;
    t += std::max<std::size_t>(len, 1);
    on = rng.uniform() < duty;
  }
  if (!any)
    for (std::size_t i = 0; i < std::min<std::size_t>(n, static_cast<std::size_t>(0.1 * fs)); ++i) x[i] = rng.normal();
  synth_detail::normalize_peak(x, 0.5);
  return x;
}

struct SynthResult {
  Manifest noisy;
  Manifest noise;
  Manifest clean;
  std::vector<double> snr_requested_db;
  std::vector<double> snr_achieved_db;  // measured on the float32 samples written
  std::string corpus_hash;
};

/// SHA-256 over every referenced WAV file, manifests taken in order.
inline std::string corpus_hash(std::initializer_list<const Manifest*> manifests) {
  Sha256 h;
  for (const auto* m : manifests)
    for (const auto& e : m->entries) h.update(read_file_bytes(m->resolve(e)));
  return h.hex();
}

inline std::string utterance_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05zu", prefix, i);
  return buf;
}

/// Writes noisy/, noise/, clean/ WAV trees plus noisy.jsonl, noise.jsonl,
/// clean.jsonl and synth_log.jsonl under `out_dir`. Noisy and clean entries
/// share ids. Output bytes depend only on the spec, not on `threads`.
inline SynthResult synth_corpus(const SynthSpec& spec, const std::filesystem::path& out_dir, int threads = 1) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "noisy", ec);
  fs::create_directories(out_dir / "noise", ec);
  fs::create_directories(out_dir / "clean", ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create corpus directories under " + out_dir.string());

  const auto n = static_cast<std::size_t>(std::llround(spec.duration_s * spec.sample_rate_hz));
  const double dur = static_cast<double>(n) / spec.sample_rate_hz;
  SynthResult r;
  r.snr_requested_db.resize(spec.num_utterances);
  r.snr_achieved_db.resize(spec.num_utterances);
  for (auto* m : {&r.noisy, &r.noise, &r.clean}) {
    m->base_dir = out_dir;
    m->entries.resize(spec.num_utterances);
  }

  parallel_for(spec.num_utterances, threads, [&](std::size_t i) {
    using namespace synth_detail;
    auto speech_rng = Rng::derive({spec.seed, i, kSpeech});
    auto noise_rng = Rng::derive({spec.seed, i, kInDomain});
    auto ext_rng = Rng::derive({spec.seed, i, kExtraneous});
    auto mix_rng = Rng::derive({spec.seed, i, kMix});

    Waveform clean{synth_speech_proxy(spec, n, speech_rng), spec.sample_rate_hz};
    const auto in_domain = synth_in_domain_noise(spec, n, noise_rng);
    Waveform ext{synth_extraneous_noise(spec, n, ext_rng), spec.sample_rate_hz};

    // Quantize the clean signal first so the logged SNR is the one a reader
    // of the float32 files measures.
    for (auto& v : clean.samples) v = static_cast<float>(v);
    const double snr = mix_rng.uniform(spec.snr_lo_db, spec.snr_hi_db);
    auto mixed = mix_at_snr(clean.samples, in_domain, snr);
    Waveform noisy{std::move(mixed.mixture), spec.sample_rate_hz};
    for (auto& v : noisy.samples) v = static_cast<float>(v);
    std::vector<double> residual(n);
    for (std::size_t t = 0; t < n; ++t) residual[t] = noisy.samples[t] - clean.samples[t];
    r.snr_requested_db[i] = snr;
    r.snr_achieved_db[i] = snr_db(clean.samples, residual);

    const std::string id = utterance_id("utt", i), nid = utterance_id("ext", i);
    write_wav(out_dir / "noisy" / (id + ".wav"), noisy);
    write_wav(out_dir / "clean" / (id + ".wav"), clean);
    write_wav(out_dir / "noise" / (nid + ".wav"), ext);
    r.noisy.entries[i] = {id, "noisy/" + id + ".wav", Role::Noisy, dur};
    r.clean.entries[i] = {id, "clean/" + id + ".wav", Role::Clean, dur};
    r.noise.entries[i] = {nid, "noise/" + nid + ".wav", Role::Noise, dur};
  });

  write_manifest(out_dir / "noisy.jsonl", r.noisy);
  write_manifest(out_dir / "noise.jsonl", r.noise);
  write_manifest(out_dir / "clean.jsonl", r.clean);
  {
    std::ofstream log(out_dir / "synth_log.jsonl", std::ios::trunc);
    for (std::size_t i = 0; i < spec.num_utterances; ++i) {
      nlohmann::json j = {{"id", r.noisy.entries[i].id},
                          {"snr_db_requested", r.snr_requested_db[i]},
                          {"snr_db_achieved", r.snr_achieved_db[i]}};
      log << j.dump() << "\n";
    }
  }
  r.corpus_hash = corpus_hash({&r.noisy, &r.noise, &r.clean});
  return r;
}

}  // namespace remixse
