#pragma once

// Checkpoint layout
//
//   "RMXSE1\n"
//   "header_bytes=<n>\n"
//   <n bytes of key=value header text, one entry per line>
//   <payload: little-endian float32 arrays in manifest order>
//   <CRC32 of the payload, little-endian uint32>
//
// The header records the format version, model config, epoch, seed, the
// optional Adam scalars (hex floats) and one `array` line per tensor:
//   array <name> <byte offset> <element count> <dim0>x<dim1>x...

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "remixse/adam.hpp"
#include "remixse/error.hpp"
#include "remixse/hash.hpp"
#include "remixse/model.hpp"
#include "remixse/wav.hpp"

namespace remixse {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagicPrefix = "RMXSE";

struct Checkpoint {
  DenoiserModel model;
  std::optional<AdamState> optimizer;
  std::uint64_t seed = 0;
  std::int64_t epoch = 0;
};

namespace ckpt_detail {

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw Error(ErrorKind::CorruptHeader, "bad number '" + s + "'");
  return v;
}

inline std::int64_t parse_int(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoll(s, &used);
    if (used != s.size()) throw Error(ErrorKind::CorruptHeader, "bad integer '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw Error(ErrorKind::CorruptHeader, "bad integer '" + s + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size() || s.front() == '-') throw Error(ErrorKind::CorruptHeader, "bad integer '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw Error(ErrorKind::CorruptHeader, "bad integer '" + s + "'");
  }
}

inline std::string dims(const ad::Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

struct ArrayEntry {
  std::string name;
  std::size_t offset = 0;
  std::size_t count = 0;
  ad::Shape shape;
};

inline void append_floats(std::vector<unsigned char>& out, const std::vector<double>& values) {
  for (double v : values) {
    const float f = static_cast<float>(v);
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((u >> (8 * i)) & 0xff));
  }
}

inline std::vector<double> read_floats(const unsigned char* p, std::size_t count) {
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t u = wav_detail::le32(p + 4 * i);
    float f;
    std::memcpy(&f, &u, 4);
    out[i] = f;
  }
  return out;
}

}  // namespace ckpt_detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  using namespace ckpt_detail;
  const auto& cfg = ck.model.config;
  std::ostringstream h;
  h << "format_version=" << kCheckpointVersion << "\n"
    << "config.depth=" << cfg.depth << "\n"
    << "config.hidden=" << cfg.hidden << "\n"
    << "config.kernel=" << cfg.kernel << "\n"
    << "config.stride=" << cfg.stride << "\n"
    << "config.resample=" << cfg.resample << "\n"
    << "config.lstm_layers=" << cfg.lstm_layers << "\n"
    << "config.causal=" << (cfg.causal ? 1 : 0) << "\n"
    << "epoch=" << ck.epoch << "\n"
    << "seed=" << ck.seed << "\n"
    << "optimizer=" << (ck.optimizer ? 1 : 0) << "\n";
  if (ck.optimizer) {
    const auto& o = *ck.optimizer;
    h << "adam.step_size=" << hexfloat(o.hyper.step_size) << "\n"
      << "adam.beta1=" << hexfloat(o.hyper.beta1) << "\n"
      << "adam.beta2=" << hexfloat(o.hyper.beta2) << "\n"
      << "adam.epsilon=" << hexfloat(o.hyper.epsilon) << "\n"
      << "adam.timestep=" << o.timestep << "\n";
  }

  std::vector<unsigned char> payload;
  auto add_array = [&](const std::string& name, const ad::Shape& shape, const std::vector<double>& values) {
    h << "array " << name << " " << payload.size() << " " << values.size() << " " << dims(shape) << "\n";
    append_floats(payload, values);
  };
  for (const auto& p : ck.model.params) add_array(p.name, p.value.shape(), p.value.values());
  if (ck.optimizer) {
    require(ck.optimizer->first_moment.size() == ck.model.params.size(), ErrorKind::SizeMismatch,
            "optimizer state does not match model");
    for (std::size_t i = 0; i < ck.model.params.size(); ++i) {
      add_array("adam.m." + ck.model.params[i].name, ck.model.params[i].value.shape(), ck.optimizer->first_moment[i]);
      add_array("adam.v." + ck.model.params[i].name, ck.model.params[i].value.shape(),
                ck.optimizer->second_moment[i]);
    }
  }
  h << "payload_bytes=" << payload.size() << "\n";
  const std::string header = h.str();

  std::vector<unsigned char> out;
  const std::string lead = std::string(kCheckpointMagicPrefix) + std::to_string(kCheckpointVersion) + "\n" +
                           "header_bytes=" + std::to_string(header.size()) + "\n";
  out.insert(out.end(), lead.begin(), lead.end());
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), payload.begin(), payload.end());
  const std::uint32_t crc = crc32_of(payload);
  wav_detail::put32(out, crc);
  return out;
}

/// Parses a checkpoint image. With `expected`, a config that differs raises
/// ConfigMismatch.
inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes,
                                    const std::optional<ModelConfig>& expected = std::nullopt) {
  using namespace ckpt_detail;
  const auto corrupt = [](const std::string& why) { return Error(ErrorKind::CorruptHeader, why); };

  std::size_t pos = 0;
  auto read_line = [&]() {
    const std::size_t start = pos;
    while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    if (pos >= bytes.size()) throw corrupt("unterminated header line");
    std::string line(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.begin() + static_cast<std::ptrdiff_t>(pos));
    ++pos;
    return line;
  };

  const std::string magic = read_line();
  if (magic.rfind(kCheckpointMagicPrefix, 0) != 0) throw corrupt("not a checkpoint file (bad magic)");
  const std::string magic_version = magic.substr(std::strlen(kCheckpointMagicPrefix));
  if (magic_version != std::to_string(kCheckpointVersion))
    throw Error(ErrorKind::VersionMismatch, "checkpoint format " + magic_version + ", this build reads " +
                                                std::to_string(kCheckpointVersion));
  const std::string size_line = read_line();
  if (size_line.rfind("header_bytes=", 0) != 0) throw corrupt("missing header size");
  const auto header_bytes = static_cast<std::size_t>(parse_int(size_line.substr(13)));
  if (pos + header_bytes > bytes.size()) throw corrupt("truncated header");
  const std::string header(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                           bytes.begin() + static_cast<std::ptrdiff_t>(pos + header_bytes));
  const std::size_t payload_start = pos + header_bytes;

  std::map<std::string, std::string> kv;
  std::vector<ArrayEntry> arrays;
  std::istringstream hs(header);
  std::string line;
  while (std::getline(hs, line)) {
    if (line.rfind("array ", 0) == 0) {
      std::istringstream ls(line.substr(6));
      ArrayEntry e;
      std::string shape_text;
      if (!(ls >> e.name >> e.offset >> e.count >> shape_text)) throw corrupt("bad array line: " + line);
      std::istringstream ss(shape_text);
      std::string d;
      while (std::getline(ss, d, 'x')) e.shape.push_back(static_cast<std::size_t>(parse_int(d)));
      if (ad::numel(e.shape) != e.count) throw corrupt("array shape/count mismatch for " + e.name);
      arrays.push_back(std::move(e));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw corrupt("bad header line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw corrupt("missing header key " + k);
    return it->second;
  };

  if (parse_int(get("format_version")) != kCheckpointVersion)
    throw Error(ErrorKind::VersionMismatch, "checkpoint format_version " + get("format_version"));

  const auto payload_bytes = static_cast<std::size_t>(parse_int(get("payload_bytes")));
  if (payload_start + payload_bytes + 4 != bytes.size())
    throw corrupt("file size does not match header (truncated or padded checkpoint)");
  const std::span<const unsigned char> payload(bytes.data() + payload_start, payload_bytes);
  if (crc32_of(payload) != wav_detail::le32(bytes.data() + payload_start + payload_bytes))
    throw corrupt("payload checksum mismatch");

  ModelConfig cfg;
  cfg.depth = static_cast<int>(parse_int(get("config.depth")));
  cfg.hidden = static_cast<int>(parse_int(get("config.hidden")));
  cfg.kernel = static_cast<int>(parse_int(get("config.kernel")));
  cfg.stride = static_cast<int>(parse_int(get("config.stride")));
  cfg.resample = static_cast<int>(parse_int(get("config.resample")));
  cfg.lstm_layers = static_cast<int>(parse_int(get("config.lstm_layers")));
  cfg.causal = parse_int(get("config.causal")) != 0;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw corrupt(std::string("invalid model config: ") + e.what());
  }
  if (expected && !(*expected == cfg))
    throw Error(ErrorKind::ConfigMismatch, "checkpoint holds " + describe(cfg) + ", expected " + describe(*expected));

  Checkpoint ck;
  ck.model = empty_model(cfg);
  ck.epoch = parse_int(get("epoch"));
  ck.seed = parse_uint(get("seed"));

  std::map<std::string, const ArrayEntry*> by_name;
  for (const auto& a : arrays) {
    if (a.offset + 4 * a.count > payload_bytes) throw corrupt("array " + a.name + " overruns payload");
    by_name[a.name] = &a;
  }
  auto fetch = [&](const std::string& name, const ad::Shape& shape) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw corrupt("missing array " + name);
    if (it->second->shape != shape) throw Error(ErrorKind::ConfigMismatch, "array " + name + " has wrong shape");
    return read_floats(payload.data() + it->second->offset, it->second->count);
  };
  for (auto& p : ck.model.params) p.value = ad::Tensor(p.value.shape(), fetch(p.name, p.value.shape()));

  if (parse_int(get("optimizer")) != 0) {
    AdamState o;
    o.hyper.step_size = parse_double(get("adam.step_size"));
    o.hyper.beta1 = parse_double(get("adam.beta1"));
    o.hyper.beta2 = parse_double(get("adam.beta2"));
    o.hyper.epsilon = parse_double(get("adam.epsilon"));
    o.timestep = parse_int(get("adam.timestep"));
    for (const auto& p : ck.model.params) {
      o.first_moment.push_back(fetch("adam.m." + p.name, p.value.shape()));
      o.second_moment.push_back(fetch("adam.v." + p.name, p.value.shape()));
    }
    ck.optimizer = std::move(o);
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_bytes(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<ModelConfig>& expected = std::nullopt) {
  return decode_checkpoint(read_file_bytes(path), expected);
}

/// Rounds every parameter to float32, the precision checkpoints store.
inline DenoiserModel quantize_to_checkpoint_precision(DenoiserModel m) {
  for (auto& p : m.params)
    for (auto& v : p.value.values()) v = static_cast<double>(static_cast<float>(v));
  return m;
}

}  // namespace remixse
