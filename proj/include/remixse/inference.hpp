#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "remixse/checkpoint.hpp"
#include "remixse/corpus.hpp"
#include "remixse/error.hpp"
#include "remixse/model.hpp"
#include "remixse/parallel.hpp"
#include "remixse/signal.hpp"
#include "remixse/wav.hpp"

namespace remixse {

struct InferenceStage {
  std::string source;  // checkpoint path or a label
  std::shared_ptr<const DenoiserModel> model;
};

/// Ordered model chain; stage k enhances the output of stage k-1.
struct InferencePlan {
  std::vector<InferenceStage> stages;
  int sample_rate_hz = kDefaultSampleRate;

  static InferencePlan from_models(const std::vector<std::shared_ptr<const DenoiserModel>>& models) {
    InferencePlan p;
    for (std::size_t i = 0; i < models.size(); ++i) p.stages.push_back({"stage" + std::to_string(i + 1), models[i]});
    return p;
  }

  static InferencePlan from_checkpoints(const std::vector<std::filesystem::path>& paths) {
    InferencePlan p;
    for (const auto& path : paths)
      p.stages.push_back({path.string(), std::make_shared<const DenoiserModel>(load_checkpoint(path).model)});
    return p;
  }

  void validate() const {
    require(!stages.empty(), ErrorKind::InvalidArgument, "inference plan has no stages");
    for (const auto& s : stages) require(s.model != nullptr, ErrorKind::InvalidArgument, "stage without a model");
  }
};

/// Runs every stage in order on the speech estimate of the previous one.
inline Waveform enhance(const InferencePlan& plan, const Waveform& noisy) {
  plan.validate();
  noisy.validate();
  require(noisy.sample_rate_hz == plan.sample_rate_hz, ErrorKind::SampleRateMismatch,
          "input is " + std::to_string(noisy.sample_rate_hz) + " Hz, models expect " +
              std::to_string(plan.sample_rate_hz) + " Hz");
  require(!noisy.samples.empty(), ErrorKind::InvalidArgument, "cannot enhance an empty waveform");
  SignalBatch x = SignalBatch::from_rows({noisy});
  for (const auto& stage : plan.stages) x = forward(*stage.model, x).speech;
  return x.waveform(0);
}

struct EnhanceRecord {
  std::string id;
  std::string output;
  std::size_t stages = 0;
  double seconds = 0.0;
};

struct EnhanceFailure {
  std::string id;
  std::string error;
};

struct EnhanceReport {
  std::vector<EnhanceRecord> processed;
  std::vector<EnhanceFailure> failures;
  Manifest enhanced;  // one entry per processed utterance, same ids as input

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["processed"] = nlohmann::json::array();
    for (const auto& r : processed)
      j["processed"].push_back({{"id", r.id}, {"output", r.output}, {"stages", r.stages}, {"seconds", r.seconds}});
    j["failures"] = nlohmann::json::array();
    for (const auto& f : failures) j["failures"].push_back({{"id", f.id}, {"error", f.error}});
    return j;
  }
};

/// Enhances every manifest entry into `out_dir/<stem>.enhanced.wav` and
/// writes `out_dir/enhanced.jsonl`. Failing entries are reported, not fatal.
inline EnhanceReport enhance_batch(const InferencePlan& plan, const Manifest& manifest,
                                   const std::filesystem::path& out_dir, int threads = 1,
                                   bool resample_input = false) {
  plan.validate();
  std::filesystem::create_directories(out_dir);
  const std::size_t n = manifest.size();
  std::vector<std::optional<EnhanceRecord>> done(n);
  std::vector<std::optional<EnhanceFailure>> failed(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& e = manifest.entries[i];
    try {
      const auto start = std::chrono::steady_clock::now();
      Waveform w = read_wav(manifest.resolve(e));
      if (resample_input && w.sample_rate_hz != plan.sample_rate_hz)
        w = resample(w, plan.sample_rate_hz, w.sample_rate_hz);
      Waveform y = enhance(plan, w);
      const std::string name = std::filesystem::path(e.path).stem().string() + ".enhanced.wav";
      write_wav(out_dir / name, y);
      done[i] = EnhanceRecord{e.id, name, plan.stages.size(),
                              std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
    } catch (const std::exception& ex) {
      failed[i] = EnhanceFailure{e.id, ex.what()};
    }
  });
  EnhanceReport report;
  report.enhanced.base_dir = out_dir;
  for (std::size_t i = 0; i < n; ++i) {
    if (done[i]) {
      report.enhanced.entries.push_back(
          {done[i]->id, done[i]->output, Role::Enhanced, manifest.entries[i].duration_s});
      report.processed.push_back(std::move(*done[i]));
    }
    if (failed[i]) report.failures.push_back(std::move(*failed[i]));
  }
  write_manifest(out_dir / "enhanced.jsonl", report.enhanced);
  return report;
}

}  // namespace remixse
