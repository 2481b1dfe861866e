// remixse: synth | bootstrap | distill | enhance | evaluate
//
// Every flag maps onto a RunConfig key; a --config file supplies the base
// values and flags given on the command line override them. Each command
// writes `<stem>.resolved.cfg` next to its outputs, with the hashes of all
// inputs and outputs as leading comment lines.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "remixse/remixse.hpp"

namespace fs = std::filesystem;
using namespace remixse;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

// Failures the user fixes by changing flags, config, or input selection.
bool is_usage_error(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidArgument:
    case ErrorKind::ParseError:
    case ErrorKind::MissingFile:
    case ErrorKind::RoleMismatch:
    case ErrorKind::MissingExtNoise:
    case ErrorKind::UnexpectedExtNoise:
    case ErrorKind::ConfigMismatch:
    case ErrorKind::SampleRateMismatch:
    case ErrorKind::EmptyCorpus:
      return true;
    default:
      return false;
  }
}

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config_file;
  std::vector<std::string> sets;
  bool force = false;
  std::optional<int> threads;
  std::map<std::string, std::string> flags;  // config key -> command-line value
};

/// Binds `--name` to config key `key`; the value only counts when given.
void bind(CLI::App* app, Options& o, const std::string& name, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(
      name, [&o, key](const std::string& v) { o.flags[key] = v; }, help);
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config_file, "key=value config file")->check(CLI::ExistingFile);
  app->add_option("--set", o.sets, "extra key=value override, repeatable");
  app->add_flag("--force", o.force, "overwrite existing outputs");
  app->add_option("--threads", o.threads, "worker cap (default: REMIXSE_THREADS or 1)")->check(CLI::PositiveNumber);
}

RunConfig resolve(const Options& o) {
  RunConfig c = o.config_file.empty() ? RunConfig{} : RunConfig::load(o.config_file);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    c.set(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : o.flags) c.set(k, v);
  if (o.threads) c.set("run.threads", std::to_string(*o.threads));
  return c;
}

int threads_of(const RunConfig& c) {
  const long long t = c.integer("run.threads", default_threads());
  if (t < 1) throw UsageError("run.threads must be >= 1");
  return static_cast<int>(t);
}

fs::path required_path(const RunConfig& c, const std::string& key, const std::string& flag) {
  if (!c.has(key) || c.str(key).empty()) throw UsageError("missing required " + flag + " (config key " + key + ")");
  return c.str(key);
}

fs::path input_path(const RunConfig& c, const std::string& key, const std::string& flag) {
  fs::path p = required_path(c, key, flag);
  if (!fs::exists(p)) throw Error(ErrorKind::MissingFile, flag + ": no such file " + p.string());
  return p;
}

void refuse_existing(const fs::path& p, bool force) {
  if (!force && fs::exists(p)) throw UsageError(p.string() + " already exists; pass --force to overwrite");
}

class Provenance {
 public:
  void add(const std::string& key, const std::string& value) { lines_.push_back("# " + key + "=" + value); }
  void add_file(const std::string& key, const fs::path& p) { add(key, sha256_file(p)); }

  void write(const fs::path& path, const RunConfig& c, const std::string& command) const {
    std::ofstream out(path, std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    out << "# command=" << command << "\n";
    for (const auto& l : lines_) out << l << "\n";
    out << c.to_text();
  }

 private:
  std::vector<std::string> lines_;
};

fs::path sidecar(const fs::path& output, const std::string& suffix) {
  return output.parent_path() / (output.stem().string() + suffix);
}

void ensure_parent(const fs::path& p) {
  if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
}

/// Loads a manifest's waveforms with a role check, resampling foreign rates
/// only when allowed.
std::vector<Waveform> load_corpus(const fs::path& manifest_path, Role role, bool allow_resample) {
  const Manifest m = load_manifest(manifest_path);
  auto w = load_waveforms(m, role);
  for (auto& x : w)
    if (x.sample_rate_hz != kDefaultSampleRate) {
      require(allow_resample, ErrorKind::SampleRateMismatch,
              manifest_path.string() + ": " + std::to_string(x.sample_rate_hz) + " Hz input; pass --resample");
      x = resample(x, kDefaultSampleRate, x.sample_rate_hz);
    }
  return w;
}

std::string manifest_hash(const fs::path& manifest_path) {
  const Manifest m = load_manifest(manifest_path);
  return corpus_hash({&m});
}

void reject_clean_paths(const RunConfig& c) {
  if (c.has("paths.clean"))
    throw Error(ErrorKind::InvalidArgument, "training never reads clean speech; remove paths.clean");
}

/// Stats sink: one JSON line per finished epoch, flushed as it goes. The
/// file is created at the first epoch so rejected runs leave nothing behind.
class StatsFile {
 public:
  explicit StatsFile(fs::path path) : path_(std::move(path)) {}
  void operator()(const EpochStats& s) {
    if (!out_.is_open()) {
      out_.open(path_, std::ios::trunc);
      require(static_cast<bool>(out_), ErrorKind::Io, "cannot write " + path_.string());
    }
    out_ << format_stats_line(s) << "\n";
    out_.flush();
    std::cerr << "epoch " << s.epoch << " loss " << s.mean_loss << " (" << s.seconds << " s)\n";
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& c, bool force) {
  const fs::path out = required_path(c, "paths.out", "--out");
  const SynthSpec spec = synth_spec_from(c);
  for (const char* f : {"noisy.jsonl", "noise.jsonl", "clean.jsonl", "synth_log.jsonl"}) refuse_existing(out / f, force);
  fs::create_directories(out);
  const auto r = synth_corpus(spec, out, threads_of(c));
  Provenance p;
  p.add("corpus_hash", r.corpus_hash);
  p.write(out / "synth.resolved.cfg", c, "synth");
  std::cout << "corpus_hash " << r.corpus_hash << "\n";
  return 0;
}

int cmd_bootstrap(const RunConfig& c, bool force) {
  reject_clean_paths(c);
  const fs::path noisy = input_path(c, "paths.noisy", "--noisy");
  const fs::path ext = input_path(c, "paths.ext_noise", "--ext-noise");
  const fs::path out = required_path(c, "paths.out", "--out");
  const fs::path stats = c.has("paths.stats") ? fs::path(c.str("paths.stats")) : sidecar(out, ".stats.jsonl");
  const ModelConfig mc = model_config_from(c);
  const TrainConfig tc = train_config_from(c);
  const bool rs = c.boolean("run.resample", false);
  const auto X = load_corpus(noisy, Role::Noisy, rs);
  const auto N = load_corpus(ext, Role::Noise, rs);
  for (const auto& p : {out, stats, sidecar(out, ".resolved.cfg")}) refuse_existing(p, force);
  ensure_parent(out);
  ensure_parent(stats);

  StatsFile sink(stats);
  auto r = bootstrap_nytt(X, N, init_model(mc, tc.seed), tc, std::ref(sink));
  save_checkpoint(out, {r.model, r.optimizer, tc.seed, tc.epochs});

  Provenance p;
  p.add("noisy_hash", manifest_hash(noisy));
  p.add("ext_noise_hash", manifest_hash(ext));
  p.add_file("checkpoint_sha256", out);
  p.write(sidecar(out, ".resolved.cfg"), c, "bootstrap");
  return 0;
}

int cmd_distill(const RunConfig& c, bool force) {
  reject_clean_paths(c);
  const fs::path teacher_path = input_path(c, "paths.teacher", "--teacher");
  const fs::path noisy = input_path(c, "paths.noisy", "--noisy");
  const fs::path out = required_path(c, "paths.out", "--out");
  const fs::path stats = c.has("paths.stats") ? fs::path(c.str("paths.stats")) : sidecar(out, ".stats.jsonl");
  const fs::path teacher_out = sidecar(out, ".teacher.ckpt");

  TrainConfig defaults;
  if (c.str("train.tup") == "ema") defaults.epochs = 35;
  const TrainConfig tc = train_config_from(c, defaults);
  const bool rs = c.boolean("run.resample", false);

  std::optional<ModelConfig> expected;
  for (const char* k : {"model.preset", "model.depth", "model.hidden", "model.kernel", "model.stride", "model.resample"})
    if (c.has(k)) expected = model_config_from(c);
  const Checkpoint teacher = load_checkpoint(teacher_path, expected);

  const auto X = load_corpus(noisy, Role::Noisy, rs);
  std::optional<std::vector<Waveform>> ext;
  if (c.has("paths.ext_noise")) ext = load_corpus(input_path(c, "paths.ext_noise", "--ext-noise"), Role::Noise, rs);

  for (const auto& p : {out, stats, sidecar(out, ".resolved.cfg")}) refuse_existing(p, force);
  if (tc.tup.is_ema()) refuse_existing(teacher_out, force);
  ensure_parent(out);
  ensure_parent(stats);

  StatsFile sink(stats);
  DistillOptions opts;
  opts.on_epoch = std::ref(sink);
  const auto r = distill(teacher.model, X, ext ? &*ext : nullptr, tc, opts);
  save_checkpoint(out, {r.student, r.optimizer, tc.seed, tc.epochs});
  if (tc.tup.is_ema()) save_checkpoint(teacher_out, {r.teacher, std::nullopt, tc.seed, tc.epochs});

  Provenance p;
  p.add_file("teacher_in_sha256", teacher_path);
  p.add("noisy_hash", manifest_hash(noisy));
  if (ext) p.add("ext_noise_hash", manifest_hash(c.str("paths.ext_noise")));
  p.add_file("student_sha256", out);
  if (tc.tup.is_ema()) p.add_file("teacher_out_sha256", teacher_out);
  p.write(sidecar(out, ".resolved.cfg"), c, "distill");
  return 0;
}

std::vector<fs::path> split_stages(const std::string& s) {
  std::vector<fs::path> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const std::string item = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (item.empty()) throw UsageError("empty entry in --stages '" + s + "'");
    out.emplace_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

int cmd_enhance(const RunConfig& c, bool force) {
  const auto stages = split_stages(required_path(c, "paths.stages", "--stages").string());
  for (const auto& st : stages)
    if (!fs::exists(st)) throw Error(ErrorKind::MissingFile, "--stages: no such file " + st.string());
  const fs::path in = input_path(c, "paths.in", "--in");
  const fs::path out = required_path(c, "paths.out", "--out");
  const bool rs = c.boolean("run.resample", false);
  const InferencePlan plan = InferencePlan::from_checkpoints(stages);

  Provenance p;
  for (std::size_t i = 0; i < stages.size(); ++i) p.add_file("stage" + std::to_string(i + 1) + "_sha256", stages[i]);

  if (in.extension() == ".jsonl") {
    const Manifest m = load_manifest(in);
    for (const auto& f : {out / "enhanced.jsonl", out / "enhance_report.json", out / "enhance.resolved.cfg"})
      refuse_existing(f, force);
    const auto report = enhance_batch(plan, m, out, threads_of(c), rs);
    std::ofstream(out / "enhance_report.json") << report.to_json().dump(2) << "\n";
    p.add("input_hash", corpus_hash({&m}));
    p.add("output_hash", corpus_hash({&report.enhanced}));
    p.write(out / "enhance.resolved.cfg", c, "enhance");
    if (!report.failures.empty()) {
      for (const auto& f : report.failures) std::cerr << f.id << ": " << f.error << "\n";
      return kExitRuntime;
    }
    return 0;
  }

  refuse_existing(out, force);
  refuse_existing(sidecar(out, ".resolved.cfg"), force);
  Waveform w = read_wav(in);
  if (rs && w.sample_rate_hz != plan.sample_rate_hz) w = resample(w, plan.sample_rate_hz, w.sample_rate_hz);
  if (w.sample_rate_hz != plan.sample_rate_hz)
    throw Error(ErrorKind::SampleRateMismatch, in.string() + " is " + std::to_string(w.sample_rate_hz) +
                                                   " Hz; pass --resample");
  ensure_parent(out);
  write_wav(out, enhance(plan, w));
  p.add_file("input_sha256", in);
  p.add_file("output_sha256", out);
  p.write(sidecar(out, ".resolved.cfg"), c, "enhance");
  return 0;
}

int cmd_evaluate(const RunConfig& c, bool force) {
  const fs::path ref_path = input_path(c, "paths.ref", "--ref");
  const fs::path deg_path = input_path(c, "paths.deg", "--deg");
  const fs::path report_path = required_path(c, "paths.report", "--report");
  const auto sel = MetricSelection::parse(c.str("eval.metrics", "stoi,sisdr"));
  std::optional<std::map<std::string, double>> pesq;
  if (c.has("paths.pesq_csv")) pesq = read_pesq_csv(c.str("paths.pesq_csv"));
  const Manifest ref = load_manifest(ref_path), deg = load_manifest(deg_path);
  const fs::path csv = sidecar(report_path, ".csv");
  for (const auto& f : {report_path, csv, sidecar(report_path, ".resolved.cfg")}) refuse_existing(f, force);

  MetricReport report = evaluate_manifest(ref, deg, sel, pesq ? &*pesq : nullptr, threads_of(c));
  report.metadata["ref_hash"] = corpus_hash({&ref});
  report.metadata["deg_hash"] = corpus_hash({&deg});
  report.metadata["metrics"] = c.str("eval.metrics", "stoi,sisdr");
  const auto j = report.to_json();
  const std::string problem = check_report_schema(j);
  require(problem.empty(), ErrorKind::InvalidArgument, "report failed its own schema: " + problem);
  ensure_parent(report_path);
  std::ofstream(report_path) << j.dump(2) << "\n";
  std::ofstream(csv) << report.to_csv();

  Provenance p;
  p.add("ref_hash", report.metadata["ref_hash"]);
  p.add("deg_hash", report.metadata["deg_hash"]);
  p.add_file("report_sha256", report_path);
  p.write(sidecar(report_path, ".resolved.cfg"), c, "evaluate");
  if (auto s = report.mean_stoi()) std::cout << "mean_stoi " << *s << "\n";
  if (auto d = report.mean_si_sdr()) std::cout << "mean_si_sdr_db " << *d << "\n";
  for (const auto& f : report.failures) std::cerr << f.id << ": " << f.error << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised teacher-student speech enhancement"};
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth", "generate a synthetic noisy/clean/noise corpus");
  bind(synth, o, "--seed", "synth.seed", "corpus seed");
  bind(synth, o, "--num", "synth.num", "number of utterances");
  bind(synth, o, "--dur", "synth.duration", "seconds per utterance");
  bind(synth, o, "--snr-lo", "synth.snr_lo", "lowest in-domain SNR (dB)");
  bind(synth, o, "--snr-hi", "synth.snr_hi", "highest in-domain SNR (dB)");
  bind(synth, o, "--out", "paths.out", "output directory");

  auto* boot = app.add_subcommand("bootstrap", "train the initial teacher on noisy + extraneous noise");
  auto* dist = app.add_subcommand("distill", "train a student from a teacher checkpoint");
  for (auto* sub : {boot, dist}) {
    bind(sub, o, "--noisy", "paths.noisy", "noisy manifest");
    bind(sub, o, "--ext-noise", "paths.ext_noise", "extraneous noise manifest");
    bind(sub, o, "--out", "paths.out", "output checkpoint");
    bind(sub, o, "--stats", "paths.stats", "per-epoch JSONL (default: <out>.stats.jsonl)");
    bind(sub, o, "--loss", "train.loss", "mae | mse");
    bind(sub, o, "--epochs", "train.epochs", "training epochs");
    bind(sub, o, "--batch-size", "train.batch_size", "rows per batch");
    bind(sub, o, "--length", "train.length", "samples per row");
    bind(sub, o, "--lr", "train.lr", "Adam step size");
    bind(sub, o, "--seed", "train.seed", "training seed");
    bind(sub, o, "--snr-lo", "train.snr_lo", "lowest mixing SNR (dB)");
    bind(sub, o, "--snr-hi", "train.snr_hi", "highest mixing SNR (dB)");
    bind(sub, o, "--model", "model.preset", "tiny | large");
    sub->add_flag_function(
        "--resample", [&o](std::int64_t) { o.flags["run.resample"] = "true"; }, "resample foreign-rate inputs");
  }
  bind(dist, o, "--teacher", "paths.teacher", "teacher checkpoint");
  bind(dist, o, "--strategy", "train.strategy", "ctt1|ctt2|ctt3|nytt1|nytt2|nytt3");
  bind(dist, o, "--tup", "train.tup", "static | ema");
  bind(dist, o, "--gamma", "train.gamma", "EMA weight of the student");

  auto* enh = app.add_subcommand("enhance", "run a chain of checkpoints over a WAV or manifest");
  bind(enh, o, "--stages", "paths.stages", "CKPT[,CKPT...] applied in order");
  bind(enh, o, "--in", "paths.in", "input WAV or .jsonl manifest");
  bind(enh, o, "--out", "paths.out", "output WAV or directory");
  enh->add_flag_function(
      "--resample", [&o](std::int64_t) { o.flags["run.resample"] = "true"; }, "resample foreign-rate inputs");

  auto* ev = app.add_subcommand("evaluate", "score degraded against reference manifests");
  bind(ev, o, "--ref", "paths.ref", "reference manifest");
  bind(ev, o, "--deg", "paths.deg", "degraded/enhanced manifest");
  bind(ev, o, "--metrics", "eval.metrics", "comma list of stoi, sisdr");
  bind(ev, o, "--pesq-csv", "paths.pesq_csv", "external id,pesq values");
  bind(ev, o, "--report", "paths.report", "JSON report path");

  for (auto* sub : {synth, boot, dist, enh, ev}) add_common(sub, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    const RunConfig c = resolve(o);
    if (synth->parsed()) return cmd_synth(c, o.force);
    if (boot->parsed()) return cmd_bootstrap(c, o.force);
    if (dist->parsed()) return cmd_distill(c, o.force);
    if (enh->parsed()) return cmd_enhance(c, o.force);
    return cmd_evaluate(c, o.force);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return is_usage_error(e.kind()) ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
