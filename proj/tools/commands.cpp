#include "commands.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "dood/checkpoint.hpp"
#include "dood/errors.hpp"
#include "dood/metrics.hpp"
#include "dood/scorer.hpp"
#include "dood/stats.hpp"
#include "dood/synth.hpp"
#include "dood/tensor_store.hpp"
#include "dood/trainer.hpp"

#ifndef DOOD_VERSION
#define DOOD_VERSION "0.0.0"
#endif

namespace dood::cli {

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// helpers

/// A single .dtf file, or every .dtf file of a directory in name order.
std::vector<fs::path> tensor_files(const fs::path& p) {
  if (fs::is_regular_file(p)) return {p};
  if (!fs::is_directory(p)) throw DataError("no such file or directory: " + p.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_regular_file() && e.path().extension() == ".dtf") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .dtf tensors in " + p.string());
  return files;
}

std::map<std::string, fs::path> by_stem(const std::vector<fs::path>& files) {
  std::map<std::string, fs::path> out;
  for (const auto& f : files) out[f.stem().string()] = f;
  return out;
}

const fs::path& partner(const std::map<std::string, fs::path>& files, const fs::path& for_file, const char* what) {
  const auto it = files.find(for_file.stem().string());
  if (it == files.end()) throw DataError("no " + std::string(what) + " for " + for_file.filename().string());
  return it->second;
}

std::vector<FeatureMap> load_maps(const std::vector<fs::path>& files) {
  std::vector<FeatureMap> maps;
  maps.reserve(files.size());
  for (const auto& f : files) maps.push_back(FeatureMap::from_tensor(read_tensor(f)));
  return maps;
}

/// Noise stream key of an image: FNV-1a of its file stem, so a map scores the same
/// whether it is scored alone or as part of a directory.
std::uint64_t image_key(const fs::path& file) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : file.stem().string()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Runs fn(0..n-1) on up to `threads` workers; the first exception is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10f", v);
  return buf;
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
  const auto x = text.find('x');
  try {
    std::size_t used_h = 0, used_w = 0;
    if (x == std::string::npos) throw std::invalid_argument(text);
    const auto h = std::stoul(text.substr(0, x), &used_h);
    const auto w = std::stoul(text.substr(x + 1), &used_w);
    if (used_h != x || used_w != text.size() - x - 1 || h == 0 || w == 0) throw std::invalid_argument(text);
    return {h, w};
  } catch (const std::logic_error&) {
    throw CLI::ValidationError("--pixel-size", "expected HxW, got '" + text + "'");
  }
}

std::vector<int> timesteps_flag(const std::string& text) {
  try {
    return parse_timesteps(text);
  } catch (const DataError& e) {
    throw CLI::ValidationError("--timesteps", e.what());
  }
}

/// Records the command, every resolved flag, timing and paths of one run.
class RunRecord {
 public:
  explicit RunRecord(const CLI::App& cmd) : cmd_(cmd), start_(std::chrono::steady_clock::now()) {}

  void input(const fs::path& p) { inputs_.push_back(p.string()); }
  void output(const fs::path& p) { outputs_.push_back(p.string()); }

  void write(const fs::path& file) const {
    KeyValueFile kv;
    kv.set("command", cmd_.get_name());
    kv.set("version", std::string(DOOD_VERSION));
    for (const CLI::Option* opt : cmd_.get_options()) {
      if (opt->get_single_name() == "help") continue;
      std::string value;
      if (opt->get_expected_max() == 0) {
        value = opt->count() > 0 ? "true" : "false";
      } else if (opt->count() > 0) {
        for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
      } else {
        value = opt->get_default_str();
      }
      kv.set("flag." + opt->get_single_name(), value);
    }
    for (std::size_t i = 0; i < inputs_.size(); ++i) kv.set("input." + std::to_string(i), inputs_[i]);
    for (std::size_t i = 0; i < outputs_.size(); ++i) kv.set("output." + std::to_string(i), outputs_[i]);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    kv.set("wall_seconds", secs);
    kv.write(file);
  }

 private:
  const CLI::App& cmd_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::string> inputs_, outputs_;
};

fs::path manifest_beside_file(const fs::path& file) { return file.string() + ".run_manifest.txt"; }
fs::path manifest_in_dir(const fs::path& dir) { return dir / "run_manifest.txt"; }

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + file.string());
}

NormMode norm_flag(const std::string& s) { return parse_norm_mode(s); }

void require_standardization(const DatasetStats& stats) {
  if (!stats.has_diff_standardization || !stats.has_unc_standardization) {
    throw DataError("checkpoint has no score standardization for compounding; train it with --logits");
  }
}

ScoreMap uncertainty_at(const fs::path& logits_file, std::size_t h, std::size_t w) {
  return upsample_scores(logsumexp_uncertainty(read_tensor(logits_file)), h, w);
}

}  // namespace

struct CommandSet::State {
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  // synth
  struct {
    std::string out;
    std::size_t maps = StandardBenchmarkSpec::kMaps;
    std::size_t train_maps = 100;
    std::size_t height = StandardBenchmarkSpec::kHeight;
    std::size_t width = StandardBenchmarkSpec::kWidth;
    double ood_fraction = StandardBenchmarkSpec::kOodFraction;
    double component_std = StandardBenchmarkSpec::kComponentStd;
  } synth;

  // stats
  struct {
    std::string features, out, norm = "minmax";
  } stats;

  // train
  struct {
    std::string features, out, norm = "minmax", stats, logits, oracle, timesteps = "1..25", skip = "concat";
    TrainConfig cfg;
    std::size_t hidden = 0, in_blocks = 6, out_blocks = 6, groups = 0;
    int steps = NoiseSchedule::kDefaultSteps;
    double beta_start = NoiseSchedule::kDefaultBetaStart, beta_end = NoiseSchedule::kDefaultBetaEnd;
    std::size_t log_every = 1000;
    bool standardize = false;
  } train;

  // score
  struct {
    std::string checkpoint, features, out, logits, kind = "directional", timesteps, pixel_size;
    int samples = 1;
    bool heatmap = false;
  } score;

  // eval
  struct {
    std::string scores, masks, out;
    bool per_image = false;
    std::size_t bootstrap = 0;
    double fraction = 0.5;
  } eval;

  // ablate
  struct {
    std::string checkpoint, features, masks, out, logits, timesteps = "1..25";
    std::vector<std::string> kinds = {"directional", "mse-score", "mse-recon"};
    int samples = 1;
  } ablate;
};

namespace {

void add_common(CLI::App* cmd, std::uint64_t& seed, std::size_t* threads) {
  cmd->option_defaults()->always_capture_default();
  cmd->add_option("--seed", seed, "Random seed (default from DOOD_SEED, else 0)")->envname("DOOD_SEED");
  if (threads) cmd->add_option("--threads", *threads, "Worker threads; 1 gives bitwise-reproducible outputs")->check(CLI::PositiveNumber);
}

const std::vector<std::string> kKindNames = {"directional", "mse-score", "mse-recon"};
const std::vector<std::string> kNormNames = {"minmax", "standard"};

// ---------------------------------------------------------------------------
// synth

void run_synth(const CLI::App& cmd, const CommandSet::State& s) {
  const auto& o = s.synth;
  RunRecord rec(cmd);
  const fs::path out(o.out);
  const auto spec = standard_benchmark_spec(o.component_std);

  Rng train_rng = Rng::stream(s.seed, 1);
  Rng bench_rng = Rng::stream(s.seed, 2);
  const auto train = make_inlier_maps(spec.inliers, o.train_maps, o.height, o.width, train_rng);
  const auto bench = make_synthetic_benchmark(spec.inliers, spec.ood_mean, o.maps, o.height, o.width, o.ood_fraction,
                                              bench_rng);

  auto name = [](std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu.dtf", i);
    return std::string(buf);
  };
  for (const char* sub : {"train", "features", "masks"}) fs::create_directories(out / sub);
  for (std::size_t i = 0; i < train.size(); ++i) write_tensor(out / "train" / name(i), train[i].to_tensor());
  for (std::size_t i = 0; i < bench.maps.size(); ++i) {
    write_tensor(out / "features" / name(i), bench.maps[i].to_tensor());
    write_tensor(out / "masks" / name(i), bench.masks[i].to_tensor());
  }

  KeyValueFile kv;
  kv.set("format", std::string("dood-synth"));
  write_gmm(kv, spec.inliers);
  kv.set("ood_mean", join_exact(spec.ood_mean));
  kv.set("ood_fraction", o.ood_fraction);
  kv.write(out / "spec.txt");

  for (const char* sub : {"train", "features", "masks", "spec.txt"}) rec.output(out / sub);
  rec.write(manifest_in_dir(out));
  std::cout << "wrote " << train.size() << " training maps and " << bench.maps.size() << " benchmark maps to "
            << out.string() << "\n";
}

// ---------------------------------------------------------------------------
// stats

void run_stats(const CLI::App& cmd, const CommandSet::State& s) {
  const auto& o = s.stats;
  RunRecord rec(cmd);
  ChannelStatsAccumulator acc;
  for (const auto& f : tensor_files(o.features)) {
    acc.add(FeatureMap::from_tensor(read_tensor(f)));
    rec.input(f);
  }
  const DatasetStats stats = acc.finalize(norm_flag(o.norm));
  KeyValueFile kv;
  kv.set("format", std::string("dood-stats"));
  write_stats(kv, stats);
  kv.write(o.out);
  rec.output(o.out);
  rec.write(manifest_beside_file(o.out));
  std::cout << "channels\t" << stats.channels() << "\nvectors\t" << acc.count() << "\n";
}

// ---------------------------------------------------------------------------
// train

void run_train(const CLI::App& cmd, const CommandSet::State& s) {
  const auto& o = s.train;
  RunRecord rec(cmd);
  const fs::path out(o.out);
  const auto files = tensor_files(o.features);
  for (const auto& f : files) rec.input(f);
  const auto maps = load_maps(files);

  Checkpoint ckpt;
  ckpt.schedule = NoiseSchedule::linear(o.steps, o.beta_start, o.beta_end);
  if (!o.stats.empty()) {
    ckpt.stats = read_stats(KeyValueFile::read(o.stats));
    rec.input(o.stats);
  } else {
    ckpt.stats = compute_stats(maps, norm_flag(o.norm));
  }
  const std::size_t dim = ckpt.stats.channels();

  std::vector<float> loss_trace;
  if (!o.oracle.empty()) {
    ckpt.model = kModelGmmOracle;
    ckpt.gmm = read_gmm(KeyValueFile::read(o.oracle));
    rec.input(o.oracle);
    if (ckpt.gmm.dim != dim) {
      throw DataError("oracle mixture has C=" + std::to_string(ckpt.gmm.dim) + " but the features have C=" +
                      std::to_string(dim));
    }
  } else {
    DenoiserConfig net;
    net.input_dim = dim;
    net.hidden_dim = o.hidden;
    net.n_input_blocks = o.in_blocks;
    net.n_output_blocks = o.out_blocks;
    net.groupnorm_groups = o.groups;
    net.skip = parse_skip_mode(o.skip);
    net = net.resolved();
    net.validate();
    TrainConfig cfg = o.cfg;
    cfg.seed = s.seed;
    cfg.threads = s.threads;
    cfg.validate();

    const FloatMatrix data = assemble_dataset(maps, ckpt.stats);
    std::cerr << "training on " << data.rows() << " vectors of C=" << dim << " for " << cfg.iterations
              << " iterations\n";
    auto result = train(data, cfg, ckpt.schedule, net, [&](std::size_t it, float loss) {
      if (o.log_every > 0 && ((it + 1) % o.log_every == 0 || it + 1 == cfg.iterations)) {
        std::cerr << "iter " << (it + 1) << "\tloss " << loss << "\n";
      }
    });
    ckpt.config = net;
    ckpt.params = std::move(result.params);
    loss_trace = std::move(result.loss_trace);
    ckpt.extra.set("iterations", static_cast<long long>(cfg.iterations));
    ckpt.extra.set("batch_size", static_cast<long long>(cfg.batch_size));
    ckpt.extra.set("learning_rate", cfg.learning_rate);
    ckpt.extra.set("adam_beta1", cfg.beta1);
    ckpt.extra.set("adam_beta2", cfg.beta2);
    ckpt.extra.set("adam_epsilon", cfg.epsilon);
    ckpt.extra.set("norm", std::string(to_string(ckpt.stats.mode)));
    ckpt.extra.set("final_loss", static_cast<double>(loss_trace.empty() ? 0.0f : loss_trace.back()));
  }
  ckpt.extra.set("seed", static_cast<long long>(s.seed));

  if (o.standardize || !o.logits.empty()) {
    ScoreConfig sc;
    sc.timesteps = timesteps_flag(o.timesteps);
    sc.noise_seed = s.seed;
    sc.validate(ckpt.schedule);
    std::vector<DenseTensor> logits;
    if (!o.logits.empty()) {
      const auto logit_files = by_stem(tensor_files(o.logits));
      for (const auto& f : files) {
        const auto& lf = partner(logit_files, f, "logits");
        logits.push_back(read_tensor(lf));
        rec.input(lf);
      }
    }
    const auto model = ckpt.make_predictor();
    compute_score_standardization(maps, *model, ckpt.schedule, sc, ckpt.stats, logits);
  }

  save_checkpoint(ckpt, out);
  if (!loss_trace.empty()) {
    write_tensor(out / "loss_trace.dtf", DenseTensor::from_floats({loss_trace.size(), 1}, loss_trace));
  }
  rec.output(out);
  rec.write(manifest_in_dir(out));
  std::cout << "wrote checkpoint " << out.string() << "\n";
}

// ---------------------------------------------------------------------------
// score

ScoreConfig score_config(const std::string& kind, const std::string& timesteps, std::uint64_t seed, int samples) {
  ScoreConfig cfg;
  cfg.kind = parse_score_kind(kind);
  // the baseline kinds are single-timestep scores; t = 1 unless told otherwise
  if (!timesteps.empty()) {
    cfg.timesteps = timesteps_flag(timesteps);
  } else if (cfg.kind != ScoreKind::Directional) {
    cfg.timesteps = {1};
  }
  cfg.noise_seed = seed;
  cfg.samples_per_timestep = samples;
  return cfg;
}

void run_score(const CLI::App& cmd, const CommandSet::State& s) {
  const auto& o = s.score;
  RunRecord rec(cmd);
  const fs::path out(o.out);
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  rec.input(o.checkpoint);
  const auto model = ckpt.make_predictor();
  const ScoreConfig cfg = score_config(o.kind, o.timesteps, s.seed, o.samples);
  cfg.validate(ckpt.schedule);
  std::optional<std::pair<std::size_t, std::size_t>> pixel;
  if (!o.pixel_size.empty()) pixel = parse_size(o.pixel_size);

  const auto files = tensor_files(o.features);
  std::map<std::string, fs::path> logit_files;
  if (!o.logits.empty()) {
    require_standardization(ckpt.stats);
    logit_files = by_stem(tensor_files(o.logits));
  }
  for (const char* sub : {"patch", "pixel"}) fs::create_directories(out / sub);
  if (o.heatmap) fs::create_directories(out / "heatmap");

  std::atomic<std::size_t> degenerate{0};
  parallel_for(files.size(), s.threads, [&](std::size_t i) {
    const auto& f = files[i];
    const FeatureMap fmap = FeatureMap::from_tensor(read_tensor(f));
    if (fmap.channels != ckpt.dim()) {
      throw DataError(f.filename().string() + ": feature map has C=" + std::to_string(fmap.channels) +
                      " channels but the checkpoint expects C=" + std::to_string(ckpt.dim()));
    }
    const ScoreMap patch = score_feature_map(fmap, *model, ckpt.schedule, cfg, ckpt.stats, image_key(f));
    degenerate += patch.degenerate;
    const auto [h, w] = pixel.value_or(std::make_pair(fmap.height, fmap.width));
    ScoreMap px = upsample_scores(patch, h, w);
    if (!o.logits.empty()) px = compound(px, uncertainty_at(partner(logit_files, f, "logits"), h, w), ckpt.stats);
    const std::string name = f.stem().string() + ".dtf";
    write_tensor(out / "patch" / name, patch.to_tensor());
    write_tensor(out / "pixel" / name, px.to_tensor());
    if (o.heatmap) write_tensor(out / "heatmap" / name, heatmap(px));
  });

  for (const auto& f : files) rec.input(f);
  for (const auto& [stem, f] : logit_files) rec.input(f);
  rec.output(out);
  rec.write(manifest_in_dir(out));
  if (degenerate > 0) std::cerr << "warning: " << degenerate << " zero-norm noise predictions scored as 0\n";
  std::cout << "scored " << files.size() << " maps into " << out.string() << "\n";
}

// ---------------------------------------------------------------------------
// eval

std::string result_row(const std::string& scope, const std::string& name, const EvalResult& r) {
  return scope + "\t" + name + "\t" + fmt(r.ap) + "\t" + fmt(r.fpr95) + "\t" + std::to_string(r.n_pos) + "\t" +
         std::to_string(r.n_neg) + "\t" + std::to_string(r.n_ignored) + "\n";
}

void run_eval(const CLI::App& cmd, const CommandSet::State& s) {
  const auto& o = s.eval;
  RunRecord rec(cmd);
  const auto score_files = tensor_files(o.scores);
  const auto mask_files = by_stem(tensor_files(o.masks));

  std::vector<PixelPool> pools(score_files.size());
  std::vector<std::string> names;
  for (std::size_t i = 0; i < score_files.size(); ++i) {
    const auto& mf = partner(mask_files, score_files[i], "mask");
    pools[i].add(ScoreMap::from_tensor(read_tensor(score_files[i])), OoDMask::from_tensor(read_tensor(mf)));
    names.push_back(score_files[i].stem().string());
    rec.input(score_files[i]);
    rec.input(mf);
  }

  std::ostringstream report;
  report << "scope\tname\tap\tfpr95\tn_pos\tn_neg\tn_ignored\n";
  if (o.per_image) {
    for (std::size_t i = 0; i < pools.size(); ++i) {
      const auto pos = std::count(pools[i].labels().begin(), pools[i].labels().end(), kMaskOoD);
      const auto neg = static_cast<std::ptrdiff_t>(pools[i].labels().size()) - pos;
      if (pos == 0 || neg == 0) {
        // a single-class image has no ranking to measure
        report << "image\t" << names[i] << "\t-\t-\t" << pos << "\t" << neg << "\t" << pools[i].n_ignored() << "\n";
      } else {
        report << result_row("image", names[i], pools[i].evaluate());
      }
    }
  }
  PixelPool all;
  for (const auto& p : pools) all.add(p);
  report << result_row("pooled", "all", all.evaluate());
  if (o.bootstrap > 0) {
    const auto b = bootstrap(pools, o.bootstrap, o.fraction, s.seed);
    const std::string folds = std::to_string(o.bootstrap);
    report << "bootstrap_mean\t" << folds << "\t" << fmt(b.ap_mean) << "\t" << fmt(b.fpr95_mean) << "\t-\t-\t-\n";
    report << "bootstrap_std\t" << folds << "\t" << fmt(b.ap_std) << "\t" << fmt(b.fpr95_std) << "\t-\t-\t-\n";
  }

  write_text(o.out, report.str());
  rec.output(o.out);
  rec.write(manifest_beside_file(o.out));
  std::cout << report.str();
}

// ---------------------------------------------------------------------------
// ablate

void run_ablate(const CLI::App& cmd, const CommandSet::State& s) {
  const auto& o = s.ablate;
  RunRecord rec(cmd);
  const fs::path out(o.out);
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  rec.input(o.checkpoint);
  const auto model = ckpt.make_predictor();
  const auto timesteps = timesteps_flag(o.timesteps);
  std::vector<ScoreKind> kinds;
  for (const auto& k : o.kinds) kinds.push_back(parse_score_kind(k));

  const auto files = tensor_files(o.features);
  const auto mask_files = by_stem(tensor_files(o.masks));
  std::vector<OoDMask> masks;
  for (const auto& f : files) {
    const auto& mf = partner(mask_files, f, "mask");
    masks.push_back(OoDMask::from_tensor(read_tensor(mf)));
    rec.input(f);
    rec.input(mf);
  }
  std::map<std::string, fs::path> logit_files;
  if (!o.logits.empty()) {
    require_standardization(ckpt.stats);
    logit_files = by_stem(tensor_files(o.logits));
  }

  // maps[i][ti] for one kind, already at mask resolution
  auto score_all = [&](ScoreKind kind) {
    ScoreConfig cfg;
    cfg.kind = kind;
    cfg.timesteps = timesteps;
    cfg.noise_seed = s.seed;
    cfg.samples_per_timestep = o.samples;
    std::vector<std::vector<ScoreMap>> maps(files.size());
    parallel_for(files.size(), s.threads, [&](std::size_t i) {
      const FeatureMap fmap = FeatureMap::from_tensor(read_tensor(files[i]));
      maps[i] = per_timestep_maps(fmap, *model, ckpt.schedule, cfg, ckpt.stats, image_key(files[i]));
    });
    return maps;
  };
  auto at_mask = [&](const ScoreMap& m, std::size_t i) { return upsample_scores(m, masks[i].height, masks[i].width); };

  std::ostringstream table;
  table << "kind\ttimestep\tap\tfpr95\n";
  std::vector<float> curve;
  std::vector<std::vector<ScoreMap>> directional;
  for (ScoreKind kind : kinds) {
    std::cerr << "scoring " << to_string(kind) << " at " << timesteps.size() << " timesteps\n";
    auto maps = score_all(kind);
    for (std::size_t ti = 0; ti < timesteps.size(); ++ti) {
      PixelPool pool;
      for (std::size_t i = 0; i < files.size(); ++i) pool.add(at_mask(maps[i][ti], i), masks[i]);
      const auto r = pool.evaluate();
      table << to_string(kind) << "\t" << timesteps[ti] << "\t" << fmt(r.ap) << "\t" << fmt(r.fpr95) << "\n";
      curve.push_back(static_cast<float>(r.ap));
    }
    if (kind == ScoreKind::Directional) directional = std::move(maps);
  }

  if (directional.empty()) directional = score_all(ScoreKind::Directional);
  std::vector<ScoreMap> aggregated;
  for (std::size_t i = 0; i < files.size(); ++i) {
    aggregated.push_back(at_mask(aggregate_timesteps(directional[i], timesteps, ckpt.schedule), i));
  }
  const auto agg = evaluate_pooled(aggregated, masks);
  table << "directional\taggregated\t" << fmt(agg.ap) << "\t" << fmt(agg.fpr95) << "\n";

  if (!o.logits.empty()) {
    // compounding ablation: uncertainty alone and its average with the aggregated score
    std::vector<ScoreMap> unc, comp;
    for (std::size_t i = 0; i < files.size(); ++i) {
      unc.push_back(uncertainty_at(partner(logit_files, files[i], "logits"), masks[i].height, masks[i].width));
      comp.push_back(compound(aggregated[i], unc.back(), ckpt.stats));
      rec.input(partner(logit_files, files[i], "logits"));
    }
    const auto ru = evaluate_pooled(unc, masks);
    const auto rc = evaluate_pooled(comp, masks);
    table << "uncertainty\t-\t" << fmt(ru.ap) << "\t" << fmt(ru.fpr95) << "\n";
    table << "compound\taggregated\t" << fmt(rc.ap) << "\t" << fmt(rc.fpr95) << "\n";
  }

  fs::create_directories(out);
  write_text(out / "ablation.tsv", table.str());
  write_tensor(out / "ap_curve.dtf", DenseTensor::from_floats({kinds.size(), timesteps.size()}, curve));
  rec.output(out / "ablation.tsv");
  rec.output(out / "ap_curve.dtf");
  rec.write(manifest_in_dir(out));
  std::cout << table.str();
}

}  // namespace

// ---------------------------------------------------------------------------

CommandSet::CommandSet(CLI::App& app) : state_(std::make_unique<State>()) {
  State& s = *state_;
  auto add = [&](CLI::App* cmd, void (*fn)(const CLI::App&, const State&)) {
    runners_.emplace_back(cmd, [cmd, fn, this] { fn(*cmd, *state_); });
  };

  {
    auto* c = app.add_subcommand("synth", "Write the synthetic mixture benchmark");
    add_common(c, s.seed, nullptr);
    c->add_option("--out", s.synth.out, "Output directory")->required();
    c->add_option("--maps", s.synth.maps, "Benchmark maps with a planted OoD region")->check(CLI::PositiveNumber);
    c->add_option("--train-maps", s.synth.train_maps, "Inlier-only training maps");
    c->add_option("--height", s.synth.height, "Map height in patches")->check(CLI::PositiveNumber);
    c->add_option("--width", s.synth.width, "Map width in patches")->check(CLI::PositiveNumber);
    c->add_option("--ood-fraction", s.synth.ood_fraction, "Share of each map covered by the OoD region")
        ->check(CLI::Range(0.0, 1.0));
    c->add_option("--component-std", s.synth.component_std, "Standard deviation of each inlier component")
        ->check(CLI::PositiveNumber);
    add(c, run_synth);
  }
  {
    auto* c = app.add_subcommand("stats", "Compute per-channel normalization statistics");
    add_common(c, s.seed, nullptr);
    c->add_option("--features", s.stats.features, "Feature map file or directory")->required();
    c->add_option("--out", s.stats.out, "Output statistics file")->required();
    c->add_option("--norm", s.stats.norm, "Normalization")->check(CLI::IsMember(kNormNames));
    add(c, run_stats);
  }
  {
    auto& t = s.train;
    auto* c = app.add_subcommand("train", "Train the MLP denoiser on in-distribution feature maps");
    add_common(c, s.seed, &s.threads);
    c->add_option("--features", t.features, "Feature map file or directory")->required();
    c->add_option("--out", t.out, "Checkpoint directory")->required();
    c->add_option("--norm", t.norm, "Normalization")->check(CLI::IsMember(kNormNames));
    c->add_option("--stats", t.stats, "Use these statistics instead of computing them")->check(CLI::ExistingFile);
    c->add_option("--iterations", t.cfg.iterations, "Optimizer steps");
    c->add_option("--batch-size", t.cfg.batch_size, "Vectors per step")->check(CLI::PositiveNumber);
    c->add_option("--lr", t.cfg.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber);
    c->add_option("--hidden-dim", t.hidden, "Hidden width (0: input dimension)");
    c->add_option("--input-blocks", t.in_blocks, "Residual blocks before the skips");
    c->add_option("--output-blocks", t.out_blocks, "Residual blocks after the skips");
    c->add_option("--groups", t.groups, "GroupNorm groups (0: automatic)");
    c->add_option("--skip", t.skip, "Skip connection mode")->check(CLI::IsMember({"concat", "add"}));
    c->add_option("--steps", t.steps, "Diffusion steps T")->check(CLI::PositiveNumber);
    c->add_option("--beta-start", t.beta_start, "First noise variance");
    c->add_option("--beta-end", t.beta_end, "Last noise variance");
    c->add_option("--log-every", t.log_every, "Loss logging interval (0: silent)");
    c->add_flag("--standardize", t.standardize, "Store training-set score moments for compounding");
    c->add_option("--logits", t.logits, "Training logits (implies --standardize)");
    c->add_option("--timesteps", t.timesteps, "Timesteps used for the score moments");
    c->add_option("--oracle", t.oracle, "Write an analytic checkpoint for this synth spec instead of training")
        ->check(CLI::ExistingFile);
    add(c, run_train);
  }
  {
    auto& o = s.score;
    auto* c = app.add_subcommand("score", "Score feature maps with a checkpoint");
    add_common(c, s.seed, &s.threads);
    c->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
    c->add_option("--features", o.features, "Feature map file or directory")->required();
    c->add_option("--out", o.out, "Output directory")->required();
    c->add_option("--logits", o.logits, "Logits file or directory; compounds with the uncertainty score");
    c->add_option("--score-kind", o.kind, "Score")->check(CLI::IsMember(kKindNames));
    c->add_option("--timesteps", o.timesteps, "Timesteps, a..b or a list (default 1..25, or 1 for baselines)");
    c->add_option("--samples", o.samples, "Noise samples per timestep")->check(CLI::PositiveNumber);
    c->add_option("--pixel-size", o.pixel_size, "Pixel-resolution output size HxW (default: patch grid)");
    c->add_flag("--heatmap", o.heatmap, "Also write 8-bit heat maps");
    add(c, run_score);
  }
  {
    auto& o = s.eval;
    auto* c = app.add_subcommand("eval", "Evaluate score maps against OoD masks");
    add_common(c, s.seed, nullptr);
    c->add_option("--scores", o.scores, "Score map file or directory")->required();
    c->add_option("--masks", o.masks, "Mask directory, matched by file stem")->required();
    c->add_option("--out", o.out, "Report file")->required();
    c->add_flag("--per-image", o.per_image, "Also report every image");
    c->add_option("--bootstrap", o.bootstrap, "Random image subsets for mean and std (0: off)");
    c->add_option("--fraction", o.fraction, "Share of images in each subset")->check(CLI::Range(0.0, 1.0));
    add(c, run_eval);
  }
  {
    auto& o = s.ablate;
    auto* c = app.add_subcommand("ablate", "Per-timestep comparison of score kinds");
    add_common(c, s.seed, &s.threads);
    c->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
    c->add_option("--features", o.features, "Feature map directory")->required();
    c->add_option("--masks", o.masks, "Mask directory, matched by file stem")->required();
    c->add_option("--out", o.out, "Output directory")->required();
    c->add_option("--kinds", o.kinds, "Score kinds")->delimiter(',')->check(CLI::IsMember(kKindNames));
    c->add_option("--timesteps", o.timesteps, "Timesteps, a..b or a list");
    c->add_option("--samples", o.samples, "Noise samples per timestep")->check(CLI::PositiveNumber);
    c->add_option("--logits", o.logits, "Logits directory; adds uncertainty and compound rows");
    add(c, run_ablate);
  }
}

CommandSet::~CommandSet() = default;

void CommandSet::run() const {
  for (const auto& [cmd, fn] : runners_) {
    if (cmd->parsed()) {
      fn();
      return;
    }
  }
  throw CLI::CallForHelp();
}

}  // namespace dood::cli
