#include "dood/checkpoint.hpp"

#include <algorithm>
#include <sstream>

#include "dood/errors.hpp"
#include "dood/tensor_store.hpp"

namespace dood {

namespace fs = std::filesystem;

namespace {

constexpr int kCheckpointVersion = 1;

std::string tensor_file(std::size_t index, const std::string& role) {
  return "p" + std::to_string(index) + "_" + role + ".dtf";
}

}  // namespace

std::string join_exact(std::span<const double> values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format_exact(values[i]);
  }
  return out;
}

std::vector<double> split_doubles(const std::string& text) {
  std::vector<double> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(item));
  return out;
}

void write_gmm(KeyValueFile& kv, const GmmSpec& spec, const std::string& prefix) {
  kv.set(prefix + "dim", static_cast<long long>(spec.dim));
  kv.set(prefix + "components", static_cast<long long>(spec.components.size()));
  for (std::size_t k = 0; k < spec.components.size(); ++k) {
    const auto& c = spec.components[k];
    const std::string p = prefix + std::to_string(k) + ".";
    kv.set(p + "weight", c.weight);
    kv.set(p + "mean", join_exact(c.mean));
    kv.set(p + "cov_diag", join_exact(c.cov_diag));
  }
}

GmmSpec read_gmm(const KeyValueFile& kv, const std::string& prefix) {
  GmmSpec spec;
  spec.dim = static_cast<std::size_t>(kv.get_int(prefix + "dim"));
  const auto k = kv.get_int(prefix + "components");
  if (k < 1) throw DataError("mixture needs at least one component");
  for (long long i = 0; i < k; ++i) {
    const std::string p = prefix + std::to_string(i) + ".";
    spec.components.push_back({kv.get_double(p + "weight"), split_doubles(kv.get(p + "mean")),
                               split_doubles(kv.get(p + "cov_diag"))});
  }
  spec.validate();
  return spec;
}

void write_stats(KeyValueFile& kv, const DatasetStats& s, const std::string& prefix) {
  kv.set(prefix + "mode", std::string(to_string(s.mode)));
  kv.set(prefix + "channels", static_cast<long long>(s.channels()));
  kv.set(prefix + "min", s.per_channel_min);
  kv.set(prefix + "max", s.per_channel_max);
  kv.set(prefix + "mean", s.per_channel_mean);
  kv.set(prefix + "std", s.per_channel_std);
  if (s.has_diff_standardization) {
    kv.set(prefix + "score_mean_diff", s.score_mean_diff);
    kv.set(prefix + "score_std_diff", s.score_std_diff);
  }
  if (s.has_unc_standardization) {
    kv.set(prefix + "score_mean_unc", s.score_mean_unc);
    kv.set(prefix + "score_std_unc", s.score_std_unc);
  }
}

DatasetStats read_stats(const KeyValueFile& kv, const std::string& prefix) {
  DatasetStats s;
  s.mode = parse_norm_mode(kv.get(prefix + "mode"));
  s.per_channel_min = kv.get_floats(prefix + "min");
  s.per_channel_max = kv.get_floats(prefix + "max");
  s.per_channel_mean = kv.get_floats(prefix + "mean");
  s.per_channel_std = kv.get_floats(prefix + "std");
  if (static_cast<long long>(s.channels()) != kv.get_int(prefix + "channels")) {
    throw DataError("stats channel count disagrees with the stored vectors");
  }
  if (kv.has(prefix + "score_mean_diff")) {
    s.score_mean_diff = kv.get_double(prefix + "score_mean_diff");
    s.score_std_diff = kv.get_double(prefix + "score_std_diff");
    s.has_diff_standardization = true;
  }
  if (kv.has(prefix + "score_mean_unc")) {
    s.score_mean_unc = kv.get_double(prefix + "score_mean_unc");
    s.score_std_unc = kv.get_double(prefix + "score_std_unc");
    s.has_unc_standardization = true;
  }
  s.validate();
  return s;
}

std::size_t Checkpoint::dim() const { return model == kModelMlp ? config.input_dim : gmm.dim; }

std::unique_ptr<NoisePredictor> Checkpoint::make_predictor() const {
  if (model == kModelMlp) return std::make_unique<MlpDenoiser>(config, params);
  if (model == kModelGmmOracle) return std::make_unique<GmmOracle>(gmm.normalized(stats), schedule);
  throw DataError("unknown model kind '" + model + "'");
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  if (ckpt.stats.channels() != ckpt.dim()) {
    throw DataError("stats have C=" + std::to_string(ckpt.stats.channels()) + " but the model has C=" +
                    std::to_string(ckpt.dim()));
  }
  fs::create_directories(dir);
  KeyValueFile kv;
  kv.set("format", std::string("dood-checkpoint"));
  kv.set("version", static_cast<long long>(kCheckpointVersion));
  kv.set("model", ckpt.model);
  kv.set("schedule.steps", static_cast<long long>(ckpt.schedule.steps()));
  kv.set("schedule.beta_start", ckpt.schedule.beta_start());
  kv.set("schedule.beta_end", ckpt.schedule.beta_end());

  if (ckpt.model == kModelMlp) {
    const auto cfg = ckpt.config.resolved();
    cfg.validate();
    kv.set("net.input_dim", static_cast<long long>(cfg.input_dim));
    kv.set("net.hidden_dim", static_cast<long long>(cfg.hidden_dim));
    kv.set("net.n_input_blocks", static_cast<long long>(cfg.n_input_blocks));
    kv.set("net.n_output_blocks", static_cast<long long>(cfg.n_output_blocks));
    kv.set("net.groupnorm_groups", static_cast<long long>(cfg.groupnorm_groups));
    kv.set("net.skip", std::string(to_string(cfg.skip)));
    std::size_t index = 0;
    ckpt.params.for_each_tensor([&](const std::string& role, std::span<const float> vals, std::vector<std::size_t> shape) {
      std::vector<std::uint64_t> dims(shape.begin(), shape.end());
      write_tensor(dir / tensor_file(index++, role), DenseTensor::from_floats(dims, {vals.begin(), vals.end()}));
    });
    kv.set("net.tensors", static_cast<long long>(index));
  } else if (ckpt.model == kModelGmmOracle) {
    write_gmm(kv, ckpt.gmm);
  } else {
    throw DataError("unknown model kind '" + ckpt.model + "'");
  }
  write_stats(kv, ckpt.stats);
  for (const auto& [k, v] : ckpt.extra.entries()) kv.set("extra." + k, v);
  kv.write(dir / "manifest.txt");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.txt";
  if (!fs::exists(manifest)) throw DataError("no checkpoint manifest at " + manifest.string());
  const auto kv = KeyValueFile::read(manifest);
  if (kv.get("format") != "dood-checkpoint") throw DataError(manifest.string() + " is not a checkpoint manifest");
  if (kv.get_int("version") != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + kv.get("version"));
  }

  Checkpoint ckpt;
  ckpt.model = kv.get("model");
  ckpt.schedule = NoiseSchedule::linear(static_cast<int>(kv.get_int("schedule.steps")),
                                        kv.get_double("schedule.beta_start"), kv.get_double("schedule.beta_end"));
  ckpt.stats = read_stats(kv);

  if (ckpt.model == kModelMlp) {
    DenoiserConfig cfg;
    cfg.input_dim = static_cast<std::size_t>(kv.get_int("net.input_dim"));
    cfg.hidden_dim = static_cast<std::size_t>(kv.get_int("net.hidden_dim"));
    cfg.n_input_blocks = static_cast<std::size_t>(kv.get_int("net.n_input_blocks"));
    cfg.n_output_blocks = static_cast<std::size_t>(kv.get_int("net.n_output_blocks"));
    cfg.groupnorm_groups = static_cast<std::size_t>(kv.get_int("net.groupnorm_groups"));
    cfg.skip = parse_skip_mode(kv.get("net.skip"));
    cfg.validate();
    ckpt.config = cfg;
    ckpt.params = DenoiserParams::zeros(cfg);

    std::size_t index = 0;
    ckpt.params.for_each_tensor([&](const std::string& role, std::span<float> vals, std::vector<std::size_t> shape) {
      const fs::path file = dir / tensor_file(index++, role);
      if (!fs::exists(file)) throw DataError("checkpoint is missing tensor " + file.filename().string());
      const DenseTensor t = read_tensor(file);
      const std::vector<std::uint64_t> expected(shape.begin(), shape.end());
      if (t.dtype() != DType::Float32 || t.shape() != expected) {
        std::string want, got;
        for (auto d : expected) want += (want.empty() ? "" : "x") + std::to_string(d);
        for (auto d : t.shape()) got += (got.empty() ? "" : "x") + std::to_string(d);
        throw DataError("tensor " + file.filename().string() + " has shape " + got + " but the manifest implies " + want);
      }
      std::copy(t.floats().begin(), t.floats().end(), vals.begin());
    });
    if (kv.get_int("net.tensors") != static_cast<long long>(index)) {
      throw DataError("manifest lists " + kv.get("net.tensors") + " tensors but the config implies " +
                      std::to_string(index));
    }
  } else if (ckpt.model == kModelGmmOracle) {
    ckpt.gmm = read_gmm(kv);
  } else {
    throw DataError("unknown model kind '" + ckpt.model + "'");
  }
  if (ckpt.stats.channels() != ckpt.dim()) {
    throw DataError("stats have C=" + std::to_string(ckpt.stats.channels()) + " but the model has C=" +
                    std::to_string(ckpt.dim()));
  }
  for (const auto& [k, v] : kv.entries()) {
    if (k.rfind("extra.", 0) == 0) ckpt.extra.set(k.substr(6), v);
  }
  return ckpt;
}

}  // namespace dood
