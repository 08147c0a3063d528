#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dood/checkpoint.hpp"
#include "dood/errors.hpp"

using namespace dood;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dood_ckpt_" + name);
  fs::remove_all(p);
  return p;
}

DatasetStats stats_for(std::size_t c) {
  DatasetStats s;
  for (std::size_t i = 0; i < c; ++i) {
    s.per_channel_min.push_back(-0.1f * static_cast<float>(i) - 0.3f);
    s.per_channel_max.push_back(0.7f + static_cast<float>(i));
    s.per_channel_mean.push_back(0.1f);
    s.per_channel_std.push_back(1.0f / 3.0f);
  }
  s.score_mean_diff = -1.2345678901234;
  s.score_std_diff = 0.1;
  s.has_diff_standardization = true;
  return s;
}

Checkpoint random_checkpoint() {
  Checkpoint c;
  c.config.input_dim = 8;
  c.config.n_input_blocks = c.config.n_output_blocks = 2;
  c.config = c.config.resolved();
  Rng r(1);
  c.params = init_params(c.config, r);
  c.params.for_each_tensor([&](const std::string&, std::span<float> v, std::vector<std::size_t>) {
    for (auto& x : v) x += static_cast<float>(r.normal()) * 1e-3f;
  });
  c.stats = stats_for(8);
  c.extra.set("iterations", 123LL);
  return c;
}

void replace_line(const fs::path& file, const std::string& key, const std::string& value) {
  std::ifstream in(file);
  std::stringstream out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(key + "=", 0) == 0) line = key + "=" + value;
    out << line << "\n";
  }
  in.close();
  std::ofstream(file) << out.str();
}

}  // namespace

TEST_CASE("save and load round trip bit exactly") {
  const auto dir = scratch("rt");
  const auto c = random_checkpoint();
  save_checkpoint(c, dir);
  CHECK(fs::exists(dir / "p0_input_proj_weight.dtf"));
  const auto back = load_checkpoint(dir);
  CHECK(back.config == c.config);
  std::vector<float> a, b;
  c.params.for_each_tensor([&](const std::string&, std::span<const float> v, std::vector<std::size_t>) { a.insert(a.end(), v.begin(), v.end()); });
  back.params.for_each_tensor([&](const std::string&, std::span<const float> v, std::vector<std::size_t>) { b.insert(b.end(), v.begin(), v.end()); });
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  CHECK(back.stats.per_channel_min == c.stats.per_channel_min);
  CHECK(back.stats.per_channel_std == c.stats.per_channel_std);
  CHECK(back.stats.score_mean_diff == c.stats.score_mean_diff);
  CHECK_FALSE(back.stats.has_unc_standardization);
  CHECK(back.schedule.alpha_bar(1000) == c.schedule.alpha_bar(1000));
  CHECK(back.extra.get_int("iterations") == 123);
  fs::remove_all(dir);
}

TEST_CASE("zero-init network still predicts zero after reload") {
  const auto dir = scratch("zero");
  Checkpoint c;
  c.config.input_dim = 4;
  Rng r(2);
  c.params = init_params(c.config, r);
  c.stats = stats_for(4);
  save_checkpoint(c, dir);
  const auto model = load_checkpoint(dir).make_predictor();
  FloatMatrix x = FloatMatrix::Random(3, 4);
  CHECK(model->predict(x, std::vector<int>{5}).isZero(0.0f));
  fs::remove_all(dir);
}

TEST_CASE("edited or damaged checkpoints are rejected") {
  const auto dir = scratch("bad");
  save_checkpoint(random_checkpoint(), dir);

  replace_line(dir / "manifest.txt", "net.hidden_dim", "12");
  CHECK_THROWS_AS(load_checkpoint(dir), DataError);
  replace_line(dir / "manifest.txt", "net.hidden_dim", "8");
  CHECK_NOTHROW(load_checkpoint(dir));

  CHECK(fs::remove(dir / "p4_in0_linear1_weight.dtf"));
  CHECK_THROWS_WITH_AS(load_checkpoint(dir), doctest::Contains("missing tensor"), DataError);
  fs::remove_all(dir);
  CHECK_THROWS_AS(load_checkpoint(dir), DataError);
}

TEST_CASE("oracle checkpoints store the mixture") {
  const auto dir = scratch("oracle");
  Checkpoint c;
  c.model = kModelGmmOracle;
  c.gmm = GmmSpec{2, {GmmComponent{0.25, {0.1, 1.0 / 3.0}, {0.5, 2.0}}, GmmComponent{0.75, {-1.0, 2.0}, {1e-6, 3.0}}}};
  c.stats = stats_for(2);
  save_checkpoint(c, dir);
  const auto back = load_checkpoint(dir);
  CHECK(back.model == kModelGmmOracle);
  CHECK(back.gmm.components[0].mean[1] == 1.0 / 3.0);
  CHECK(back.gmm.components[1].cov_diag[0] == 1e-6);
  CHECK(back.make_predictor()->dim() == 2);
  fs::remove_all(dir);
}
