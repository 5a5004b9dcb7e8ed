// Short real training runs on the default synthetic dataset.

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "dsg/checkpoint.hpp"
#include "dsg/data.hpp"
#include "dsg/train.hpp"

using namespace dsg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const fs::path& root() {
  static const fs::path p = [] {
    const fs::path d = fs::temp_directory_path() / "dsg_test_smoke";
    fs::remove_all(d);
    fs::create_directories(d);
    generate_domain_dataset(d / "data", GenerateOptions{});
    return d;
  }();
  return p;
}

fs::path data() { return root() / "data"; }

TrainConfig tiny_config(std::uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  c.epochs = 2;
  c.base_channels = 4;
  c.low_channels = 8;
  c.num_fusion_blocks = 1;
  c.attn_dim = 8;
  return c;
}

// 10-epoch runs of the default network, shared by the tests below.
const TrainResult& short_run(std::uint64_t seed) {
  static std::map<std::uint64_t, TrainResult> cache;
  auto it = cache.find(seed);
  if (it == cache.end()) {
    TrainConfig c;
    c.seed = seed;
    c.epochs = 10;
    it = cache.emplace(seed, train(c, data(), root() / ("short_" + std::to_string(seed)))).first;
  }
  return it->second;
}

double mean(const std::vector<double>& v, std::size_t from, std::size_t to) {
  double s = 0;
  for (std::size_t i = from; i < to; ++i) s += v[i];
  return s / double(to - from);
}

}  // namespace

TEST(TrainingSmoke, LossFallsDuringFirstEpoch) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const TrainResult& r = short_run(seed);
    const std::size_t per_epoch = r.history.at(0).iter;
    ASSERT_GE(per_epoch, 6u);
    for (std::size_t i = 0; i < per_epoch; ++i) ASSERT_TRUE(std::isfinite(r.iteration_losses[i]));
    EXPECT_LT(mean(r.iteration_losses, per_epoch - 3, per_epoch), mean(r.iteration_losses, 0, 3)) << "seed " << seed;
  }
}

TEST(TrainingSmoke, TrainSplitScoresAtLeastValidation) {
  const DatasetManifest m = DatasetManifest::load(data());
  const std::vector<int> trained{0, 1, 2};
  const auto train_split = load_split(data(), m, "train", trained);
  const auto val_split = load_split(data(), m, "val", trained);
  for (std::uint64_t seed : {1, 2, 3}) {
    short_run(seed);
    LoadedCheckpoint ck = load_checkpoint(root() / ("short_" + std::to_string(seed)) / "last.ckpt");
    EvalOptions o;
    o.scales = {0.5, 1.0};
    const double on_train = *evaluate(ck.model, train_split, o).overall_result.mean;
    const double on_val = *evaluate(ck.model, val_split, o).overall_result.mean;
    std::cout << "seed " << seed << ": train " << on_train << ", val " << on_val << "\n";
    EXPECT_GE(on_train, on_val) << "seed " << seed;
    EXPECT_GT(on_val, 0.5) << "seed " << seed;
  }
}

TEST(TrainingSmoke, ZeroLearningRateLeavesParameters) {
  const DatasetManifest m = DatasetManifest::load(data());
  const auto samples = load_split(data(), m, "train", {0, 1});
  TrainConfig c = tiny_config(7);
  Model<float> model(c.model_config(m.num_domains()));
  std::map<std::string, Tensor> before;
  for (auto& [name, t] : model.trainable()) before[name] = *t;

  std::vector<std::pair<int, std::vector<int>>> by_domain(2);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    by_domain[samples[i].domain].first = samples[i].domain;
    by_domain[samples[i].domain].second.push_back(int(i));
  }
  const DomainBatchScheduler sched(by_domain, c.batch_size, c.seed);
  Trainer trainer(model, c);
  for (const DomainBatch& b : sched.epoch(0)) {
    const auto [images, masks] = stack_samples(samples, b.samples);
    ASSERT_TRUE(std::isfinite(trainer.step(images, masks, b.domain, 0.0)));
  }
  for (auto& [name, t] : model.trainable()) EXPECT_EQ(*t, before[name]) << name;
  // running statistics still move; only the learning rate was zeroed
  EXPECT_GT(model.norm("stem.norm").updates[0], 0);
}

TEST(TrainingSmoke, SameSeedGivesIdenticalRuns) {
  const fs::path a = root() / "det_a", b = root() / "det_b";
  train(tiny_config(11), data(), a);
  train(tiny_config(11), data(), b);
  for (const char* f : {"metrics.csv", "last.ckpt", "best.ckpt", "config.txt"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  const fs::path c = root() / "det_c";
  train(tiny_config(12), data(), c);
  EXPECT_NE(slurp(a / "last.ckpt"), slurp(c / "last.ckpt"));
}
