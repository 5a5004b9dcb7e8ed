#include "dsg/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dsg/checkpoint.hpp"
#include "dsg/data.hpp"

namespace dsg {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(base_lr > 0)) fail("base_lr must be positive");
  if (!(poly_exponent > 0)) fail("poly_exponent must be positive");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum must be in [0, 1)");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 1) fail("epochs must be >= 1");
  if (!(aux_weight >= 0)) fail("aux_weight must be non-negative");
  if (crop_size < 0 || crop_size % 2) fail("crop_size must be 0 or a positive even number");
  validate_scales(scales_train);
  if (heldout != "last" && heldout != "none") {
    std::size_t used = 0;
    int v = -1;
    try {
      v = std::stoi(heldout, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != heldout.size() || v < 0) fail("heldout must be 'last', 'none' or a domain index");
  }
  model_config(1).validate();
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  static const std::set<std::string> known = {
      "base_lr",      "poly_exponent", "momentum",      "batch_size",        "epochs",   "seed",
      "norm",         "scales_train",  "aux_weight",    "crop_size",         "heldout",  "base_channels",
      "low_channels", "fusion_blocks", "attn_dim"};
  for (const auto& [k, v] : kv.entries()) {
    if (!known.count(k)) throw std::invalid_argument("train config: unknown key '" + k + "'");
  }
  TrainConfig c;
  c.base_lr = kv.number("base_lr", c.base_lr);
  c.poly_exponent = kv.number("poly_exponent", c.poly_exponent);
  c.momentum = kv.number("momentum", c.momentum);
  c.batch_size = static_cast<int>(kv.integer("batch_size", c.batch_size));
  c.epochs = static_cast<int>(kv.integer("epochs", c.epochs));
  const long long seed = kv.integer("seed", 0);
  if (seed < 0) throw std::invalid_argument("train config: seed must be non-negative");
  c.seed = static_cast<std::uint64_t>(seed);
  c.norm_kind = parse_norm_kind(kv.str("norm", to_string(c.norm_kind)));
  if (kv.has("scales_train")) c.scales_train = parse_scales(kv.str("scales_train"));
  c.aux_weight = kv.number("aux_weight", c.aux_weight);
  c.crop_size = static_cast<int>(kv.integer("crop_size", c.crop_size));
  c.heldout = kv.str("heldout", c.heldout);
  c.base_channels = static_cast<int>(kv.integer("base_channels", c.base_channels));
  c.low_channels = static_cast<int>(kv.integer("low_channels", c.low_channels));
  c.num_fusion_blocks = static_cast<int>(kv.integer("fusion_blocks", c.num_fusion_blocks));
  c.attn_dim = static_cast<int>(kv.integer("attn_dim", c.attn_dim));
  c.validate();
  return c;
}

KeyValues TrainConfig::to_key_values() const {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string scales;
  for (std::size_t i = 0; i < scales_train.size(); ++i) scales += (i ? "," : "") + num(scales_train[i]);
  KeyValues kv;
  kv.set("base_lr", num(base_lr));
  kv.set("poly_exponent", num(poly_exponent));
  kv.set("momentum", num(momentum));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("epochs", std::to_string(epochs));
  kv.set("seed", std::to_string(seed));
  kv.set("norm", to_string(norm_kind));
  kv.set("scales_train", scales);
  kv.set("aux_weight", num(aux_weight));
  kv.set("crop_size", std::to_string(crop_size));
  kv.set("heldout", heldout);
  kv.set("base_channels", std::to_string(base_channels));
  kv.set("low_channels", std::to_string(low_channels));
  kv.set("fusion_blocks", std::to_string(num_fusion_blocks));
  kv.set("attn_dim", std::to_string(attn_dim));
  return kv;
}

ModelConfig TrainConfig::model_config(int num_domains) const {
  ModelConfig m;
  m.base_channels = base_channels;
  m.low_channels = low_channels;
  m.num_fusion_blocks = num_fusion_blocks;
  m.attn_dim = attn_dim;
  m.norm_kind = norm_kind;
  m.num_domains = num_domains;
  m.init_seed = seed;
  return m;
}

int TrainConfig::heldout_domain(int num_domains) const {
  if (heldout == "none") return -1;
  if (heldout == "last") return num_domains >= 2 ? num_domains - 1 : -1;
  const int d = std::stoi(heldout);
  if (d >= num_domains) {
    throw std::invalid_argument("heldout domain " + heldout + " but the dataset has " + std::to_string(num_domains) +
                                " domains");
  }
  return d;
}

double poly_lr(double base_lr, long long iter, long long max_iter, double exponent) {
  if (max_iter <= 0) throw std::invalid_argument("poly_lr: max_iter must be positive");
  if (iter < 0 || iter > max_iter) {
    throw std::out_of_range("poly_lr: iter " + std::to_string(iter) + " outside [0, " + std::to_string(max_iter) +
                            "]");
  }
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), exponent);
}

template <typename T>
void sgd_momentum_step(BasicTensor<T>& param, const BasicTensor<T>& grad, BasicTensor<T>& velocity, T lr,
                       T momentum) {
  if (param.shape() != grad.shape() || param.shape() != velocity.shape()) {
    throw ShapeError("sgd_momentum_step: param " + shape_str(param.shape()) + ", grad " + shape_str(grad.shape()) +
                     ", velocity " + shape_str(velocity.shape()));
  }
  T* p = param.ptr();
  T* v = velocity.ptr();
  const T* g = grad.ptr();
  for (std::size_t i = 0; i < param.numel(); ++i) {
    v[i] = momentum * v[i] + g[i];
    p[i] -= lr * v[i];
  }
}

template void sgd_momentum_step<float>(Tensor&, const Tensor&, Tensor&, float, float);
template void sgd_momentum_step<double>(TensorD&, const TensorD&, TensorD&, double, double);

Trainer::Trainer(Model<float>& model, const TrainConfig& config) : model_(model), config_(config) {
  for (const auto& [name, t] : model_.trainable()) velocity_.emplace(name, Tensor::zeros_like(*t));
}

double Trainer::step(const Tensor& images, const LabelMap& masks, int domain, double lr) {
  Tape<float> tape;
  Forward<float> f(model_, tape, Mode::Train, domain);
  const Var x = tape.constant(images);
  const auto out = hierarchical_fuse(f, x, config_.scales_train);
  Var loss = ops::cross_entropy(tape, out.logits, masks);
  if (config_.aux_weight > 0) {
    loss = ops::add(tape, loss,
                    ops::scale(tape, ops::cross_entropy(tape, out.aux, masks), static_cast<float>(config_.aux_weight)));
  }
  const double value = tape.value(loss)[0];
  if (!std::isfinite(value)) return value;
  tape.backward(loss);
  for (const auto& [name, v] : f.bound()) {
    sgd_momentum_step(model_.tensor(name), tape.grad(v), velocity_.at(name), static_cast<float>(lr),
                      static_cast<float>(config_.momentum));
  }
  return value;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string opt_fixed(const std::optional<double>& v) { return v ? fixed(*v, 6) : "nan"; }

NamedTensors train_echo(const TrainConfig& c) {
  NamedTensors t;
  auto put = [&](const std::string& k, double v) { t.emplace("train." + k, Tensor({1}, static_cast<float>(v))); };
  put("base_lr", c.base_lr);
  put("poly_exponent", c.poly_exponent);
  put("momentum", c.momentum);
  put("batch_size", c.batch_size);
  put("epochs", c.epochs);
  put("aux_weight", c.aux_weight);
  put("crop_size", c.crop_size);
  Tensor scales({static_cast<int>(c.scales_train.size())});
  for (std::size_t i = 0; i < c.scales_train.size(); ++i) scales[i] = static_cast<float>(c.scales_train[i]);
  t.emplace("train.scales", scales);
  return t;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << s;
}

}  // namespace

std::string metrics_row(const EpochMetrics& m) {
  return std::to_string(m.epoch) + "," + std::to_string(m.iter) + "," + fixed(m.lr, 8) + "," + fixed(m.loss, 6) +
         "," + opt_fixed(m.val_miou) + "," + opt_fixed(m.val_miou_shifted);
}

TrainResult train(const TrainConfig& config, const fs::path& data_root, const fs::path& out_dir, std::ostream* log) {
  config.validate();
  const DatasetManifest manifest = DatasetManifest::load(data_root);
  const int D = manifest.num_domains();
  const int heldout = config.heldout_domain(D);
  std::vector<int> train_domains;
  for (int d = 0; d < D; ++d)
    if (d != heldout) train_domains.push_back(d);
  if (train_domains.empty()) throw std::invalid_argument("train: no training domains left after holding one out");

  const std::vector<SegSample> train_set = load_split(data_root, manifest, "train", train_domains);
  const std::vector<SegSample> val_set = load_split(data_root, manifest, "val", train_domains);
  const std::vector<SegSample> shifted_set =
      heldout >= 0 ? load_split(data_root, manifest, "val", {heldout}) : std::vector<SegSample>{};

  std::vector<std::pair<int, std::vector<int>>> by_domain;
  for (int d : train_domains) {
    std::vector<int> idx;
    for (int i = 0; i < static_cast<int>(train_set.size()); ++i)
      if (train_set[i].domain == d) idx.push_back(i);
    by_domain.emplace_back(d, std::move(idx));
  }
  const DomainBatchScheduler scheduler(by_domain, config.batch_size, config.seed);
  const long long max_iter = static_cast<long long>(config.epochs) * static_cast<long long>(scheduler.batches_per_epoch());

  ModelConfig mc = config.model_config(D);
  mc.num_classes = manifest.num_classes;
  Model<float> model(mc);
  Trainer trainer(model, config);

  fs::create_directories(out_dir);
  write_text(out_dir / "config.txt", config.to_key_values().dump());
  const fs::path metrics_path = out_dir / "metrics.csv";
  write_text(metrics_path, std::string(kMetricsHeader) + "\n");
  const NamedTensors echo = train_echo(config);

  EvalOptions eval_opts;
  eval_opts.scales = config.scales_train;
  eval_opts.batch_size = config.batch_size;

  TrainResult result;
  long long iter = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0;
    double lr = 0;
    const auto batches = scheduler.epoch(epoch);
    for (const DomainBatch& b : batches) {
      std::vector<SegSample> aug;
      aug.reserve(b.samples.size());
      for (int i : b.samples) {
        Rng rng = sample_rng(config.seed ^ 0xA5A5A5A5ULL, (static_cast<std::uint64_t>(epoch) << 32) | unsigned(i));
        SegSample s = train_set[i];
        if (config.crop_size > 0 && config.crop_size < s.image.dim(1)) s = random_crop(s, config.crop_size, rng);
        aug.push_back(random_hflip(s, rng));
      }
      std::vector<int> all(aug.size());
      for (std::size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int>(k);
      auto [images, masks] = stack_samples(aug, all);

      lr = poly_lr(config.base_lr, iter, max_iter, config.poly_exponent);
      const double loss = trainer.step(images, masks, b.domain, lr);
      if (!std::isfinite(loss)) {
        std::string ids;
        for (int i : b.samples) ids += (ids.empty() ? "" : " ") + train_set[i].id;
        throw std::runtime_error("non-finite loss at iteration " + std::to_string(iter) + " (epoch " +
                                 std::to_string(epoch) + "), batch: " + ids);
      }
      result.iteration_losses.push_back(loss);
      loss_sum += loss;
      ++iter;
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.iter = iter;
    m.lr = lr;
    m.loss = loss_sum / static_cast<double>(batches.size());
    m.val_miou = evaluate(model, val_set, eval_opts, manifest.domain_names).overall_result.mean;
    if (!shifted_set.empty()) {
      m.val_miou_shifted = evaluate(model, shifted_set, eval_opts, manifest.domain_names).overall_result.mean;
    }
    {
      std::ofstream f(metrics_path, std::ios::app | std::ios::binary);
      f << metrics_row(m) << "\n";
      if (!f) throw std::runtime_error("cannot append to " + metrics_path.string());
    }
    save_checkpoint(out_dir / "last.ckpt", model, echo);
    const double score = m.val_miou.value_or(-1);
    if (score > result.best_val_miou) {
      result.best_val_miou = score;
      result.best_epoch = m.epoch;
      save_checkpoint(out_dir / "best.ckpt", model, echo);
    }
    if (log) *log << "epoch " << m.epoch << "/" << config.epochs << "  " << metrics_row(m) << std::endl;
    result.history.push_back(m);
  }
  return result;
}

}  // namespace dsg
