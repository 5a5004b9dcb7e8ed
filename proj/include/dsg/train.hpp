#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dsg/config.hpp"
#include "dsg/evaluate.hpp"
#include "dsg/model.hpp"

namespace dsg {

struct TrainConfig {
  double base_lr = 0.01;
  double poly_exponent = 2.0;
  double momentum = 0.9;
  int batch_size = 8;
  int epochs = 30;
  std::uint64_t seed = 0;
  NormKind norm_kind = NormKind::DBN;
  std::vector<double> scales_train{0.5, 1.0};
  double aux_weight = 0.4;
  int crop_size = 48;             // random training crop; 0 trains on full images
  std::string heldout = "last";  // held-out domain: "last", "none" or an index
  int base_channels = 16;
  int low_channels = 32;
  int num_fusion_blocks = 3;
  int attn_dim = 32;

  void validate() const;
  /// Unknown keys are rejected so that typos do not silently fall back to defaults.
  static TrainConfig from_key_values(const KeyValues& kv);
  KeyValues to_key_values() const;
  ModelConfig model_config(int num_domains) const;
  /// Resolved held-out domain for a dataset with `num_domains` domains, or -1.
  int heldout_domain(int num_domains) const;
};

/// base_lr * (1 - iter / max_iter)^exponent for 0 <= iter <= max_iter.
double poly_lr(double base_lr, long long iter, long long max_iter, double exponent);

/// v <- momentum * v + g; p <- p - lr * v.
template <typename T>
void sgd_momentum_step(BasicTensor<T>& param, const BasicTensor<T>& grad, BasicTensor<T>& velocity, T lr,
                       T momentum);

/// Owns the optimizer state for one model.
class Trainer {
 public:
  Trainer(Model<float>& model, const TrainConfig& config);

  /// One SGD iteration on a single-domain batch; returns the loss before the update.
  double step(const Tensor& images, const LabelMap& masks, int domain, double lr);

  const std::map<std::string, Tensor>& velocity() const { return velocity_; }

 private:
  Model<float>& model_;
  TrainConfig config_;
  std::map<std::string, Tensor> velocity_;
};

struct EpochMetrics {
  int epoch = 0;
  long long iter = 0;  // iterations completed
  double lr = 0;       // learning rate of the epoch's last iteration
  double loss = 0;     // mean training loss over the epoch
  std::optional<double> val_miou;
  std::optional<double> val_miou_shifted;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::vector<double> iteration_losses;
  int best_epoch = -1;
  double best_val_miou = -1;
};

inline constexpr const char* kMetricsHeader = "epoch,iter,lr,loss,val_miou,val_miou_shifted_domain";
std::string metrics_row(const EpochMetrics& m);

/// Trains on the train split of every non-held-out domain and writes
/// out_dir/{metrics.csv, config.txt, last.ckpt, best.ckpt}. Progress lines go
/// to `log` when non-null.
TrainResult train(const TrainConfig& config, const std::filesystem::path& data_root,
                  const std::filesystem::path& out_dir, std::ostream* log = nullptr);

}  // namespace dsg
