#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dsg/normalization.hpp"
#include "dsg/ops.hpp"

namespace dsg {

enum class NormKind { BN, DBN };
enum class Mode { Train, Eval };
/// Which statistics eval-mode normalization uses.
enum class StatsMode { Running, Batch };

NormKind parse_norm_kind(const std::string& s);
std::string to_string(NormKind k);
StatsMode parse_stats_mode(const std::string& s);
std::string to_string(StatsMode m);

struct ModelConfig {
  int num_classes = 4;
  int base_channels = 16;  // high-resolution stream
  int low_channels = 32;   // half-resolution stream
  int num_fusion_blocks = 3;
  NormKind norm_kind = NormKind::DBN;
  int num_domains = 1;
  int attn_dim = 32;
  double epsilon = 1e-5;
  double stats_momentum = 0.1;
  std::uint64_t init_seed = 0;

  void validate() const;
  int feature_channels() const { return base_channels + low_channels; }
  /// Domains tracked by each norm layer: 1 for BN, num_domains for DBN.
  int norm_domains() const { return norm_kind == NormKind::DBN ? num_domains : 1; }
};

/// Trainable tensors of the full network plus the per-domain normalization
/// state. Parameter names are "<layer>.weight" / "<layer>.bias" for
/// convolutions and "<layer>.gamma" / "<layer>.beta" for norm layers.
template <typename T>
class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// Every trainable tensor, ordered by name.
  std::vector<std::pair<std::string, BasicTensor<T>*>> trainable();
  std::vector<std::pair<std::string, const BasicTensor<T>*>> trainable() const;

  BasicTensor<T>& tensor(const std::string& name);
  const BasicTensor<T>& tensor(const std::string& name) const;

  DbnLayer<T>& norm(const std::string& layer) { return norms_.at(layer); }
  const DbnLayer<T>& norm(const std::string& layer) const { return norms_.at(layer); }
  const std::map<std::string, DbnLayer<T>>& norms() const { return norms_; }
  std::map<std::string, DbnLayer<T>>& norms() { return norms_; }

  /// Number of trainable scalars; a pure function of the config.
  std::size_t params_count() const;

  template <typename U>
  Model<U> cast() const;

 private:
  template <typename U>
  friend class Model;

  void add_conv(const std::string& name, int cout, int cin, int k);
  void add_norm(const std::string& name, int channels);

  ModelConfig config_;
  std::map<std::string, BasicTensor<T>> convs_;
  std::map<std::string, DbnLayer<T>> norms_;
};

/// Trainable scalars of the whole network / of the backbone alone.
std::size_t params_count(const ModelConfig& config);
std::size_t backbone_params_count(const ModelConfig& config);

/// One forward pass over a model: binds parameters onto a tape on first use
/// and routes normalization to training, running-statistics or batch-statistics
/// mode. Training-mode passes update running statistics of `domain`.
template <typename T>
class Forward {
 public:
  Forward(Model<T>& model, Tape<T>& tape, Mode mode, int domain,
          StatsMode stats = StatsMode::Running, std::vector<std::string>* warnings = nullptr);

  Tape<T>& tape() { return tape_; }
  Model<T>& model() { return model_; }
  Mode mode() const { return mode_; }

  Var param(const std::string& name);
  /// Use an existing variable for a parameter instead of a fresh leaf.
  void bind(const std::string& name, Var v);
  Var conv(const std::string& layer, Var x, int stride, int padding);
  Var norm(const std::string& layer, Var x);

  /// Parameters bound so far, in binding order.
  const std::vector<std::pair<std::string, Var>>& bound() const { return bound_; }

 private:
  Model<T>& model_;
  Tape<T>& tape_;
  Mode mode_;
  int domain_;
  StatsMode stats_;
  std::vector<std::string>* warnings_;
  std::map<std::string, Var> cache_;
  std::vector<std::pair<std::string, Var>> bound_;
};

// Backbone: two parallel streams (full and half resolution) with repeated
// exchange, ending in upsample + concat of both streams.

struct Streams {
  Var high;
  Var low;
};

/// high' = relu(norm(conv3x3(high) + conv1x1(upsample(low))))
/// low'  = relu(norm(conv3x3(low) + conv3x3_stride2(high)))
template <typename T>
Streams fuse_streams(Forward<T>& f, int block, Var high, Var low);

/// image [N,3,H,W] with even H, W -> features [N, base + low, H, W].
template <typename T>
Var backbone_forward(Forward<T>& f, Var image);

// Object-contextual representations head.

/// Per-pixel region logits [N,K,H,W] from a 1x1 conv; these are the auxiliary
/// logits supervised by the ground-truth mask.
template <typename T>
Var soft_region_scores(Forward<T>& f, Var features);

/// f_k = sum_i softmax_i(logits_k)_i * x_i over all H*W pixels -> [N,K,C].
template <typename T>
Var region_representations(Tape<T>& tape, Var features, Var region_logits);

template <typename T>
struct Augmented {
  Var output;   // [N,C,H,W]
  Var weights;  // [N,H*W,K], softmax over regions per pixel
};

/// w_ik = softmax_k(query(x_i) . key(f_k) / sqrt(dk)); c_i = sum_k w_ik value(f_k);
/// y_i = relu(norm(conv1x1(concat(x_i, c_i)))).
template <typename T>
Augmented<T> object_contextual_augment(Forward<T>& f, Var features, Var region_reps);

// Hierarchical multi-scale attention.

/// sigmoid(conv3x3(relu(conv3x3(features)))) -> [N,1,h,w], strictly in (0,1).
template <typename T>
Var attention_mask(Forward<T>& f, Var coarse_features);

/// up = resize(coarse_logits), m = resize(mask) to the fine resolution;
/// fused = m * up + (1 - m) * fine. The mask weights the coarse branch.
template <typename T>
Var fuse_two_scales(Tape<T>& tape, Var coarse_logits, Var fine_logits, Var mask);

template <typename T>
struct ScaleOutput {
  Var logits;     // [N,K,h,w]
  Var aux;        // region logits [N,K,h,w]
  Var features;   // OCR-augmented features [N,C,h,w]
};

/// Backbone -> OCR -> classifier for one input resolution.
template <typename T>
ScaleOutput<T> single_scale(Forward<T>& f, Var image);

/// Network input size for scale s: nearest even value of s * size, at least 2.
int scaled_size(int size, double scale);

template <typename T>
struct MultiScaleOutput {
  Var logits;  // fused, at the scale-1.0 resolution
  Var aux;     // region logits of the scale-1.0 pass
  std::vector<ScaleOutput<T>> per_scale;
};

/// Folds predictions from the coarsest to the finest scale, each step using
/// the attention mask predicted from the coarser scale's features. scales must
/// be ascending, positive and contain 1.0.
template <typename T>
MultiScaleOutput<T> hierarchical_fuse(Forward<T>& f, Var image, const std::vector<double>& scales);

void validate_scales(const std::vector<double>& scales);

/// Sum of squared scales: relative cost of one training pass over all scales.
double training_cost(const std::vector<double>& scales);

}  // namespace dsg
