#include "dsg/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace dsg {

NormKind parse_norm_kind(const std::string& s) {
  if (s == "bn" || s == "BN") return NormKind::BN;
  if (s == "dbn" || s == "DBN") return NormKind::DBN;
  throw std::invalid_argument("unknown norm kind '" + s + "' (expected bn or dbn)");
}

std::string to_string(NormKind k) { return k == NormKind::BN ? "bn" : "dbn"; }

StatsMode parse_stats_mode(const std::string& s) {
  if (s == "running") return StatsMode::Running;
  if (s == "batch") return StatsMode::Batch;
  throw std::invalid_argument("unknown stats mode '" + s + "' (expected running or batch)");
}

std::string to_string(StatsMode m) { return m == StatsMode::Running ? "running" : "batch"; }

void ModelConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("model: num_classes must be >= 2");
  if (base_channels < 1 || low_channels < 1) throw std::invalid_argument("model: stream widths must be >= 1");
  if (num_fusion_blocks < 1) throw std::invalid_argument("model: num_fusion_blocks must be >= 1");
  if (num_domains < 1) throw std::invalid_argument("model: num_domains must be >= 1");
  if (attn_dim < 1) throw std::invalid_argument("model: attn_dim must be >= 1");
  if (feature_channels() < 2) throw std::invalid_argument("model: need at least 2 feature channels");
}

template <typename T>
void Model<T>::add_conv(const std::string& name, int cout, int cin, int k) {
  convs_.emplace(name + ".weight", BasicTensor<T>({cout, cin, k, k}));
  convs_.emplace(name + ".bias", BasicTensor<T>({cout}));
}

template <typename T>
void Model<T>::add_norm(const std::string& name, int channels) {
  norms_.emplace(name, DbnLayer<T>(channels, config_.norm_domains(), static_cast<T>(config_.epsilon),
                                   static_cast<T>(config_.stats_momentum)));
}

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int ch = config.base_channels, cl = config.low_channels, c = config.feature_channels();
  const int k = config.num_classes, dk = config.attn_dim;
  add_conv("stem", ch, 3, 3);
  add_norm("stem.norm", ch);
  add_conv("stem.down", cl, ch, 3);
  add_norm("stem.down.norm", cl);
  std::set<std::string> zero_init;
  for (int b = 0; b < config.num_fusion_blocks; ++b) {
    const std::string p = "fuse" + std::to_string(b);
    add_conv(p + ".high", ch, ch, 3);
    add_conv(p + ".up", ch, cl, 1);
    zero_init.insert(p + ".up.weight");
    add_norm(p + ".high.norm", ch);
    add_conv(p + ".low", cl, cl, 3);
    add_conv(p + ".down", cl, ch, 3);
    add_norm(p + ".low.norm", cl);
  }
  add_conv("ocr.region", k, c, 1);
  add_conv("ocr.query", dk, c, 1);
  add_conv("ocr.key", dk, c, 1);
  add_conv("ocr.value", dk, c, 1);
  add_conv("ocr.out", c, c + dk, 1);
  add_norm("ocr.out.norm", c);
  add_conv("cls", k, c, 1);
  const int hidden = std::max(1, c / 2);
  add_conv("hma.attn1", hidden, c, 3);
  add_conv("hma.attn2", 1, hidden, 3);
  zero_init.insert("hma.attn2.weight");

  // Kernels ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)) in name order; biases zero.
  std::mt19937_64 rng(config.init_seed);
  for (auto& [name, t] : convs_) {
    if (t.rank() != 4 || zero_init.count(name)) continue;
    const double bound = std::sqrt(1.0 / (t.dim(1) * t.dim(2) * t.dim(3)));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : t.data()) v = static_cast<T>(u(rng));
  }
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> Model<T>::trainable() {
  std::vector<std::pair<std::string, BasicTensor<T>*>> out;
  for (auto& [name, t] : convs_) out.emplace_back(name, &t);
  for (auto& [name, layer] : norms_) {
    out.emplace_back(name + ".gamma", &layer.gamma);
    out.emplace_back(name + ".beta", &layer.beta);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const BasicTensor<T>*>> Model<T>::trainable() const {
  std::vector<std::pair<std::string, const BasicTensor<T>*>> out;
  for (auto& [name, t] : const_cast<Model*>(this)->trainable()) out.emplace_back(name, t);
  return out;
}

template <typename T>
BasicTensor<T>& Model<T>::tensor(const std::string& name) {
  if (auto it = convs_.find(name); it != convs_.end()) return it->second;
  const auto dot = name.rfind('.');
  if (dot != std::string::npos) {
    const std::string layer = name.substr(0, dot), field = name.substr(dot + 1);
    if (auto it = norms_.find(layer); it != norms_.end()) {
      if (field == "gamma") return it->second.gamma;
      if (field == "beta") return it->second.beta;
    }
  }
  throw std::out_of_range("model: no parameter named '" + name + "'");
}

template <typename T>
const BasicTensor<T>& Model<T>::tensor(const std::string& name) const {
  return const_cast<Model*>(this)->tensor(name);
}

template <typename T>
std::size_t Model<T>::params_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : trainable()) n += t->numel();
  return n;
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out;
  out.config_ = config_;
  for (const auto& [name, t] : convs_) out.convs_.emplace(name, t.template cast<U>());
  for (const auto& [name, layer] : norms_) {
    DbnLayer<U> l;
    l.gamma = layer.gamma.template cast<U>();
    l.beta = layer.beta.template cast<U>();
    l.running_mean = layer.running_mean.template cast<U>();
    l.running_var = layer.running_var.template cast<U>();
    l.updates = layer.updates;
    l.epsilon = static_cast<U>(layer.epsilon);
    l.stats_momentum = static_cast<U>(layer.stats_momentum);
    out.norms_.emplace(name, std::move(l));
  }
  return out;
}

std::size_t params_count(const ModelConfig& config) { return Model<float>(config).params_count(); }

std::size_t backbone_params_count(const ModelConfig& config) {
  const Model<float> m(config);
  std::size_t n = 0;
  for (const auto& [name, t] : m.trainable()) {
    if (name.rfind("stem", 0) == 0 || name.rfind("fuse", 0) == 0) n += t->numel();
  }
  return n;
}

template <typename T>
Forward<T>::Forward(Model<T>& model, Tape<T>& tape, Mode mode, int domain, StatsMode stats,
                    std::vector<std::string>* warnings)
    : model_(model), tape_(tape), mode_(mode), domain_(domain), stats_(stats), warnings_(warnings) {
  if (domain < 0 || domain >= model.config().num_domains) {
    throw DomainError("forward: domain " + std::to_string(domain) + " out of range [0, " +
                      std::to_string(model.config().num_domains) + ")");
  }
}

template <typename T>
Var Forward<T>::param(const std::string& name) {
  if (auto it = cache_.find(name); it != cache_.end()) return it->second;
  const Var v = tape_.leaf(model_.tensor(name), mode_ == Mode::Train);
  cache_.emplace(name, v);
  bound_.emplace_back(name, v);
  return v;
}

template <typename T>
void Forward<T>::bind(const std::string& name, Var v) {
  if (tape_.shape(v) != model_.tensor(name).shape()) {
    throw ShapeError("bind: " + name + " expects " + shape_str(model_.tensor(name).shape()));
  }
  cache_[name] = v;
  bound_.emplace_back(name, v);
}

template <typename T>
Var Forward<T>::conv(const std::string& layer, Var x, int stride, int padding) {
  return ops::conv2d(tape_, x, param(layer + ".weight"), param(layer + ".bias"), stride, padding);
}

template <typename T>
Var Forward<T>::norm(const std::string& layer, Var x) {
  DbnLayer<T>& l = model_.norm(layer);
  const Var g = param(layer + ".gamma");
  const Var b = param(layer + ".beta");
  // BN keeps a single statistics slot, so the domain argument is ignored.
  const int d = model_.config().norm_kind == NormKind::DBN ? domain_ : 0;
  if (mode_ == Mode::Train) return l.forward_train(tape_, x, g, b, d);
  if (stats_ == StatsMode::Batch) return l.forward_batch_stats(tape_, x, g, b);
  return l.forward_eval(tape_, x, g, b, d, warnings_);
}

template <typename T>
Streams fuse_streams(Forward<T>& f, int block, Var high, Var low) {
  auto& tape = f.tape();
  const Shape hs = tape.shape(high), ls = tape.shape(low);
  require_rank(hs, 4, "fuse_streams high");
  require_rank(ls, 4, "fuse_streams low");
  if (hs[0] != ls[0] || hs[2] != 2 * ls[2] || hs[3] != 2 * ls[3]) {
    throw ShapeError("fuse_streams: high " + shape_str(hs) + " and low " + shape_str(ls) +
                     " are not a full/half resolution pair");
  }
  const std::string p = "fuse" + std::to_string(block);
  const Var up = ops::bilinear_resize(tape, low, hs[2], hs[3]);
  const Var hsum = ops::add(tape, f.conv(p + ".high", high, 1, 1), f.conv(p + ".up", up, 1, 0));
  const Var high2 = ops::relu(tape, f.norm(p + ".high.norm", hsum));
  const Var lsum = ops::add(tape, f.conv(p + ".low", low, 1, 1), f.conv(p + ".down", high, 2, 1));
  const Var low2 = ops::relu(tape, f.norm(p + ".low.norm", lsum));
  return {high2, low2};
}

template <typename T>
Var backbone_forward(Forward<T>& f, Var image) {
  auto& tape = f.tape();
  const Shape s = tape.shape(image);
  require_rank(s, 4, "backbone image");
  if (s[1] != 3) throw ShapeError("backbone: expected 3 input channels, got " + shape_str(s));
  if (s[2] % 2 || s[3] % 2) throw ShapeError("backbone: H and W must be divisible by 2, got " + shape_str(s));
  Var high = ops::relu(tape, f.norm("stem.norm", f.conv("stem", image, 1, 1)));
  Var low = ops::relu(tape, f.norm("stem.down.norm", f.conv("stem.down", high, 2, 1)));
  for (int b = 0; b < f.model().config().num_fusion_blocks; ++b) {
    const Streams st = fuse_streams(f, b, high, low);
    high = st.high;
    low = st.low;
  }
  const Var up = ops::bilinear_resize(tape, low, s[2], s[3]);
  return ops::concat_channels(tape, {high, up});
}

template <typename T>
Var soft_region_scores(Forward<T>& f, Var features) {
  return f.conv("ocr.region", features, 1, 0);
}

template <typename T>
Var region_representations(Tape<T>& tape, Var features, Var region_logits) {
  const Shape fs = tape.shape(features), rs = tape.shape(region_logits);
  require_rank(fs, 4, "region_representations features");
  require_rank(rs, 4, "region_representations logits");
  if (fs[0] != rs[0] || fs[2] != rs[2] || fs[3] != rs[3]) {
    throw ShapeError("region_representations: features " + shape_str(fs) + " vs logits " + shape_str(rs));
  }
  const int N = fs[0], C = fs[1], K = rs[1], P = fs[2] * fs[3];
  const Var a = ops::softmax_axis(tape, ops::reshape(tape, region_logits, {N, K, P}), 2);
  const Var x = ops::reshape(tape, features, {N, C, P});
  return ops::bmm(tape, a, x, false, true);
}

template <typename T>
Augmented<T> object_contextual_augment(Forward<T>& f, Var features, Var region_reps) {
  auto& tape = f.tape();
  const Shape fs = tape.shape(features), rs = tape.shape(region_reps);
  require_rank(fs, 4, "object_contextual_augment features");
  require_rank(rs, 3, "object_contextual_augment regions");
  const int N = fs[0], C = fs[1], H = fs[2], W = fs[3], K = rs[1];
  if (rs[0] != N || rs[2] != C) {
    throw ShapeError("object_contextual_augment: regions " + shape_str(rs) + " vs features " + shape_str(fs));
  }
  const int dk = f.model().config().attn_dim;
  const Var q = ops::reshape(tape, f.conv("ocr.query", features, 1, 0), {N, dk, H * W});
  const Var regions = ops::reshape(tape, ops::transpose12(tape, region_reps), {N, C, K, 1});
  const Var key = ops::reshape(tape, f.conv("ocr.key", regions, 1, 0), {N, dk, K});
  const Var value = ops::reshape(tape, f.conv("ocr.value", regions, 1, 0), {N, dk, K});
  const Var scores = ops::scale(tape, ops::bmm(tape, q, key, true, false),
                                static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
  const Var w = ops::softmax_axis(tape, scores, 2);  // [N, HW, K]
  const Var context = ops::reshape(tape, ops::bmm(tape, value, w, false, true), {N, dk, H, W});
  const Var joined = ops::concat_channels(tape, {features, context});
  const Var out = ops::relu(tape, f.norm("ocr.out.norm", f.conv("ocr.out", joined, 1, 0)));
  return {out, w};
}

template <typename T>
Var attention_mask(Forward<T>& f, Var coarse_features) {
  auto& tape = f.tape();
  const Var h = ops::relu(tape, f.conv("hma.attn1", coarse_features, 1, 1));
  return ops::sigmoid(tape, f.conv("hma.attn2", h, 1, 1));
}

template <typename T>
Var fuse_two_scales(Tape<T>& tape, Var coarse_logits, Var fine_logits, Var mask) {
  const Shape cs = tape.shape(coarse_logits), fs = tape.shape(fine_logits), ms = tape.shape(mask);
  require_rank(cs, 4, "fuse_two_scales coarse");
  require_rank(fs, 4, "fuse_two_scales fine");
  require_rank(ms, 4, "fuse_two_scales mask");
  if (cs[1] != fs[1]) {
    throw ShapeError("fuse_two_scales: class count mismatch " + shape_str(cs) + " vs " + shape_str(fs));
  }
  if (cs[0] != fs[0] || ms[0] != cs[0] || ms[1] != 1 || ms[2] != cs[2] || ms[3] != cs[3]) {
    throw ShapeError("fuse_two_scales: mask " + shape_str(ms) + " does not match coarse " + shape_str(cs));
  }
  if (cs[2] > fs[2] || cs[3] > fs[3]) {
    throw ShapeError("fuse_two_scales: coarse " + shape_str(cs) + " larger than fine " + shape_str(fs));
  }
  const int H = fs[2], W = fs[3];
  const Var up = ops::bilinear_resize(tape, coarse_logits, H, W);
  const Var m = ops::expand_channels(tape, ops::bilinear_resize(tape, mask, H, W), fs[1]);
  const Var ones = tape.constant(BasicTensor<T>::full(fs, T(1)));
  return ops::add(tape, ops::mul(tape, m, up), ops::mul(tape, ops::sub(tape, ones, m), fine_logits));
}

template <typename T>
ScaleOutput<T> single_scale(Forward<T>& f, Var image) {
  const Var feats = backbone_forward(f, image);
  const Var aux = soft_region_scores(f, feats);
  const Var regions = region_representations(f.tape(), feats, aux);
  const Augmented<T> ocr = object_contextual_augment(f, feats, regions);
  const Var logits = f.conv("cls", ocr.output, 1, 0);
  return {logits, aux, ocr.output};
}

int scaled_size(int size, double scale) {
  const int s = 2 * static_cast<int>(std::lround(size * scale / 2.0));
  return std::max(2, s);
}

void validate_scales(const std::vector<double>& scales) {
  if (scales.empty()) throw std::invalid_argument("scales: empty scale list");
  bool has_unit = false;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!(scales[i] > 0)) throw std::invalid_argument("scales: every scale must be positive");
    if (i && !(scales[i] > scales[i - 1])) throw std::invalid_argument("scales: must be strictly ascending");
    has_unit = has_unit || scales[i] == 1.0;
  }
  if (!has_unit) throw std::invalid_argument("scales: 1.0 must be included");
}

template <typename T>
MultiScaleOutput<T> hierarchical_fuse(Forward<T>& f, Var image, const std::vector<double>& scales) {
  validate_scales(scales);
  auto& tape = f.tape();
  const Shape s = tape.shape(image);
  require_rank(s, 4, "hierarchical_fuse image");
  MultiScaleOutput<T> out;
  for (double sc : scales) {
    const Var img = sc == 1.0 ? image
                              : ops::bilinear_resize(tape, image, scaled_size(s[2], sc), scaled_size(s[3], sc));
    out.per_scale.push_back(single_scale(f, img));
    if (sc == 1.0) out.aux = out.per_scale.back().aux;
  }
  Var fused = out.per_scale[0].logits;
  for (std::size_t i = 1; i < out.per_scale.size(); ++i) {
    const Var mask = attention_mask(f, out.per_scale[i - 1].features);
    fused = fuse_two_scales(tape, fused, out.per_scale[i].logits, mask);
  }
  const Shape fs = tape.shape(fused);
  if (fs[2] != s[2] || fs[3] != s[3]) fused = ops::bilinear_resize(tape, fused, s[2], s[3]);
  out.logits = fused;
  return out;
}

double training_cost(const std::vector<double>& scales) {
  if (scales.empty()) throw std::invalid_argument("training_cost: empty scale list");
  double c = 0;
  for (double s : scales) {
    if (!(s > 0)) throw std::invalid_argument("training_cost: scales must be positive");
    c += s * s;
  }
  return c;
}

#define DSG_INSTANTIATE(T)                                                                  \
  template class Model<T>;                                                                  \
  template class Forward<T>;                                                                \
  template Streams fuse_streams<T>(Forward<T>&, int, Var, Var);                             \
  template Var backbone_forward<T>(Forward<T>&, Var);                                       \
  template Var soft_region_scores<T>(Forward<T>&, Var);                                     \
  template Var region_representations<T>(Tape<T>&, Var, Var);                               \
  template Augmented<T> object_contextual_augment<T>(Forward<T>&, Var, Var);                \
  template Var attention_mask<T>(Forward<T>&, Var);                                         \
  template Var fuse_two_scales<T>(Tape<T>&, Var, Var, Var);                                 \
  template ScaleOutput<T> single_scale<T>(Forward<T>&, Var);                                \
  template MultiScaleOutput<T> hierarchical_fuse<T>(Forward<T>&, Var, const std::vector<double>&);

DSG_INSTANTIATE(float)
DSG_INSTANTIATE(double)

template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;

#undef DSG_INSTANTIATE

}  // namespace dsg
