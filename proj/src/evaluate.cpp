#include "dsg/evaluate.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

namespace dsg {

ConfusionMatrix::ConfusionMatrix(int num_classes) : c_(num_classes) {
  if (num_classes < 0) throw std::invalid_argument("ConfusionMatrix: negative class count");
  counts_.assign(static_cast<std::size_t>(c_) * c_, 0);
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto v : counts_) t += v;
  return t;
}

void ConfusionMatrix::add(int gt, int pred) {
  if (gt < 0 || gt >= c_ || pred < 0 || pred >= c_) {
    throw std::out_of_range("ConfusionMatrix: class pair (" + std::to_string(gt) + ", " + std::to_string(pred) +
                            ") outside [0, " + std::to_string(c_) + ")");
  }
  ++counts_[static_cast<std::size_t>(gt) * c_ + pred];
}

void ConfusionMatrix::add(const LabelMap& gt, const LabelMap& pred) {
  if (gt.shape != pred.shape) {
    throw ShapeError("ConfusionMatrix: gt " + shape_str(gt.shape) + " vs pred " + shape_str(pred.shape));
  }
  for (std::size_t i = 0; i < gt.data.size(); ++i) add(gt.data[i], pred.data[i]);
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.c_ != c_) throw std::invalid_argument("ConfusionMatrix: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

namespace {

using u128 = unsigned __int128;

u128 gcd128(u128 a, u128 b) {
  while (b != 0) {
    const u128 t = a % b;
    a = b;
    b = t;
  }
  return a;
}

// Exact sum of fractions; false on overflow.
bool add_fraction(u128& num, u128& den, u128 p, u128 q) {
  const u128 g = gcd128(den, q);
  u128 a, b, d;
  if (__builtin_mul_overflow(num, q / g, &a) || __builtin_mul_overflow(p, den / g, &b) ||
      __builtin_mul_overflow(den / g, q, &d) || __builtin_add_overflow(a, b, &a)) {
    return false;
  }
  const u128 r = gcd128(a, d);
  num = r ? a / r : a;
  den = r ? d / r : d;
  return true;
}

constexpr u128 kExactDouble = u128(1) << 53;

}  // namespace

MiouResult miou(const ConfusionMatrix& conf) {
  const int C = conf.num_classes();
  MiouResult r;
  r.per_class.resize(C);
  std::vector<std::pair<std::int64_t, std::int64_t>> fracs;
  for (int c = 0; c < C; ++c) {
    std::int64_t tp = conf.at(c, c), fp = 0, fn = 0;
    for (int o = 0; o < C; ++o) {
      if (o == c) continue;
      fp += conf.at(o, c);
      fn += conf.at(c, o);
    }
    const std::int64_t den = tp + fp + fn;
    if (den == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(den);
    fracs.emplace_back(tp, den);
  }
  if (fracs.empty()) return r;

  u128 num = 0, den = 1;
  bool exact = true;
  for (auto [p, q] : fracs) {
    if (!add_fraction(num, den, static_cast<u128>(p), static_cast<u128>(q))) {
      exact = false;
      break;
    }
  }
  u128 total_den;
  if (exact && !__builtin_mul_overflow(den, static_cast<u128>(fracs.size()), &total_den) && num < kExactDouble &&
      total_den < kExactDouble) {
    // both operands representable, so the division is correctly rounded
    r.mean = static_cast<double>(num) / static_cast<double>(total_den);
  } else {
    long double s = 0;
    for (auto [p, q] : fracs) s += static_cast<long double>(p) / static_cast<long double>(q);
    r.mean = static_cast<double>(s / static_cast<long double>(fracs.size()));
  }
  return r;
}

LabelMap argmax_channels(const Tensor& logits) {
  require_rank(logits.shape(), 4, "argmax_channels");
  const int N = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  LabelMap out({N, H, W});
  const std::size_t P = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      const float* base = logits.ptr() + static_cast<std::size_t>(n) * K * P + p;
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (base[k * P] > base[best * P]) best = k;
      out.data[n * P + p] = best;
    }
  return out;
}

LabelMap predict(Model<float>& model, const Tensor& images, int domain, const EvalOptions& opts,
                 std::vector<std::string>* warnings) {
  Tape<float> tape;
  Forward<float> f(model, tape, Mode::Eval, domain, opts.stats, warnings);
  const Var x = tape.constant(images);
  const auto out = hierarchical_fuse(f, x, opts.scales);
  return argmax_channels(tape.value(out.logits));
}

EvalReport evaluate(Model<float>& model, const std::vector<SegSample>& samples, const EvalOptions& opts,
                    const std::vector<std::string>& domain_names) {
  validate_scales(opts.scales);
  if (opts.batch_size < 1) throw std::invalid_argument("evaluate: batch_size must be >= 1");
  const int C = model.config().num_classes;
  EvalReport rep;
  rep.scales = opts.scales;
  rep.stats = opts.stats;
  rep.overall = ConfusionMatrix(C);

  std::map<int, std::vector<int>> by_domain;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i) by_domain[samples[i].domain].push_back(i);

  for (const auto& [d, idx] : by_domain) {
    DomainScore ds;
    ds.domain = d;
    ds.name = d < static_cast<int>(domain_names.size()) ? domain_names[d] : "domain" + std::to_string(d);
    ds.conf = ConfusionMatrix(C);
    std::vector<std::string> warns;
    for (std::size_t b = 0; b < idx.size(); b += opts.batch_size) {
      const std::vector<int> sel(idx.begin() + static_cast<std::ptrdiff_t>(b),
                                 idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), b + opts.batch_size)));
      auto [images, masks] = stack_samples(samples, sel);
      const LabelMap pred = predict(model, images, d, opts, &warns);
      ds.conf.add(masks, pred);
    }
    // the fallback warning repeats for every layer and batch; keep one copy each
    for (const auto& w : warns)
      if (std::find(rep.warnings.begin(), rep.warnings.end(), w) == rep.warnings.end()) rep.warnings.push_back(w);
    ds.result = miou(ds.conf);
    rep.overall += ds.conf;
    rep.domains.push_back(std::move(ds));
  }
  rep.overall_result = miou(rep.overall);
  return rep;
}

std::string format_scales(const std::vector<double>& scales) {
  std::ostringstream os;
  for (std::size_t i = 0; i < scales.size(); ++i) os << (i ? ";" : "") << scales[i];
  return os.str();
}

std::vector<double> parse_scales(const std::string& text) {
  std::vector<double> out;
  std::string tok;
  std::istringstream is(text);
  while (std::getline(is, tok, ',')) {
    std::size_t used = 0;
    double v;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      throw std::invalid_argument("bad scale '" + tok + "'");
    }
    if (used != tok.size()) throw std::invalid_argument("bad scale '" + tok + "'");
    out.push_back(v);
  }
  validate_scales(out);
  return out;
}

namespace {

std::string fmt(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

}  // namespace

std::string format_report(const EvalReport& rep, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  os << "scales " << format_scales(rep.scales) << ", stats " << to_string(rep.stats) << "\n";
  const int C = rep.overall.num_classes();
  auto row = [&](const std::string& label, const MiouResult& r) {
    os << "  " << label << ": mIoU " << fmt(r.mean) << "  [";
    for (int c = 0; c < C; ++c) {
      const std::string cn = c < static_cast<int>(class_names.size()) ? class_names[c] : std::to_string(c);
      os << (c ? " " : "") << cn << "=" << fmt(r.per_class[c]);
    }
    os << "]\n";
  };
  for (const auto& d : rep.domains) row(d.name, d.result);
  row("overall", rep.overall_result);
  for (const auto& w : rep.warnings) os << "  warning: " << w << "\n";
  return os.str();
}

std::string report_csv(const EvalReport& rep, bool header) {
  std::ostringstream os;
  const int C = rep.overall.num_classes();
  if (header) {
    os << "scales,stats,domain,miou";
    for (int c = 0; c < C; ++c) os << ",iou_" << c;
    os << "\n";
  }
  auto row = [&](const std::string& label, const MiouResult& r) {
    os << format_scales(rep.scales) << "," << to_string(rep.stats) << "," << label << "," << fmt(r.mean);
    for (int c = 0; c < C; ++c) os << "," << fmt(r.per_class[c]);
    os << "\n";
  };
  for (const auto& d : rep.domains) row(d.name, d.result);
  row("overall", rep.overall_result);
  return os.str();
}

}  // namespace dsg
