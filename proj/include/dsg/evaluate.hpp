#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dsg/data.hpp"
#include "dsg/model.hpp"

namespace dsg {

/// counts[g * C + p]: pixels with ground truth g predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0);

  int num_classes() const { return c_; }
  std::int64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * c_ + pred]; }
  std::int64_t total() const;

  void add(int gt, int pred);
  /// Same-shape label maps; any id outside [0, C) is an error.
  void add(const LabelMap& gt, const LabelMap& pred);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

 private:
  int c_;
  std::vector<std::int64_t> counts_;
};

struct MiouResult {
  std::vector<std::optional<double>> per_class;  // nullopt: class absent from GT and prediction
  std::optional<double> mean;                    // nullopt: no class present at all
};

/// IoU_c = TP / (TP + FP + FN) over classes with a non-zero denominator.
/// The mean is rounded once from the exact rational average when it fits in
/// 128-bit arithmetic.
MiouResult miou(const ConfusionMatrix& conf);

/// Argmax over channels of [N,K,H,W] logits; ties go to the lower id.
LabelMap argmax_channels(const Tensor& logits);

struct EvalOptions {
  std::vector<double> scales{1.0};
  StatsMode stats = StatsMode::Running;
  int batch_size = 8;
};

struct DomainScore {
  int domain = 0;
  std::string name;
  ConfusionMatrix conf;
  MiouResult result;
};

struct EvalReport {
  std::vector<double> scales;
  StatsMode stats = StatsMode::Running;
  std::vector<DomainScore> domains;  // ascending domain id, only those present
  ConfusionMatrix overall;
  MiouResult overall_result;
  std::vector<std::string> warnings;
};

/// Eval-mode prediction for single-domain samples of equal size.
LabelMap predict(Model<float>& model, const Tensor& images, int domain, const EvalOptions& opts,
                 std::vector<std::string>* warnings = nullptr);

/// Per-domain and overall mIoU. Samples are batched per domain so that every
/// forward pass sees a single domain. domain_names labels the report rows.
EvalReport evaluate(Model<float>& model, const std::vector<SegSample>& samples, const EvalOptions& opts,
                    const std::vector<std::string>& domain_names = {});

std::string format_scales(const std::vector<double>& scales);
std::vector<double> parse_scales(const std::string& text);

/// Human-readable table.
std::string format_report(const EvalReport& report, const std::vector<std::string>& class_names = {});
/// CSV rows `scales,stats,domain,miou,iou_<class>...`; header when requested.
std::string report_csv(const EvalReport& report, bool header);

}  // namespace dsg
