#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dsg/tensor.hpp"

namespace dsg {

using Rng = std::mt19937_64;

struct SegSample {
  Tensor image;    // [3,H,W], values in [0,1]
  LabelMap mask;   // [H,W], ids in [0, C)
  int domain = 0;
  std::string id;  // "<split>/<domain name>/<n>"
};

inline constexpr int kNumShapeClasses = 4;
inline constexpr int kMaxDomains = 7;

/// background, circle, square, triangle
const std::vector<std::string>& shape_class_names();
/// Photometric domain names, index = domain id.
const std::vector<std::string>& all_domain_names();

struct DatasetManifest {
  int num_classes = kNumShapeClasses;
  std::vector<std::string> class_names;
  std::vector<std::string> domain_names;
  int image_size = 64;
  std::uint64_t seed = 0;
  std::vector<std::string> splits;               // e.g. train, val
  std::vector<std::vector<int>> split_counts;    // [split][domain]

  int num_domains() const { return static_cast<int>(domain_names.size()); }
  int count(const std::string& split, int domain) const;
  void validate() const;

  std::string serialize() const;
  static DatasetManifest parse(const std::string& text, const std::string& origin = "manifest");
  static DatasetManifest load(const std::filesystem::path& root);
  void save(const std::filesystem::path& root) const;
};

struct GenerateOptions {
  std::uint64_t seed = 0;
  int per_domain = 40;
  int domains = 4;
  int size = 64;
};

/// Per-sample random stream, seed XOR a mixed sample index.
Rng sample_rng(std::uint64_t seed, std::uint64_t index);

/// Noise-free scene: non-overlapping circles, squares and triangles, each
/// class in its own colour family, on a textured grey background.
SegSample render_base(Rng& rng, int size);

/// Domain d's photometric transform; never touches the mask. Noise draws
/// come from rng.
Tensor apply_domain(const Tensor& base, int domain, Rng& rng);

/// Writes root/<split>/<domain>/img_<n>.ppm + mask_<n>.pgm and root/manifest.txt.
/// Each domain gets per_domain samples; max(1, per_domain / 4) go to val.
DatasetManifest generate_domain_dataset(const std::filesystem::path& root, const GenerateOptions& opts);

std::filesystem::path image_path(const std::filesystem::path& root, const std::string& split,
                                 const std::string& domain_name, int n);
std::filesystem::path mask_path(const std::filesystem::path& root, const std::string& split,
                                const std::string& domain_name, int n);

void save_sample(const std::filesystem::path& image_file, const std::filesystem::path& mask_file,
                 const SegSample& sample);
SegSample load_sample(const std::filesystem::path& image_file, const std::filesystem::path& mask_file,
                      int domain = 0);

/// All samples of one split, for the requested domains (all when empty), in
/// domain then index order.
std::vector<SegSample> load_split(const std::filesystem::path& root, const DatasetManifest& manifest,
                                  const std::string& split, const std::vector<int>& domains = {});

/// Images [N,3,H,W] and masks [N,H,W] of the selected samples (equal sizes).
std::pair<Tensor, LabelMap> stack_samples(const std::vector<SegSample>& samples, const std::vector<int>& indices);

SegSample crop(const SegSample& s, int top, int left, int out);
SegSample random_crop(const SegSample& s, int out, Rng& rng);
SegSample hflip(const SegSample& s);
/// Mirrors image and mask together with probability 0.5.
SegSample random_hflip(const SegSample& s, Rng& rng);

struct DomainBatch {
  int domain = 0;
  std::vector<int> samples;  // caller's sample indices
};

/// Single-domain mini-batches. Each epoch shuffles every domain's samples with
/// a seeded stream, cuts them into batches (the short tail batch is kept) and
/// emits the domains round-robin until all are exhausted.
class DomainBatchScheduler {
 public:
  /// samples_by_domain: (domain id, sample indices) pairs; none may be empty.
  DomainBatchScheduler(std::vector<std::pair<int, std::vector<int>>> samples_by_domain, int batch_size,
                       std::uint64_t seed);

  std::vector<DomainBatch> epoch(int epoch_index) const;
  std::size_t batches_per_epoch() const;

 private:
  std::vector<std::pair<int, std::vector<int>>> domains_;
  int batch_size_;
  std::uint64_t seed_;
};

}  // namespace dsg
