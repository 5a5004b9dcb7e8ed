#include "dsg/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dsg/config.hpp"
#include "dsg/netpbm.hpp"

namespace dsg {

namespace fs = std::filesystem;

const std::vector<std::string>& shape_class_names() {
  static const std::vector<std::string> names{"background", "circle", "square", "triangle"};
  return names;
}

const std::vector<std::string>& all_domain_names() {
  static const std::vector<std::string> names{"identity",  "bright_up",   "bright_down", "noise",
                                              "tint_blue", "tint_orange", "low_contrast"};
  return names;
}

int DatasetManifest::count(const std::string& split, int domain) const {
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == split) return split_counts[i].at(static_cast<std::size_t>(domain));
  }
  throw std::out_of_range("manifest: no split '" + split + "'");
}

void DatasetManifest::validate() const {
  if (num_classes < 2) throw std::runtime_error("manifest: num_classes must be >= 2");
  if (static_cast<int>(class_names.size()) != num_classes) throw std::runtime_error("manifest: class name count mismatch");
  if (domain_names.empty()) throw std::runtime_error("manifest: no domains");
  if (splits.size() != split_counts.size()) throw std::runtime_error("manifest: split table mismatch");
  for (const auto& counts : split_counts) {
    if (static_cast<int>(counts.size()) != num_domains()) throw std::runtime_error("manifest: split count table mismatch");
    for (int c : counts) {
      if (c < 1) throw std::runtime_error("manifest: every split/domain count must be >= 1");
    }
  }
}

std::string DatasetManifest::serialize() const {
  std::ostringstream os;
  os << "format = dsg-dataset-1\n";
  os << "num_classes = " << num_classes << "\n";
  for (std::size_t i = 0; i < class_names.size(); ++i) os << "class." << i << " = " << class_names[i] << "\n";
  os << "num_domains = " << domain_names.size() << "\n";
  for (std::size_t i = 0; i < domain_names.size(); ++i) os << "domain." << i << " = " << domain_names[i] << "\n";
  os << "image_size = " << image_size << "\n";
  os << "seed = " << seed << "\n";
  os << "splits = ";
  for (std::size_t i = 0; i < splits.size(); ++i) os << (i ? "," : "") << splits[i];
  os << "\n";
  for (std::size_t s = 0; s < splits.size(); ++s)
    for (std::size_t d = 0; d < split_counts[s].size(); ++d)
      os << "split." << splits[s] << "." << d << " = " << split_counts[s][d] << "\n";
  return os.str();
}

DatasetManifest DatasetManifest::parse(const std::string& text, const std::string& origin) {
  const KeyValues kv = KeyValues::parse(text, origin);
  DatasetManifest m;
  m.num_classes = static_cast<int>(kv.integer("num_classes"));
  for (int i = 0; i < m.num_classes; ++i) m.class_names.push_back(kv.str("class." + std::to_string(i)));
  const int nd = static_cast<int>(kv.integer("num_domains"));
  for (int i = 0; i < nd; ++i) m.domain_names.push_back(kv.str("domain." + std::to_string(i)));
  m.image_size = static_cast<int>(kv.integer("image_size", 0));
  m.seed = static_cast<std::uint64_t>(kv.integer("seed", 0));
  std::stringstream ss(kv.str("splits"));
  std::string split;
  while (std::getline(ss, split, ',')) {
    if (split.empty()) continue;
    m.splits.push_back(split);
    std::vector<int> counts;
    for (int d = 0; d < nd; ++d) counts.push_back(static_cast<int>(kv.integer("split." + split + "." + std::to_string(d))));
    m.split_counts.push_back(counts);
  }
  m.validate();
  return m;
}

DatasetManifest DatasetManifest::load(const fs::path& root) {
  std::ifstream f(root / "manifest.txt");
  if (!f) throw std::runtime_error("cannot open " + (root / "manifest.txt").string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), (root / "manifest.txt").string());
}

void DatasetManifest::save(const fs::path& root) const {
  std::ofstream f(root / "manifest.txt", std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + (root / "manifest.txt").string());
  f << serialize();
}

Rng sample_rng(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer spreads consecutive indices before the XOR.
  std::uint64_t z = index + 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  z ^= z >> 31;
  return Rng(seed ^ z);
}

namespace {

struct Shape2D {
  int cls;
  double cx, cy, r;
};

bool inside(const Shape2D& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  switch (s.cls) {
    case 1:
      return dx * dx + dy * dy <= s.r * s.r;
    case 2:
      return std::abs(dx) <= 0.8 * s.r && std::abs(dy) <= 0.8 * s.r;
    default: {
      // Upward triangle: apex (0, -r), base corners (+-r, 0.8 r).
      const double ax = 0, ay = -s.r, bx = -s.r, by = 0.8 * s.r, cx = s.r, cy = 0.8 * s.r;
      auto edge = [](double x0, double y0, double x1, double y1, double x, double y) {
        return (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
      };
      const double e0 = edge(ax, ay, cx, cy, dx, dy);
      const double e1 = edge(cx, cy, bx, by, dx, dy);
      const double e2 = edge(bx, by, ax, ay, dx, dy);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
}

const double kClassColor[4][3] = {
    {0.42, 0.42, 0.42},  // background
    {0.85, 0.22, 0.20},  // circle
    {0.22, 0.75, 0.28},  // square
    {0.22, 0.32, 0.85},  // triangle
};

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace

SegSample render_base(Rng& rng, int size) {
  if (size < 2 || size % 2) throw std::invalid_argument("render_base: size must be even and >= 2");
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SegSample s;
  s.image = Tensor({3, size, size});
  s.mask = LabelMap({size, size}, 0);

  std::vector<Shape2D> shapes;
  const int want = 2 + static_cast<int>(u01(rng) * 3);  // 2..4
  for (int attempt = 0; attempt < 60 && static_cast<int>(shapes.size()) < want; ++attempt) {
    Shape2D sh;
    sh.cls = 1 + static_cast<int>(u01(rng) * 3);
    sh.r = size * (0.09 + 0.11 * u01(rng));
    sh.cx = sh.r + 1 + u01(rng) * (size - 2 * sh.r - 2);
    sh.cy = sh.r + 1 + u01(rng) * (size - 2 * sh.r - 2);
    bool clear = true;
    for (const auto& o : shapes) {
      if (std::hypot(o.cx - sh.cx, o.cy - sh.cy) < o.r + sh.r + 2) clear = false;
    }
    if (clear) shapes.push_back(sh);
  }

  const double bg_level = 0.8 + 0.3 * u01(rng);
  double color[4][3];
  for (int c = 0; c < 3; ++c) color[0][c] = kClassColor[0][c] * bg_level;
  std::vector<std::array<double, 3>> shape_color;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    std::array<double, 3> col{};
    for (int c = 0; c < 3; ++c) col[c] = kClassColor[shapes[i].cls][c] + 0.12 * (u01(rng) - 0.5);
    shape_color.push_back(col);
  }

  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * size + x;
      int owner = -1;
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (inside(shapes[i], x + 0.5, y + 0.5)) owner = static_cast<int>(i);
      }
      const double texture = 0.06 * (u01(rng) - 0.5);
      for (int c = 0; c < 3; ++c) {
        const double v = owner < 0 ? color[0][c] : shape_color[static_cast<std::size_t>(owner)][c];
        // Values sit on the 8-bit grid so a saved render reloads exactly.
        s.image[c * plane + p] = static_cast<float>(std::lround(clamp01(v + texture) * 255.0) / 255.0);
      }
      s.mask.data[p] = owner < 0 ? 0 : shapes[static_cast<std::size_t>(owner)].cls;
    }
  }
  return s;
}

Tensor apply_domain(const Tensor& base, int domain, Rng& rng) {
  if (domain < 0 || domain >= kMaxDomains) {
    throw std::invalid_argument("apply_domain: domain " + std::to_string(domain) + " outside [0, 7)");
  }
  Tensor out = base;
  const std::size_t plane = base.numel() / 3;
  static const double kTint[2][3] = {{0.10, 0.35, 1.00}, {1.00, 0.60, 0.10}};
  std::normal_distribution<double> noise(0.0, 0.05);
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      const double v = base[c * plane + p];
      double r = v;
      switch (domain) {
        case 0: r = v; break;
        case 1: r = v + 0.25; break;
        case 2: r = v - 0.25; break;
        case 3: r = v + noise(rng); break;
        case 4: r = 0.7 * v + 0.3 * kTint[0][c]; break;
        case 5: r = 0.7 * v + 0.3 * kTint[1][c]; break;
        case 6: r = 0.5 + 0.6 * (v - 0.5); break;
      }
      out[c * plane + p] = domain == 0 ? base[c * plane + p] : clamp01(r);
    }
  }
  return out;
}

fs::path image_path(const fs::path& root, const std::string& split, const std::string& domain_name, int n) {
  return root / split / domain_name / ("img_" + std::to_string(n) + ".ppm");
}

fs::path mask_path(const fs::path& root, const std::string& split, const std::string& domain_name, int n) {
  return root / split / domain_name / ("mask_" + std::to_string(n) + ".pgm");
}

void save_sample(const fs::path& image_file, const fs::path& mask_file, const SegSample& sample) {
  if (sample.image.dim(1) != sample.mask.shape.at(0) || sample.image.dim(2) != sample.mask.shape.at(1)) {
    throw ShapeError("save_sample: image and mask sizes differ");
  }
  write_netpbm(image_file, image_to_raster(sample.image));
  write_netpbm(mask_file, mask_to_raster(sample.mask));
}

SegSample load_sample(const fs::path& image_file, const fs::path& mask_file, int domain) {
  SegSample s;
  s.image = raster_to_image(read_netpbm(image_file));
  s.mask = raster_to_mask(read_netpbm(mask_file));
  if (s.image.dim(1) != s.mask.shape[0] || s.image.dim(2) != s.mask.shape[1]) {
    throw ParseError("load_sample: " + image_file.string() + " and " + mask_file.string() + " differ in size");
  }
  s.domain = domain;
  return s;
}

DatasetManifest generate_domain_dataset(const fs::path& root, const GenerateOptions& opts) {
  if (opts.domains < 1) throw std::invalid_argument("gen-data: domains must be >= 1");
  if (opts.domains > kMaxDomains) throw std::invalid_argument("gen-data: at most 7 domains are available");
  if (opts.per_domain < 2) throw std::invalid_argument("gen-data: per-domain must be >= 2");
  if (opts.size < 2 || opts.size % 2) throw std::invalid_argument("gen-data: size must be even and >= 2");

  DatasetManifest m;
  m.num_classes = kNumShapeClasses;
  m.class_names = shape_class_names();
  m.domain_names.assign(all_domain_names().begin(), all_domain_names().begin() + opts.domains);
  m.image_size = opts.size;
  m.seed = opts.seed;
  const int n_val = std::max(1, opts.per_domain / 4);
  const int n_train = opts.per_domain - n_val;
  m.splits = {"train", "val"};
  m.split_counts = {std::vector<int>(opts.domains, n_train), std::vector<int>(opts.domains, n_val)};

  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw std::runtime_error("cannot create " + root.string() + ": " + ec.message());
  for (int d = 0; d < opts.domains; ++d) {
    for (const auto& split : m.splits) {
      fs::create_directories(root / split / m.domain_names[d], ec);
      if (ec) throw std::runtime_error("cannot create output directory: " + ec.message());
    }
    for (int i = 0; i < opts.per_domain; ++i) {
      Rng rng = sample_rng(opts.seed, static_cast<std::uint64_t>(d) * opts.per_domain + i);
      SegSample s = render_base(rng, opts.size);
      s.image = apply_domain(s.image, d, rng);
      const bool train = i < n_train;
      const std::string split = train ? "train" : "val";
      const int n = train ? i : i - n_train;
      save_sample(image_path(root, split, m.domain_names[d], n), mask_path(root, split, m.domain_names[d], n), s);
    }
  }
  m.save(root);
  return m;
}

std::vector<SegSample> load_split(const fs::path& root, const DatasetManifest& manifest, const std::string& split,
                                  const std::vector<int>& domains) {
  std::vector<int> ds = domains;
  if (ds.empty()) {
    for (int d = 0; d < manifest.num_domains(); ++d) ds.push_back(d);
  }
  std::vector<SegSample> out;
  for (int d : ds) {
    if (d < 0 || d >= manifest.num_domains()) throw std::out_of_range("load_split: bad domain " + std::to_string(d));
    const std::string& name = manifest.domain_names[d];
    for (int n = 0; n < manifest.count(split, d); ++n) {
      SegSample s = load_sample(image_path(root, split, name, n), mask_path(root, split, name, n), d);
      s.id = split + "/" + name + "/" + std::to_string(n);
      for (int v : s.mask.data) {
        if (v >= manifest.num_classes) {
          throw ParseError(s.id + ": mask id " + std::to_string(v) + " >= num_classes");
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::pair<Tensor, LabelMap> stack_samples(const std::vector<SegSample>& samples, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_samples: empty selection");
  const Shape is = samples.at(indices[0]).image.shape();
  const int N = static_cast<int>(indices.size());
  Tensor images({N, is[0], is[1], is[2]});
  LabelMap masks({N, is[1], is[2]});
  const std::size_t ipl = samples[indices[0]].image.numel(), mpl = samples[indices[0]].mask.numel();
  for (int n = 0; n < N; ++n) {
    const SegSample& s = samples.at(indices[n]);
    if (s.image.shape() != is || s.mask.shape != Shape{is[1], is[2]}) {
      throw ShapeError("stack_samples: sample " + s.id + " has image " + shape_str(s.image.shape()) +
                       ", expected " + shape_str(is));
    }
    std::copy(s.image.ptr(), s.image.ptr() + ipl, images.ptr() + n * ipl);
    std::copy(s.mask.data.begin(), s.mask.data.end(), masks.data.begin() + static_cast<std::ptrdiff_t>(n * mpl));
  }
  return {std::move(images), std::move(masks)};
}

SegSample crop(const SegSample& s, int top, int left, int out) {
  const int H = s.image.dim(1), W = s.image.dim(2);
  if (out < 1 || out > H || out > W) {
    throw std::invalid_argument("crop: size " + std::to_string(out) + " exceeds image " + std::to_string(H) + "x" +
                                std::to_string(W));
  }
  if (top < 0 || left < 0 || top + out > H || left + out > W) throw std::invalid_argument("crop: window out of range");
  SegSample r;
  r.domain = s.domain;
  r.id = s.id;
  r.image = Tensor({3, out, out});
  r.mask = LabelMap({out, out});
  for (int y = 0; y < out; ++y)
    for (int x = 0; x < out; ++x) {
      for (int c = 0; c < 3; ++c)
        r.image[(static_cast<std::size_t>(c) * out + y) * out + x] =
            s.image[(static_cast<std::size_t>(c) * H + top + y) * W + left + x];
      r.mask.data[static_cast<std::size_t>(y) * out + x] = s.mask.data[static_cast<std::size_t>(top + y) * W + left + x];
    }
  return r;
}

SegSample random_crop(const SegSample& s, int out, Rng& rng) {
  const int H = s.image.dim(1), W = s.image.dim(2);
  if (out < 1 || out > H || out > W) {
    throw std::invalid_argument("random_crop: size " + std::to_string(out) + " exceeds image " + std::to_string(H) +
                                "x" + std::to_string(W));
  }
  std::uniform_int_distribution<int> ty(0, H - out), tx(0, W - out);
  const int top = ty(rng);
  const int left = tx(rng);
  return crop(s, top, left, out);
}

SegSample hflip(const SegSample& s) {
  SegSample r = s;
  const int H = s.image.dim(1), W = s.image.dim(2);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c)
        r.image[(static_cast<std::size_t>(c) * H + y) * W + x] = s.image[(static_cast<std::size_t>(c) * H + y) * W + (W - 1 - x)];
      r.mask.data[static_cast<std::size_t>(y) * W + x] = s.mask.data[static_cast<std::size_t>(y) * W + (W - 1 - x)];
    }
  return r;
}

SegSample random_hflip(const SegSample& s, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  return coin(rng) ? hflip(s) : s;
}

DomainBatchScheduler::DomainBatchScheduler(std::vector<std::pair<int, std::vector<int>>> samples_by_domain,
                                           int batch_size, std::uint64_t seed)
    : domains_(std::move(samples_by_domain)), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw std::invalid_argument("scheduler: batch size must be >= 1");
  if (domains_.empty()) throw std::invalid_argument("scheduler: no domains");
  for (const auto& [d, ids] : domains_) {
    if (ids.empty()) throw std::invalid_argument("scheduler: domain " + std::to_string(d) + " has no samples");
  }
}

std::size_t DomainBatchScheduler::batches_per_epoch() const {
  std::size_t n = 0;
  for (const auto& [d, ids] : domains_) n += (ids.size() + batch_size_ - 1) / batch_size_;
  return n;
}

std::vector<DomainBatch> DomainBatchScheduler::epoch(int epoch_index) const {
  std::vector<std::vector<DomainBatch>> queues;
  for (std::size_t i = 0; i < domains_.size(); ++i) {
    const auto& [d, ids] = domains_[i];
    std::vector<int> order = ids;
    Rng rng = sample_rng(seed_ ^ 0x5C4E0ull, static_cast<std::uint64_t>(epoch_index) * 1024 + i);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<DomainBatch> q;
    for (std::size_t s = 0; s < order.size(); s += batch_size_) {
      DomainBatch b;
      b.domain = d;
      b.samples.assign(order.begin() + static_cast<std::ptrdiff_t>(s),
                       order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + batch_size_)));
      q.push_back(std::move(b));
    }
    queues.push_back(std::move(q));
  }
  std::vector<DomainBatch> out;
  for (std::size_t round = 0;; ++round) {
    bool any = false;
    for (auto& q : queues) {
      if (round < q.size()) {
        out.push_back(std::move(q[round]));
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

}  // namespace dsg
