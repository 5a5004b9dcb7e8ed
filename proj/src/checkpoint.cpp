#include "dsg/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dsg {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'D', 'S', 'G', '1'};
constexpr std::uint32_t kMaxRank = 8;

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

class Reader {
 public:
  Reader(const std::string& b, const std::string& origin) : b_(b), origin_(origin) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, b_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void floats(float* dst, std::size_t n, const char* what) {
    need(n * 4, what);
    std::memcpy(dst, b_.data() + pos_, n * 4);
    pos_ += n * 4;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

  [[noreturn]] void fail(const std::string& msg) const {
    throw CheckpointError(origin_ + ": " + msg + " at offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      fail(std::string("truncated while reading ") + what + " (need " + std::to_string(n) + " bytes, have " +
           std::to_string(b_.size() - pos_) + ")");
    }
  }

  const std::string& b_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

Tensor scalar(double v) { return Tensor({1}, static_cast<float>(v)); }

double get_scalar(const NamedTensors& t, const std::string& key) {
  auto it = t.find(key);
  if (it == t.end()) throw CheckpointError("checkpoint is missing " + key);
  if (it->second.numel() != 1) throw CheckpointError(key + ": expected a single value");
  return it->second[0];
}

const Tensor& get(const NamedTensors& t, const std::string& key, const Shape& shape) {
  auto it = t.find(key);
  if (it == t.end()) throw CheckpointError("checkpoint is missing " + key);
  if (it->second.shape() != shape) {
    throw CheckpointError(key + ": shape " + shape_str(it->second.shape()) + " does not match model shape " +
                          shape_str(shape));
  }
  return it->second;
}

}  // namespace

std::string encode_tensors(const NamedTensors& tensors) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(float));
  }
  return out;
}

NamedTensors decode_tensors(const std::string& bytes, const std::string& origin) {
  Reader rd(bytes, origin);
  if (rd.bytes(4, "magic") != std::string(kMagic, 4)) {
    throw CheckpointError(origin + ": bad magic at offset 0 (not a DSG1 checkpoint)");
  }
  const std::uint32_t version = rd.u32("version");
  if (version != kCheckpointVersion) rd.fail("unsupported version " + std::to_string(version));
  const std::uint32_t count = rd.u32("tensor count");
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = rd.u32("name length");
    if (len == 0 || len > 4096) rd.fail("implausible name length " + std::to_string(len));
    std::string name = rd.bytes(len, "name");
    const std::uint32_t rank = rd.u32("rank");
    if (rank == 0 || rank > kMaxRank) rd.fail(name + ": implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      const std::uint32_t v = rd.u32("dimension");
      if (v == 0 || v > (1u << 28)) rd.fail(name + ": implausible dimension " + std::to_string(v));
      d = static_cast<int>(v);
      numel *= v;
      if (numel > (std::size_t(1) << 30)) rd.fail(name + ": tensor too large");
    }
    Tensor t(shape);
    rd.floats(t.ptr(), numel, "tensor values");
    if (!out.emplace(std::move(name), std::move(t)).second) rd.fail("duplicate tensor name");
  }
  if (!rd.done()) rd.fail("trailing bytes after last tensor");
  return out;
}

NamedTensors model_to_tensors(const Model<float>& model) {
  NamedTensors out;
  for (const auto& [name, t] : model.trainable()) out.emplace(name, *t);
  for (const auto& [layer, n] : model.norms()) {
    out.emplace("dbn." + layer + ".mean", n.running_mean);
    out.emplace("dbn." + layer + ".var", n.running_var);
    Tensor count({n.num_domains()});
    for (int d = 0; d < n.num_domains(); ++d) count[d] = static_cast<float>(n.updates[d]);
    out.emplace("dbn." + layer + ".count", count);
  }
  const ModelConfig& c = model.config();
  out.emplace("config.num_classes", scalar(c.num_classes));
  out.emplace("config.base_channels", scalar(c.base_channels));
  out.emplace("config.low_channels", scalar(c.low_channels));
  out.emplace("config.num_fusion_blocks", scalar(c.num_fusion_blocks));
  out.emplace("config.norm_kind", scalar(c.norm_kind == NormKind::DBN ? 1 : 0));
  out.emplace("config.num_domains", scalar(c.num_domains));
  out.emplace("config.attn_dim", scalar(c.attn_dim));
  out.emplace("config.epsilon", scalar(c.epsilon));
  out.emplace("config.stats_momentum", scalar(c.stats_momentum));
  return out;
}

Model<float> model_from_tensors(const NamedTensors& t) {
  ModelConfig c;
  c.num_classes = static_cast<int>(get_scalar(t, "config.num_classes"));
  c.base_channels = static_cast<int>(get_scalar(t, "config.base_channels"));
  c.low_channels = static_cast<int>(get_scalar(t, "config.low_channels"));
  c.num_fusion_blocks = static_cast<int>(get_scalar(t, "config.num_fusion_blocks"));
  c.norm_kind = get_scalar(t, "config.norm_kind") != 0 ? NormKind::DBN : NormKind::BN;
  c.num_domains = static_cast<int>(get_scalar(t, "config.num_domains"));
  c.attn_dim = static_cast<int>(get_scalar(t, "config.attn_dim"));
  c.epsilon = static_cast<float>(get_scalar(t, "config.epsilon"));
  c.stats_momentum = static_cast<float>(get_scalar(t, "config.stats_momentum"));
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }
  Model<float> m(c);
  for (auto& [name, dst] : m.trainable()) *dst = get(t, name, dst->shape());
  for (auto& [layer, n] : m.norms()) {
    n.running_mean = get(t, "dbn." + layer + ".mean", n.running_mean.shape());
    n.running_var = get(t, "dbn." + layer + ".var", n.running_var.shape());
    const Tensor& count = get(t, "dbn." + layer + ".count", {n.num_domains()});
    for (int d = 0; d < n.num_domains(); ++d) n.updates[d] = static_cast<std::int64_t>(count[d]);
  }
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const NamedTensors& extra) {
  NamedTensors all = model_to_tensors(model);
  for (const auto& [k, v] : extra) {
    if (!all.emplace(k, v).second) throw CheckpointError("extra tensor collides with model tensor: " + k);
  }
  const std::string bytes = encode_tensors(all);
  // write-then-rename so a crash never leaves a half-written checkpoint behind
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  NamedTensors t = decode_tensors(ss.str(), path.string());
  Model<float> m = model_from_tensors(t);
  return {std::move(m), std::move(t)};
}

}  // namespace dsg
