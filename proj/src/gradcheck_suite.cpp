#include "dsg/gradcheck_suite.hpp"

#include <chrono>
#include <cstdio>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <sstream>

#include "dsg/grad_check.hpp"
#include "dsg/model.hpp"

namespace dsg {

namespace {

struct Case {
  GradFn fn;
  std::vector<TensorD> inputs;
  std::vector<std::string> names;
};

using Builder = std::function<Case(std::mt19937_64&)>;

TensorD uniform(std::mt19937_64& rng, Shape s, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  TensorD t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Values bounded away from zero, for ops with a kink there.
TensorD away_from_zero(std::mt19937_64& rng, Shape s) {
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  TensorD t(std::move(s));
  for (auto& v : t.data()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// Small network config for the model-level ops: C = 8 features, K = 3 classes.
ModelConfig tiny_config() {
  ModelConfig c;
  c.num_classes = 3;
  c.base_channels = 4;
  c.low_channels = 4;
  c.num_fusion_blocks = 1;
  c.attn_dim = 4;
  c.norm_kind = NormKind::BN;
  return c;
}

// Runs fn with the named model parameters replaced by the trailing inputs.
// Eval mode normalizes with the given per-channel statistics of ocr.out.norm.
GradFn with_model(std::vector<std::string> params, int first_param,
                  std::function<Var(Forward<double>&, const std::vector<Var>&)> body, Mode mode = Mode::Train,
                  TensorD out_mean = {}, TensorD out_var = {}) {
  return [=](Tape<double>& tape, const std::vector<Var>& in) {
    Model<double> model(tiny_config());
    if (mode == Mode::Eval) {
      auto& n = model.norm("ocr.out.norm");
      n.running_mean = out_mean.reshaped({1, out_mean.dim(0)});
      n.running_var = out_var.reshaped({1, out_var.dim(0)});
      n.updates.assign(1, 1);
    }
    Forward<double> f(model, tape, mode, 0);
    for (std::size_t i = 0; i < params.size(); ++i) f.bind(params[i], in[first_param + i]);
    return body(f, in);
  };
}

// Appends random values for conv `layer` ([cout, cin, k, k] + [cout]) to c.
void add_conv_inputs(Case& c, std::mt19937_64& rng, const std::string& layer, int cout, int cin, int k,
                     double bias_offset = 0) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  c.inputs.push_back(uniform(rng, {cout, cin, k, k}, -bound, bound));
  c.names.push_back(layer + ".weight");
  c.inputs.push_back(uniform(rng, {cout}, bias_offset - 0.1, bias_offset + 0.1));
  c.names.push_back(layer + ".bias");
}

std::vector<std::string> tail(const std::vector<std::string>& v, std::size_t from) {
  return {v.begin() + static_cast<std::ptrdiff_t>(from), v.end()};
}

std::vector<std::pair<std::string, Builder>> builders() {
  std::vector<std::pair<std::string, Builder>> b;

  b.emplace_back("conv2d", [](std::mt19937_64& rng) {
    const int stride = 1 + static_cast<int>(rng() % 2);
    const int pad = static_cast<int>(rng() % 2);
    Case c;
    c.inputs = {uniform(rng, {2, 3, 5, 6}, -1, 1), uniform(rng, {4, 3, 3, 3}, -0.5, 0.5), uniform(rng, {4}, -1, 1)};
    c.names = {"x", "weight", "bias"};
    c.fn = [stride, pad](Tape<double>& t, const std::vector<Var>& v) {
      return ops::conv2d(t, v[0], v[1], v[2], stride, pad);
    };
    return c;
  });

  b.emplace_back("conv2d_1x1", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 5, 3, 4}, -1, 1), uniform(rng, {3, 5, 1, 1}, -0.5, 0.5), uniform(rng, {3}, -1, 1)};
    c.names = {"x", "weight", "bias"};
    c.fn = [](Tape<double>& t, const std::vector<Var>& v) { return ops::conv2d(t, v[0], v[1], v[2], 1, 0); };
    return c;
  });

  b.emplace_back("bilinear_resize", [](std::mt19937_64& rng) {
    const int oh = 2 + static_cast<int>(rng() % 9), ow = 2 + static_cast<int>(rng() % 9);
    Case c;
    c.inputs = {uniform(rng, {2, 3, 4, 5}, -1, 1)};
    c.names = {"x"};
    c.fn = [oh, ow](Tape<double>& t, const std::vector<Var>& v) { return ops::bilinear_resize(t, v[0], oh, ow); };
    return c;
  });

  b.emplace_back("softmax_axis", [](std::mt19937_64& rng) {
    const int axis = 1 + static_cast<int>(rng() % 3);
    Case c;
    c.inputs = {uniform(rng, {2, 4, 3, 3}, -2, 2)};
    c.names = {"x"};
    c.fn = [axis](Tape<double>& t, const std::vector<Var>& v) { return ops::softmax_axis(t, v[0], axis); };
    return c;
  });

  b.emplace_back("relu", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {away_from_zero(rng, {2, 3, 4, 4})};
    c.names = {"x"};
    c.fn = [](Tape<double>& t, const std::vector<Var>& v) { return ops::relu(t, v[0]); };
    return c;
  });

  b.emplace_back("sigmoid", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 3, 4, 4}, -6, 6)};
    c.names = {"x"};
    c.fn = [](Tape<double>& t, const std::vector<Var>& v) { return ops::sigmoid(t, v[0]); };
    return c;
  });

  b.emplace_back("concat", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 2, 3, 3}, -1, 1), uniform(rng, {2, 3, 3, 3}, -1, 1), uniform(rng, {2, 1, 3, 3}, -1, 1)};
    c.names = {"a", "b", "c"};
    c.fn = [](Tape<double>& t, const std::vector<Var>& v) { return ops::concat_channels(t, {v[0], v[1], v[2]}); };
    return c;
  });

  b.emplace_back("affine", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 3, 4, 4}, -1, 1), uniform(rng, {3}, 0.5, 1.5), uniform(rng, {3}, -1, 1)};
    c.names = {"x", "gain", "shift"};
    c.fn = [](Tape<double>& t, const std::vector<Var>& v) { return ops::channel_affine(t, v[0], v[1], v[2]); };
    return c;
  });

  b.emplace_back("avg_pool2", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 3, 4, 6}, -1, 1)};
    c.names = {"x"};
    c.fn = [](Tape<double>& t, const std::vector<Var>& v) { return ops::avg_pool2(t, v[0]); };
    return c;
  });

  b.emplace_back("log", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 3, 3, 3}, 0.2, 3)};
    c.names = {"x"};
    c.fn = [](Tape<double>& t, const std::vector<Var>& v) { return ops::log(t, v[0]); };
    return c;
  });

  b.emplace_back("add_sub_mul", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 3, 3, 3}, -1, 1), uniform(rng, {2, 3, 3, 3}, -1, 1), uniform(rng, {2, 3, 3, 3}, -1, 1)};
    c.names = {"a", "b", "c"};
    c.fn = [](Tape<double>& t, const std::vector<Var>& v) {
      return ops::mul(t, ops::add(t, v[0], ops::scale(t, v[1], 0.5)), ops::sub(t, v[2], v[0]));
    };
    return c;
  });

  b.emplace_back("bmm", [](std::mt19937_64& rng) {
    const bool ta = rng() % 2, tb = rng() % 2;
    Case c;
    c.inputs = {uniform(rng, ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, -1, 1),
                uniform(rng, tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, -1, 1)};
    c.names = {"a", "b"};
    c.fn = [ta, tb](Tape<double>& t, const std::vector<Var>& v) { return ops::bmm(t, v[0], v[1], ta, tb); };
    return c;
  });

  b.emplace_back("bn_forward_train", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {3, 4, 3, 3}, -2, 2), uniform(rng, {4}, 0.5, 1.5), uniform(rng, {4}, -1, 1)};
    c.names = {"x", "gamma", "beta"};
    c.fn = [](Tape<double>& t, const std::vector<Var>& v) { return bn_forward_train(t, v[0], v[1], v[2], 1e-5); };
    return c;
  });

  b.emplace_back("bn_forward_eval", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {3, 4, 3, 3}, -2, 2), uniform(rng, {4}, 0.5, 1.5), uniform(rng, {4}, -1, 1)};
    c.names = {"x", "gamma", "beta"};
    const TensorD mean = uniform(rng, {4}, -0.5, 0.5), var = uniform(rng, {4}, 0.2, 2);
    c.fn = [mean, var](Tape<double>& t, const std::vector<Var>& v) {
      return bn_forward_eval(t, v[0], v[1], v[2], 1e-5, mean.data(), var.data());
    };
    return c;
  });

  b.emplace_back("dbn_forward_train", [](std::mt19937_64& rng) {
    const int domain = static_cast<int>(rng() % 3);
    Case c;
    c.inputs = {uniform(rng, {2, 4, 3, 3}, -2, 2), uniform(rng, {4}, 0.5, 1.5), uniform(rng, {4}, -1, 1)};
    c.names = {"x", "gamma", "beta"};
    c.fn = [domain](Tape<double>& t, const std::vector<Var>& v) {
      DbnLayer<double> layer(4, 3);
      return layer.forward_train(t, v[0], v[1], v[2], domain);
    };
    return c;
  });

  b.emplace_back("dbn_forward_eval", [](std::mt19937_64& rng) {
    const int domain = static_cast<int>(rng() % 3);
    auto layer = std::make_shared<DbnLayer<double>>(4, 3);
    layer->running_mean = uniform(rng, {3, 4}, -0.5, 0.5);
    layer->running_var = uniform(rng, {3, 4}, 0.2, 2);
    layer->updates.assign(3, 1);
    Case c;
    c.inputs = {uniform(rng, {2, 4, 3, 3}, -2, 2), uniform(rng, {4}, 0.5, 1.5), uniform(rng, {4}, -1, 1)};
    c.names = {"x", "gamma", "beta"};
    c.fn = [layer, domain](Tape<double>& t, const std::vector<Var>& v) {
      return layer->forward_eval(t, v[0], v[1], v[2], domain);
    };
    return c;
  });

  b.emplace_back("soft_region_scores", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 8, 4, 4}, -1, 1)};
    c.names = {"features"};
    add_conv_inputs(c, rng, "ocr.region", 3, 8, 1);
    c.fn = with_model(tail(c.names, 1), 1,
                      [](Forward<double>& f, const std::vector<Var>& v) { return soft_region_scores(f, v[0]); });
    return c;
  });

  b.emplace_back("region_representations", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 8, 4, 4}, -1, 1), uniform(rng, {2, 3, 4, 4}, -2, 2)};
    c.names = {"features", "region_logits"};
    c.fn = [](Tape<double>& t, const std::vector<Var>& v) { return region_representations(t, v[0], v[1]); };
    return c;
  });

  // ocr.key.bias never reaches the output (softmax over regions ignores a
  // shared shift), so it is left out of the OCR rows. With batch statistics
  // the value and output biases are cancelled by the mean subtraction too;
  // the eval-mode row covers them.
  b.emplace_back("object_contextual_augment", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 8, 4, 4}, -1, 1), uniform(rng, {2, 3, 8}, -1, 1)};
    c.names = {"features", "regions"};
    add_conv_inputs(c, rng, "ocr.query", 4, 8, 1);
    c.inputs.push_back(uniform(rng, {4, 8, 1, 1}, -0.35, 0.35));
    c.names.push_back("ocr.key.weight");
    add_conv_inputs(c, rng, "ocr.value", 4, 8, 1);
    add_conv_inputs(c, rng, "ocr.out", 8, 12, 1);
    c.inputs.push_back(uniform(rng, {8}, 0.5, 1.0));
    c.names.push_back("ocr.out.norm.gamma");
    // beta well above zero keeps the closing relu away from its kink
    c.inputs.push_back(uniform(rng, {8}, 6.0, 7.0));
    c.names.push_back("ocr.out.norm.beta");
    const TensorD mean = uniform(rng, {8}, -0.2, 0.2), var = uniform(rng, {8}, 0.5, 1.5);
    c.fn = with_model(
        tail(c.names, 2), 2,
        [](Forward<double>& f, const std::vector<Var>& v) { return object_contextual_augment(f, v[0], v[1]).output; },
        Mode::Eval, mean, var);
    return c;
  });

  b.emplace_back("object_contextual_augment_train", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 8, 4, 4}, -1, 1), uniform(rng, {2, 3, 8}, -1, 1)};
    c.names = {"features", "regions"};
    add_conv_inputs(c, rng, "ocr.query", 4, 8, 1);
    for (const char* layer : {"ocr.key", "ocr.value"}) {
      c.inputs.push_back(uniform(rng, {4, 8, 1, 1}, -0.35, 0.35));
      c.names.push_back(std::string(layer) + ".weight");
    }
    c.inputs.push_back(uniform(rng, {8, 12, 1, 1}, -0.29, 0.29));
    c.names.push_back("ocr.out.weight");
    c.inputs.push_back(uniform(rng, {8}, 0.5, 1.0));
    c.names.push_back("ocr.out.norm.gamma");
    c.inputs.push_back(uniform(rng, {8}, 6.0, 7.0));
    c.names.push_back("ocr.out.norm.beta");
    c.fn = with_model(tail(c.names, 2), 2, [](Forward<double>& f, const std::vector<Var>& v) {
      return object_contextual_augment(f, v[0], v[1]).output;
    });
    return c;
  });

  b.emplace_back("ocr_attention_weights", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 8, 4, 4}, -1, 1), uniform(rng, {2, 3, 8}, -1, 1)};
    c.names = {"features", "regions"};
    add_conv_inputs(c, rng, "ocr.query", 4, 8, 1);
    c.inputs.push_back(uniform(rng, {4, 8, 1, 1}, -0.35, 0.35));
    c.names.push_back("ocr.key.weight");
    c.fn = with_model(tail(c.names, 2), 2, [](Forward<double>& f, const std::vector<Var>& v) {
      return object_contextual_augment(f, v[0], v[1]).weights;
    });
    return c;
  });

  b.emplace_back("attention_mask", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 8, 4, 4}, -1, 1)};
    c.names = {"features"};
    // hidden pre-activations sit near the bias (|w.x| stays well below 2)
    add_conv_inputs(c, rng, "hma.attn1", 4, 8, 3, 2.0);
    add_conv_inputs(c, rng, "hma.attn2", 1, 4, 3);
    c.fn = with_model(tail(c.names, 1), 1,
                      [](Forward<double>& f, const std::vector<Var>& v) { return attention_mask(f, v[0]); });
    return c;
  });

  b.emplace_back("fuse_two_scales", [](std::mt19937_64& rng) {
    Case c;
    c.inputs = {uniform(rng, {2, 3, 3, 3}, -2, 2), uniform(rng, {2, 3, 6, 6}, -2, 2), uniform(rng, {2, 1, 3, 3}, 0.05, 0.95)};
    c.names = {"coarse", "fine", "mask"};
    c.fn = [](Tape<double>& t, const std::vector<Var>& v) { return fuse_two_scales(t, v[0], v[1], v[2]); };
    return c;
  });

  b.emplace_back("cross_entropy", [](std::mt19937_64& rng) {
    LabelMap labels({2, 3, 3});
    for (auto& l : labels.data) l = static_cast<int>(rng() % 5);  // id 4 acts as ignore
    const bool ignore = rng() % 2;
    if (!ignore)
      for (auto& l : labels.data) l %= 4;
    Case c;
    c.inputs = {uniform(rng, {2, 4, 3, 3}, -3, 3)};
    c.names = {"logits"};
    c.fn = [labels, ignore](Tape<double>& t, const std::vector<Var>& v) {
      return ops::cross_entropy(t, v[0], labels, ignore ? std::optional<int>(4) : std::nullopt);
    };
    return c;
  });

  return b;
}

}  // namespace

bool SuiteResult::passed() const {
  for (const auto& r : rows)
    if (!r.passed) return false;
  return !rows.empty();
}

std::vector<std::string> gradcheck_suite_ops() {
  std::vector<std::string> out;
  for (const auto& [name, _] : builders()) out.push_back(name);
  return out;
}

SuiteResult run_gradcheck_suite(int seeds, double tolerance, std::ostream* progress) {
  using clock = std::chrono::steady_clock;
  SuiteResult res;
  res.tolerance = tolerance;
  const auto t0 = clock::now();
  for (const auto& [name, build] : builders()) {
    const auto s0 = clock::now();
    SuiteRow row;
    row.op = name;
    row.seeds = seeds;
    for (int s = 0; s < seeds; ++s) {
      std::mt19937_64 rng(0x6C0DE + 7919ULL * static_cast<std::uint64_t>(s));
      Case c = build(rng);
      GradCheckOptions opts;
      opts.seed = static_cast<std::uint64_t>(s);
      opts.max_coords_per_input = 48;
      const GradCheckReport rep = grad_check(c.fn, c.inputs, c.names, opts);
      if (rep.max_error() >= row.max_rel_error) {
        row.max_rel_error = rep.max_error();
        row.worst = "seed " + std::to_string(s) + "\n" + rep.summary();
      }
    }
    row.passed = row.max_rel_error <= tolerance;
    row.seconds = std::chrono::duration<double>(clock::now() - s0).count();
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-32s %s  max_rel=%.3e\n", name.c_str(), row.passed ? "PASS" : "FAIL",
                    row.max_rel_error);
      *progress << buf << std::flush;
    }
    res.rows.push_back(std::move(row));
  }
  res.seconds = std::chrono::duration<double>(clock::now() - t0).count();
  return res;
}

std::string format_suite(const SuiteResult& r) {
  std::ostringstream os;
  char buf[200];
  std::snprintf(buf, sizeof buf, "%-32s %6s %12s %8s  %s\n", "op", "seeds", "max_rel_err", "seconds", "result");
  os << buf;
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%-32s %6d %12.3e %8.2f  %s\n", row.op.c_str(), row.seeds, row.max_rel_error,
                  row.seconds, row.passed ? "PASS" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "tolerance %.1e, total %.2fs: %s\n", r.tolerance, r.seconds,
                r.passed() ? "PASS" : "FAIL");
  os << buf;
  for (const auto& row : r.rows)
    if (!row.passed) os << "worst case for " << row.op << ": " << row.worst;
  return os.str();
}

}  // namespace dsg
