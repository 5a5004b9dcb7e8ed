#include "dsg/normalization.hpp"

#include <cmath>
#include <memory>

namespace dsg {

namespace {

struct Layout {
  int N, C;
  std::size_t plane;
};

template <typename T>
Layout layout_of(const BasicTensor<T>& x, std::size_t gamma_n, std::size_t beta_n) {
  if (x.rank() != 4) throw ShapeError("batch norm: expected [N,C,H,W], got " + shape_str(x.shape()));
  Layout l{x.dim(0), x.dim(1), static_cast<std::size_t>(x.dim(2)) * x.dim(3)};
  if (gamma_n != static_cast<std::size_t>(l.C) || beta_n != static_cast<std::size_t>(l.C)) {
    throw ShapeError("batch norm: gamma/beta must have " + std::to_string(l.C) + " entries");
  }
  return l;
}

template <typename T>
void batch_stats(const BasicTensor<T>& x, const Layout& l, std::vector<T>& mean, std::vector<T>& var) {
  const std::size_t count = static_cast<std::size_t>(l.N) * l.plane;
  if (count < 2) throw ShapeError("batch norm: need at least 2 values per channel, got " + std::to_string(count));
  mean.assign(l.C, T(0));
  var.assign(l.C, T(0));
  for (int c = 0; c < l.C; ++c) {
    T s = 0;
    for (int n = 0; n < l.N; ++n) {
      const T* p = x.ptr() + (static_cast<std::size_t>(n) * l.C + c) * l.plane;
      for (std::size_t i = 0; i < l.plane; ++i) s += p[i];
    }
    const T m = s / static_cast<T>(count);
    T q = 0;
    for (int n = 0; n < l.N; ++n) {
      const T* p = x.ptr() + (static_cast<std::size_t>(n) * l.C + c) * l.plane;
      for (std::size_t i = 0; i < l.plane; ++i) {
        const T d = p[i] - m;
        q += d * d;
      }
    }
    mean[c] = m;
    var[c] = q / static_cast<T>(count);
  }
}

// y = gamma * (x - mean) * inv_std + beta; xhat saved for backward.
template <typename T>
BasicTensor<T> normalize(const BasicTensor<T>& x, const Layout& l, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, const std::vector<T>& mean,
                         const std::vector<T>& inv_std, BasicTensor<T>& xhat) {
  BasicTensor<T> y(x.shape());
  xhat = BasicTensor<T>(x.shape());
  for (int n = 0; n < l.N; ++n)
    for (int c = 0; c < l.C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * l.C + c) * l.plane;
      for (std::size_t i = 0; i < l.plane; ++i) {
        const T h = (x[base + i] - mean[c]) * inv_std[c];
        xhat[base + i] = h;
        y[base + i] = gamma[c] * h + beta[c];
      }
    }
  return y;
}

template <typename T>
std::vector<T> inverse_std(const std::vector<T>& var, T eps) {
  std::vector<T> inv(var.size());
  for (std::size_t c = 0; c < var.size(); ++c) inv[c] = T(1) / std::sqrt(var[c] + eps);
  return inv;
}

// Gradients of gamma and beta shared by both modes.
template <typename T>
void affine_grads(const BasicTensor<T>& gy, const BasicTensor<T>& xhat, const Layout& l,
                  BasicTensor<T>& ggamma, BasicTensor<T>& gbeta) {
  ggamma = BasicTensor<T>({l.C});
  gbeta = BasicTensor<T>({l.C});
  for (int c = 0; c < l.C; ++c) {
    T sg = 0, sb = 0;
    for (int n = 0; n < l.N; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * l.C + c) * l.plane;
      for (std::size_t i = 0; i < l.plane; ++i) {
        sg += gy[base + i] * xhat[base + i];
        sb += gy[base + i];
      }
    }
    ggamma[c] = sg;
    gbeta[c] = sb;
  }
}

template <typename T>
Var record_batch_norm(Tape<T>& tape, Var input, Var gamma, Var beta, T epsilon,
                      std::vector<T>& mean, std::vector<T>& var) {
  const auto& x = tape.value(input);
  const Layout l = layout_of(x, tape.value(gamma).numel(), tape.value(beta).numel());
  batch_stats(x, l, mean, var);
  auto inv = std::make_shared<std::vector<T>>(inverse_std(var, epsilon));
  auto xhat = std::make_shared<BasicTensor<T>>();
  BasicTensor<T> y = normalize(x, l, tape.value(gamma), tape.value(beta), mean, *inv, *xhat);
  return tape.record(std::move(y), {input, gamma, beta},
                     [&tape, gamma, l, inv, xhat](const BasicTensor<T>& gy) {
                       const auto& g = tape.value(gamma);
                       const T count = static_cast<T>(static_cast<std::size_t>(l.N) * l.plane);
                       BasicTensor<T> gx(gy.shape()), ggamma, gbeta;
                       affine_grads(gy, *xhat, l, ggamma, gbeta);
                       // dx = inv/M * (M*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)),
                       // dxhat = gy * gamma, so the sums are gamma*gbeta and gamma*ggamma.
                       for (int c = 0; c < l.C; ++c) {
                         const T sum_d = g[c] * gbeta[c];
                         const T sum_dh = g[c] * ggamma[c];
                         const T k = (*inv)[c] / count;
                         for (int n = 0; n < l.N; ++n) {
                           const std::size_t base = (static_cast<std::size_t>(n) * l.C + c) * l.plane;
                           for (std::size_t i = 0; i < l.plane; ++i) {
                             const T d = gy[base + i] * g[c];
                             gx[base + i] = k * (count * d - sum_d - (*xhat)[base + i] * sum_dh);
                           }
                         }
                       }
                       return std::vector<BasicTensor<T>>{std::move(gx), std::move(ggamma), std::move(gbeta)};
                     });
}

}  // namespace

template <typename T>
Var bn_forward_train(Tape<T>& tape, Var input, Var gamma, Var beta, T epsilon,
                     BasicTensor<T>* batch_mean, BasicTensor<T>* batch_var) {
  std::vector<T> mean, var;
  const Var out = record_batch_norm(tape, input, gamma, beta, epsilon, mean, var);
  const int C = static_cast<int>(mean.size());
  if (batch_mean) *batch_mean = BasicTensor<T>({C}, mean);
  if (batch_var) *batch_var = BasicTensor<T>({C}, var);
  return out;
}

template <typename T>
Var bn_forward_eval(Tape<T>& tape, Var input, Var gamma, Var beta, T epsilon,
                    std::span<const T> mean, std::span<const T> var) {
  const auto& x = tape.value(input);
  const Layout l = layout_of(x, tape.value(gamma).numel(), tape.value(beta).numel());
  if (mean.size() != static_cast<std::size_t>(l.C) || var.size() != static_cast<std::size_t>(l.C)) {
    throw ShapeError("batch norm eval: statistics must have " + std::to_string(l.C) + " entries");
  }
  const std::vector<T> mu(mean.begin(), mean.end());
  auto inv = std::make_shared<std::vector<T>>(inverse_std(std::vector<T>(var.begin(), var.end()), epsilon));
  auto xhat = std::make_shared<BasicTensor<T>>();
  BasicTensor<T> y = normalize(x, l, tape.value(gamma), tape.value(beta), mu, *inv, *xhat);
  return tape.record(std::move(y), {input, gamma, beta}, [&tape, gamma, l, inv, xhat](const BasicTensor<T>& gy) {
    const auto& g = tape.value(gamma);
    BasicTensor<T> gx(gy.shape()), ggamma, gbeta;
    affine_grads(gy, *xhat, l, ggamma, gbeta);
    for (int n = 0; n < l.N; ++n)
      for (int c = 0; c < l.C; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * l.C + c) * l.plane;
        for (std::size_t i = 0; i < l.plane; ++i) gx[base + i] = gy[base + i] * g[c] * (*inv)[c];
      }
    return std::vector<BasicTensor<T>>{std::move(gx), std::move(ggamma), std::move(gbeta)};
  });
}

template <typename T>
DbnLayer<T>::DbnLayer(int channels, int num_domains, T eps, T momentum)
    : gamma({channels}, T(1)),
      beta({channels}, T(0)),
      running_mean({num_domains, channels}, T(0)),
      running_var({num_domains, channels}, T(1)),
      updates(static_cast<std::size_t>(num_domains), 0),
      epsilon(eps),
      stats_momentum(momentum) {
  if (num_domains < 1) throw DomainError("DBN: num_domains must be >= 1");
  if (channels < 1) throw ShapeError("DBN: channels must be >= 1");
}

template <typename T>
void DbnLayer<T>::check_domain(int domain) const {
  if (domain < 0 || domain >= num_domains()) {
    throw DomainError("DBN: domain " + std::to_string(domain) + " out of range [0, " +
                      std::to_string(num_domains()) + ")");
  }
}

template <typename T>
Var DbnLayer<T>::forward_train(Tape<T>& tape, Var input, Var gamma_var, Var beta_var, int domain) {
  check_domain(domain);
  BasicTensor<T> mean, var;
  const Var out = bn_forward_train(tape, input, gamma_var, beta_var, epsilon, &mean, &var);
  const int C = channels();
  T* rm = running_mean.ptr() + static_cast<std::size_t>(domain) * C;
  T* rv = running_var.ptr() + static_cast<std::size_t>(domain) * C;
  for (int c = 0; c < C; ++c) {
    rm[c] = (T(1) - stats_momentum) * rm[c] + stats_momentum * mean[c];
    rv[c] = (T(1) - stats_momentum) * rv[c] + stats_momentum * var[c];
  }
  ++updates[static_cast<std::size_t>(domain)];
  return out;
}

template <typename T>
Var DbnLayer<T>::forward_train(Tape<T>& tape, Var input, Var gamma_var, Var beta_var,
                               std::span<const int> sample_domains) {
  if (sample_domains.empty()) throw DomainError("DBN: empty domain list");
  if (sample_domains.size() != static_cast<std::size_t>(tape.value(input).dim(0))) {
    throw DomainError("DBN: " + std::to_string(sample_domains.size()) + " domain ids for batch of " +
                      std::to_string(tape.value(input).dim(0)));
  }
  for (int d : sample_domains) {
    if (d != sample_domains[0]) {
      throw DomainError("DBN: mixed-domain batch (" + std::to_string(sample_domains[0]) + " and " +
                        std::to_string(d) + ")");
    }
  }
  return forward_train(tape, input, gamma_var, beta_var, sample_domains[0]);
}

template <typename T>
Var DbnLayer<T>::forward_batch_stats(Tape<T>& tape, Var input, Var gamma_var, Var beta_var) const {
  return bn_forward_train(tape, input, gamma_var, beta_var, epsilon);
}

template <typename T>
std::pair<std::vector<T>, std::vector<T>> DbnLayer<T>::eval_stats(int domain,
                                                                  std::vector<std::string>* warnings) const {
  check_domain(domain);
  const int C = channels();
  std::vector<T> mean(C), var(C);
  if (updates[static_cast<std::size_t>(domain)] > 0) {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean[static_cast<std::size_t>(domain) * C + c];
      var[c] = running_var[static_cast<std::size_t>(domain) * C + c];
    }
    return {mean, var};
  }
  int seen = 0;
  for (int d = 0; d < num_domains(); ++d) {
    if (updates[static_cast<std::size_t>(d)] == 0) continue;
    ++seen;
    for (int c = 0; c < C; ++c) {
      mean[c] += running_mean[static_cast<std::size_t>(d) * C + c];
      var[c] += running_var[static_cast<std::size_t>(d) * C + c];
    }
  }
  if (seen == 0) {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean[static_cast<std::size_t>(domain) * C + c];
      var[c] = running_var[static_cast<std::size_t>(domain) * C + c];
    }
    if (warnings) {
      warnings->push_back("domain " + std::to_string(domain) +
                          " has no running statistics and no domain was ever updated; using initial values");
    }
    return {mean, var};
  }
  for (int c = 0; c < C; ++c) {
    mean[c] /= static_cast<T>(seen);
    var[c] /= static_cast<T>(seen);
  }
  if (warnings) {
    warnings->push_back("domain " + std::to_string(domain) + " was never trained; using the average of " +
                        std::to_string(seen) + " trained domains' running statistics");
  }
  return {mean, var};
}

template <typename T>
Var DbnLayer<T>::forward_eval(Tape<T>& tape, Var input, Var gamma_var, Var beta_var, int domain,
                              std::vector<std::string>* warnings) const {
  const auto [mean, var] = eval_stats(domain, warnings);
  return bn_forward_eval<T>(tape, input, gamma_var, beta_var, epsilon, mean, var);
}

template <typename T>
BasicTensor<T> DbnLayer<T>::train(const BasicTensor<T>& input, int domain) {
  Tape<T> tape;
  const Var x = tape.constant(input);
  const Var out = forward_train(tape, x, tape.constant(gamma), tape.constant(beta), domain);
  return tape.value(out);
}

template <typename T>
BasicTensor<T> DbnLayer<T>::eval(const BasicTensor<T>& input, int domain, std::vector<std::string>* warnings) const {
  Tape<T> tape;
  const Var x = tape.constant(input);
  const Var out = forward_eval(tape, x, tape.constant(gamma), tape.constant(beta), domain, warnings);
  return tape.value(out);
}

template Var bn_forward_train<float>(Tape<float>&, Var, Var, Var, float, BasicTensor<float>*, BasicTensor<float>*);
template Var bn_forward_train<double>(Tape<double>&, Var, Var, Var, double, BasicTensor<double>*, BasicTensor<double>*);
template Var bn_forward_eval<float>(Tape<float>&, Var, Var, Var, float, std::span<const float>, std::span<const float>);
template Var bn_forward_eval<double>(Tape<double>&, Var, Var, Var, double, std::span<const double>, std::span<const double>);
template class DbnLayer<float>;
template class DbnLayer<double>;

}  // namespace dsg
