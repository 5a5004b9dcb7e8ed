#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsg/tape.hpp"

namespace dsg {

class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Batch normalization with batch statistics: per channel, mean and population
/// variance (divisor N*H*W) over the batch, then gamma * (x - mean) /
/// sqrt(var + eps) + beta. When non-null, mean/var receive the batch statistics.
template <typename T>
Var bn_forward_train(Tape<T>& tape, Var input, Var gamma, Var beta, T epsilon,
                     BasicTensor<T>* batch_mean = nullptr, BasicTensor<T>* batch_var = nullptr);

/// Normalization with supplied statistics (one value per channel).
template <typename T>
Var bn_forward_eval(Tape<T>& tape, Var input, Var gamma, Var beta, T epsilon,
                    std::span<const T> mean, std::span<const T> var);

/// Domain-based batch normalization layer. One gamma/beta pair is shared by all
/// domains; running statistics are kept per domain and are only touched by
/// training-mode calls for that domain.
template <typename T>
class DbnLayer {
 public:
  DbnLayer() = default;
  DbnLayer(int channels, int num_domains, T epsilon = T(1e-5), T stats_momentum = T(0.1));

  int channels() const { return gamma.dim(0); }
  int num_domains() const { return running_mean.dim(0); }

  /// Normalizes with this batch's statistics and folds them into the running
  /// statistics of `domain`: running <- (1 - m) * running + m * batch.
  Var forward_train(Tape<T>& tape, Var input, Var gamma_var, Var beta_var, int domain);

  /// Same, after checking that every sample in the batch carries one domain.
  Var forward_train(Tape<T>& tape, Var input, Var gamma_var, Var beta_var,
                    std::span<const int> sample_domains);

  /// Batch statistics without touching running statistics.
  Var forward_batch_stats(Tape<T>& tape, Var input, Var gamma_var, Var beta_var) const;

  /// Normalizes with the stored statistics of `domain`. A domain that never
  /// received a training update falls back to the mean of the updated domains'
  /// statistics and a warning is appended to `warnings` (when non-null).
  Var forward_eval(Tape<T>& tape, Var input, Var gamma_var, Var beta_var, int domain,
                   std::vector<std::string>* warnings = nullptr) const;

  /// Value-level conveniences using the layer's own gamma/beta.
  BasicTensor<T> train(const BasicTensor<T>& input, int domain);
  BasicTensor<T> eval(const BasicTensor<T>& input, int domain,
                      std::vector<std::string>* warnings = nullptr) const;

  /// Statistics used for eval on `domain` (after any fallback).
  std::pair<std::vector<T>, std::vector<T>> eval_stats(int domain, std::vector<std::string>* warnings) const;

  BasicTensor<T> gamma;          // [C]
  BasicTensor<T> beta;           // [C]
  BasicTensor<T> running_mean;   // [D,C]
  BasicTensor<T> running_var;    // [D,C]
  std::vector<std::int64_t> updates;  // training updates received per domain
  T epsilon = T(1e-5);
  T stats_momentum = T(0.1);

 private:
  void check_domain(int domain) const;
};

}  // namespace dsg
