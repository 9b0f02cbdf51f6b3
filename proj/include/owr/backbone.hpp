#pragma once

// Feature extractor: a stack of affine layers with hand-written forward and
// backward passes, frozen snapshots and SGD with momentum.

#include "owr/types.hpp"

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace owr {

enum class Activation { relu, identity };

struct ExtractorConfig {
  int input_dim = 0;
  std::vector<int> layer_dims;  // last entry is the feature dimension
  Activation activation = Activation::relu;
  std::uint64_t init_seed = 0;

  int feature_dim() const { return layer_dims.empty() ? 0 : layer_dims.back(); }

  void validate() const {
    if (input_dim <= 0) throw ConfigError("extractor: input_dim must be positive");
    if (layer_dims.empty()) throw ConfigError("extractor: layer_dims must not be empty");
    for (int d : layer_dims)
      if (d <= 0) throw ConfigError("extractor: layer dimensions must be positive");
    if (activation == Activation::identity && layer_dims.size() > 1)
      throw ConfigError("extractor: identity activation requires a single linear layer");
  }
};

template <typename Scalar>
struct Layer {
  MatrixX<Scalar> weight;  // out x in
  VectorX<Scalar> bias;    // out
};

/// Parameters, gradients and velocity buffers share this layout.
template <typename Scalar>
using ParameterSet = std::vector<Layer<Scalar>>;

template <typename Scalar>
ParameterSet<Scalar> zeros_like(const ParameterSet<Scalar>& params) {
  ParameterSet<Scalar> out;
  out.reserve(params.size());
  for (const auto& l : params)
    out.push_back({MatrixX<Scalar>::Zero(l.weight.rows(), l.weight.cols()), VectorX<Scalar>::Zero(l.bias.size())});
  return out;
}

template <typename Scalar>
bool same_shapes(const ParameterSet<Scalar>& a, const ParameterSet<Scalar>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].weight.rows() != b[i].weight.rows() || a[i].weight.cols() != b[i].weight.cols() ||
        a[i].bias.size() != b[i].bias.size())
      return false;
  }
  return true;
}

namespace detail {
inline std::uint64_t next_generation() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

template <typename Scalar>
struct ForwardCache {
  std::uint64_t generation = 0;
  std::vector<MatrixX<Scalar>> inputs;  // input of each layer
  std::vector<MatrixX<Scalar>> pre;     // pre-activation of each layer
};

template <typename Scalar>
struct ForwardResult {
  MatrixX<Scalar> features;
  ForwardCache<Scalar> cache;
};

template <typename Scalar>
class BasicExtractor {
 public:
  BasicExtractor() = default;

  /// Glorot-uniform weights drawn from `config.init_seed`, zero biases.
  explicit BasicExtractor(ExtractorConfig config) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(config_.init_seed);
    int fan_in = config_.input_dim;
    for (int fan_out : config_.layer_dims) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      Layer<Scalar> layer{MatrixX<Scalar>(fan_out, fan_in), VectorX<Scalar>::Zero(fan_out)};
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = Scalar(dist(rng));
      layers_.push_back(std::move(layer));
      fan_in = fan_out;
    }
    generation_ = detail::next_generation();
  }

  BasicExtractor(ExtractorConfig config, ParameterSet<Scalar> params)
      : config_(std::move(config)), layers_(std::move(params)) {
    config_.validate();
    if (layers_.size() != config_.layer_dims.size()) throw ShapeError("extractor: layer count mismatch");
    int fan_in = config_.input_dim;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const int fan_out = config_.layer_dims[k];
      if (layers_[k].weight.rows() != fan_out || layers_[k].weight.cols() != fan_in ||
          layers_[k].bias.size() != fan_out)
        throw ShapeError("extractor: parameter shapes do not chain at layer " + std::to_string(k));
      require_finite(layers_[k].weight, "extractor weight");
      require_finite(layers_[k].bias, "extractor bias");
      fan_in = fan_out;
    }
    generation_ = detail::next_generation();
  }

  const ExtractorConfig& config() const { return config_; }
  const ParameterSet<Scalar>& parameters() const { return layers_; }
  std::uint64_t generation() const { return generation_; }
  int input_dim() const { return config_.input_dim; }
  int feature_dim() const { return config_.feature_dim(); }

  /// Mutable access invalidates outstanding forward caches.
  ParameterSet<Scalar>& mutable_parameters() {
    generation_ = detail::next_generation();
    return layers_;
  }

  template <typename Derived>
  MatrixX<Scalar> features(const Eigen::MatrixBase<Derived>& batch) const {
    return forward(batch).features;
  }

  template <typename Derived>
  ForwardResult<Scalar> forward(const Eigen::MatrixBase<Derived>& batch) const {
    if (batch.cols() != config_.input_dim)
      throw ShapeError("extractor: batch has " + std::to_string(batch.cols()) + " columns, expected " +
                       std::to_string(config_.input_dim));
    ForwardResult<Scalar> out;
    out.cache.generation = generation_;
    MatrixX<Scalar> a = batch;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      MatrixX<Scalar> z = a * layers_[k].weight.transpose();
      z.rowwise() += layers_[k].bias.transpose();
      out.cache.inputs.push_back(std::move(a));
      const bool hidden = k + 1 < layers_.size();
      a = (hidden && config_.activation == Activation::relu) ? MatrixX<Scalar>(z.cwiseMax(Scalar(0))) : z;
      out.cache.pre.push_back(std::move(z));
    }
    out.features = std::move(a);
    return out;
  }

  /// Gradients of a scalar loss wrt all parameters, given dL/dfeatures.
  template <typename Derived>
  ParameterSet<Scalar> backward(const ForwardCache<Scalar>& cache,
                                const Eigen::MatrixBase<Derived>& feature_grads) const {
    if (cache.generation != generation_ || cache.inputs.size() != layers_.size())
      throw ShapeError("extractor: stale or mismatched forward cache");
    const Eigen::Index n = cache.inputs.front().rows();
    if (feature_grads.rows() != n || feature_grads.cols() != feature_dim())
      throw ShapeError("extractor: feature gradient shape mismatch");
    ParameterSet<Scalar> grads(layers_.size());
    MatrixX<Scalar> g = feature_grads;
    for (std::size_t k = layers_.size(); k-- > 0;) {
      grads[k].weight = g.transpose() * cache.inputs[k];
      grads[k].bias = g.colwise().sum().transpose();
      if (k == 0) break;
      MatrixX<Scalar> upstream = g * layers_[k].weight;
      if (config_.activation == Activation::relu)
        upstream = upstream.cwiseProduct((cache.pre[k - 1].array() > Scalar(0)).matrix().template cast<Scalar>());
      g = std::move(upstream);
    }
    return grads;
  }

 private:
  ExtractorConfig config_;
  ParameterSet<Scalar> layers_;
  std::uint64_t generation_ = 0;
};

using Extractor = BasicExtractor<double>;

template <typename Scalar, typename Derived>
ForwardResult<Scalar> forward(const BasicExtractor<Scalar>& state, const Eigen::MatrixBase<Derived>& batch) {
  return state.forward(batch);
}

template <typename Scalar, typename Derived>
ParameterSet<Scalar> backward(const BasicExtractor<Scalar>& state, const ForwardCache<Scalar>& cache,
                              const Eigen::MatrixBase<Derived>& feature_grads) {
  return state.backward(cache, feature_grads);
}

/// Read-only copy of an extractor, used as the previous-step teacher.
template <typename Scalar>
class FrozenExtractor {
 public:
  FrozenExtractor() = default;
  explicit FrozenExtractor(const BasicExtractor<Scalar>& source)
      : model_(std::make_shared<const BasicExtractor<Scalar>>(source)) {}

  explicit operator bool() const { return model_ != nullptr; }
  const BasicExtractor<Scalar>& model() const { return *model_; }

  template <typename Derived>
  MatrixX<Scalar> features(const Eigen::MatrixBase<Derived>& batch) const {
    return model_->features(batch);
  }

 private:
  std::shared_ptr<const BasicExtractor<Scalar>> model_;
};

template <typename Scalar>
FrozenExtractor<Scalar> snapshot(const BasicExtractor<Scalar>& state) {
  return FrozenExtractor<Scalar>(state);
}

template <typename Scalar>
FrozenExtractor<Scalar> snapshot(const FrozenExtractor<Scalar>& frozen) {
  return frozen;
}

template <typename Scalar>
struct OptimizerState {
  Scalar learning_rate = Scalar(0.1);
  Scalar momentum = Scalar(0.9);
  Scalar weight_decay = Scalar(1e-3);
  ParameterSet<Scalar> velocity;

  OptimizerState() = default;
  OptimizerState(const BasicExtractor<Scalar>& model, Scalar lr, Scalar mom, Scalar wd)
      : learning_rate(lr), momentum(mom), weight_decay(wd), velocity(zeros_like(model.parameters())) {
    if (lr < 0 || mom < 0 || mom >= 1 || wd < 0) throw ConfigError("optimizer: invalid hyperparameters");
  }
};

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm` (no-op when max_norm <= 0). Returns the norm before clipping.
template <typename Scalar>
Scalar clip_gradient_norm(ParameterSet<Scalar>& grads, Scalar max_norm) {
  Scalar sq = 0;
  for (const auto& g : grads) sq += g.weight.squaredNorm() + g.bias.squaredNorm();
  const Scalar norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Scalar scale = max_norm / norm;
    for (auto& g : grads) {
      g.weight *= scale;
      g.bias *= scale;
    }
  }
  return norm;
}

/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
template <typename Scalar>
void sgd_step(BasicExtractor<Scalar>& state, OptimizerState<Scalar>& opt, const ParameterSet<Scalar>& grads) {
  if (!same_shapes(state.parameters(), grads)) throw ShapeError("sgd_step: gradient shapes do not match");
  if (opt.velocity.empty()) opt.velocity = zeros_like(state.parameters());
  if (!same_shapes(state.parameters(), opt.velocity)) throw ShapeError("sgd_step: velocity shapes do not match");
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (!grads[k].weight.allFinite() || !grads[k].bias.allFinite())
      throw NumericError("sgd_step: non-finite gradient in layer " + std::to_string(k));
  }
  auto& params = state.mutable_parameters();
  for (std::size_t k = 0; k < grads.size(); ++k) {
    auto& v = opt.velocity[k];
    v.weight = opt.momentum * v.weight + grads[k].weight + opt.weight_decay * params[k].weight;
    v.bias = opt.momentum * v.bias + grads[k].bias + opt.weight_decay * params[k].bias;
    params[k].weight -= opt.learning_rate * v.weight;
    params[k].bias -= opt.learning_rate * v.bias;
  }
}

}  // namespace owr
