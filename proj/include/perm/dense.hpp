#pragma once

// Minimal fully connected network with layer-wise reverse-mode gradients,
// and an Adam optimizer over flattened parameters.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "perm/error.hpp"
#include "perm/random.hpp"

namespace perm {

enum class Activation { kIdentity, kTanh };

inline const char* to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "identity"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "identity") return Activation::kIdentity;
  throw Error(ErrorCode::kFormat, "unknown activation '" + s + "'");
}

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
  Activation activation = Activation::kIdentity;

  Eigen::Index inputs() const { return weight.cols(); }
  Eigen::Index outputs() const { return weight.rows(); }
};

/// Column-major batches: each column of the input is one example.
class DenseNet {
 public:
  struct Cache {
    std::vector<Eigen::MatrixXd> inputs;   // per layer
    std::vector<Eigen::MatrixXd> outputs;  // per layer, post-activation
  };

  DenseNet() = default;

  explicit DenseNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) { check_chain(); }

  /// Glorot-uniform weights, zero biases; tanh on hidden layers, identity on
  /// the output layer.
  static DenseNet glorot(std::span<const int> sizes, Rng& rng) {
    if (sizes.size() < 2) throw Error(ErrorCode::kInvalidArgument, "network needs >= 2 sizes");
    std::vector<DenseLayer> layers;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      const int in = sizes[l];
      const int out = sizes[l + 1];
      if (in <= 0 || out <= 0) throw Error(ErrorCode::kInvalidArgument, "layer sizes must be > 0");
      const double limit = std::sqrt(6.0 / (in + out));
      DenseLayer layer;
      layer.weight.resize(out, in);
      for (Eigen::Index c = 0; c < in; ++c) {
        for (Eigen::Index r = 0; r < out; ++r) layer.weight(r, c) = rng.uniform(-limit, limit);
      }
      layer.bias = Eigen::VectorXd::Zero(out);
      layer.activation = (l + 2 == sizes.size()) ? Activation::kIdentity : Activation::kTanh;
      layers.push_back(std::move(layer));
    }
    return DenseNet(std::move(layers));
  }

  DenseNet zeros_like() const {
    DenseNet z = *this;
    for (auto& layer : z.layers_) {
      layer.weight.setZero();
      layer.bias.setZero();
    }
    return z;
  }

  Eigen::Index input_size() const { return layers_.empty() ? 0 : layers_.front().inputs(); }
  Eigen::Index output_size() const { return layers_.empty() ? 0 : layers_.back().outputs(); }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Cache* cache = nullptr) const {
    if (x.rows() != input_size()) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "network expects " + std::to_string(input_size()) + " inputs, got " +
                      std::to_string(x.rows()));
    }
    if (cache) {
      cache->inputs.clear();
      cache->outputs.clear();
    }
    Eigen::MatrixXd h = x;
    for (const auto& layer : layers_) {
      Eigen::MatrixXd z = layer.weight * h;
      z.colwise() += layer.bias;
      if (layer.activation == Activation::kTanh) z = z.array().tanh().matrix();
      if (cache) {
        cache->inputs.push_back(std::move(h));
        cache->outputs.push_back(z);
      }
      h = std::move(z);
    }
    return h;
  }

  /// Accumulates parameter gradients into `grads` (same shape as *this) and
  /// returns the gradient with respect to the network input.
  Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& d_output,
                           DenseNet& grads) const {
    Eigen::MatrixXd delta = d_output;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& layer = layers_[l];
      if (layer.activation == Activation::kTanh) {
        delta.array() *= 1.0 - cache.outputs[l].array().square();
      }
      grads.layers_[l].weight.noalias() += delta * cache.inputs[l].transpose();
      grads.layers_[l].bias += delta.rowwise().sum();
      Eigen::MatrixXd prev = layer.weight.transpose() * delta;
      delta = std::move(prev);
    }
    return delta;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers_) n += layer.weight.size() + layer.bias.size();
    return n;
  }

  void append_parameters(std::vector<double>& out) const {
    for (const auto& layer : layers_) {
      out.insert(out.end(), layer.weight.data(), layer.weight.data() + layer.weight.size());
      out.insert(out.end(), layer.bias.data(), layer.bias.data() + layer.bias.size());
    }
  }

  // Returns the number of values consumed.
  std::size_t assign_parameters(std::span<const double> values) {
    std::size_t k = 0;
    for (auto& layer : layers_) {
      for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = values[k++];
      for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias.data()[i] = values[k++];
    }
    return k;
  }

  bool all_finite() const {
    for (const auto& layer : layers_) {
      if (!layer.weight.allFinite() || !layer.bias.allFinite()) return false;
    }
    return true;
  }

 private:
  void check_chain() const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].bias.size() != layers_[l].outputs()) {
        throw Error(ErrorCode::kDimensionMismatch, "bias size does not match layer outputs");
      }
      if (l > 0 && layers_[l].inputs() != layers_[l - 1].outputs()) {
        throw Error(ErrorCode::kDimensionMismatch, "consecutive layer sizes do not chain");
      }
    }
  }

  std::vector<DenseLayer> layers_;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam in ascent form (the objective is maximized).
class Adam {
 public:
  Adam(std::size_t size, AdamConfig config) : config_(config), m_(size, 0.0), v_(size, 0.0) {}

  void ascend(std::span<double> params, std::span<const double> grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grads[i];
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grads[i] * grads[i];
      params[i] += config_.learning_rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + config_.epsilon);
    }
  }

 private:
  AdamConfig config_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace perm
