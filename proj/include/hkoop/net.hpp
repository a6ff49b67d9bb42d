/*
 Copyright 2026 The hkoop Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#ifndef HKOOP_NET_HPP
#define HKOOP_NET_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "hkoop/errors.hpp"

namespace hkoop {

inline double elu(double a) { return a >= 0.0 ? a : std::expm1(a); }
inline double elu_derivative(double a) { return a >= 0.0 ? 1.0 : std::exp(a); }

/// Activations kept by forward_batch for a later backward pass.
struct NetCache {
  std::vector<Eigen::MatrixXd> inputs;      // input of each affine layer (already normalized)
  std::vector<Eigen::MatrixXd> preactivation; // hidden-layer pre-activations
};

struct NetGradients {
  Eigen::VectorXd params; // same layout as DenseNet::params
  Eigen::MatrixXd input;  // gradient with respect to each raw input column
};

/// Fully connected network: ELU on hidden layers, identity on the output.
///
/// Parameters live in one flat vector; layer l stores its weight matrix
/// (column-major, out x in) followed by its bias. Inputs pass through a fixed
/// affine normalization (x - offset) * scale before the first layer.
class DenseNet {
public:
  DenseNet() = default;

  explicit DenseNet(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw InvalidInput("a network needs at least input and output sizes");
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      weight_offsets_.push_back(total);
      total += sizes_[l] * sizes_[l + 1];
      bias_offsets_.push_back(total);
      total += sizes_[l + 1];
    }
    params = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(total));
    input_offset = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sizes_.front()));
    input_scale = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(sizes_.front()));
  }

  /// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
  static DenseNet he_init(std::vector<std::size_t> sizes, std::mt19937_64& rng) {
    DenseNet net(std::move(sizes));
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(net.sizes_[l])));
      auto w = net.weight(l);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
    return net;
  }

  static std::vector<std::size_t> topology(std::size_t input, std::size_t width, std::size_t depth,
                                           std::size_t output) {
    std::vector<std::size_t> s{input};
    for (std::size_t i = 0; i < depth; ++i) s.push_back(width);
    s.push_back(output);
    return s;
  }

  const std::vector<std::size_t>& sizes() const { return sizes_; }
  std::size_t layer_count() const { return sizes_.empty() ? 0 : sizes_.size() - 1; }
  std::size_t input_dim() const { return sizes_.empty() ? 0 : sizes_.front(); }
  std::size_t output_dim() const { return sizes_.empty() ? 0 : sizes_.back(); }
  std::size_t parameter_count() const { return static_cast<std::size_t>(params.size()); }

  Eigen::Map<Eigen::MatrixXd> weight(std::size_t l) {
    return {params.data() + weight_offsets_[l], rows(l), cols(l)};
  }
  Eigen::Map<const Eigen::MatrixXd> weight(std::size_t l) const {
    return {params.data() + weight_offsets_[l], rows(l), cols(l)};
  }
  Eigen::Map<Eigen::VectorXd> bias(std::size_t l) { return {params.data() + bias_offsets_[l], rows(l)}; }
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t l) const {
    return {params.data() + bias_offsets_[l], rows(l)};
  }

  /// Sets the input normalization so that [lo, hi] maps onto [-1, 1] per input.
  void normalize_inputs(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
    if (lo.size() != input_offset.size() || hi.size() != input_offset.size())
      throw InvalidInput("normalization bounds do not match the input dimension");
    for (Eigen::Index i = 0; i < lo.size(); ++i) {
      double half = 0.5 * (hi[i] - lo[i]);
      input_offset[i] = 0.5 * (hi[i] + lo[i]);
      input_scale[i] = half > 0.0 ? 1.0 / half : 1.0;
    }
  }

  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& input, NetCache* cache = nullptr) const {
    if (static_cast<std::size_t>(input.rows()) != input_dim())
      throw InvalidInput("network input has " + std::to_string(input.rows()) + " rows, expected " +
                         std::to_string(input_dim()));
    Eigen::MatrixXd a = input_scale.asDiagonal() * (input.colwise() - input_offset);
    if (cache) {
      cache->inputs.clear();
      cache->preactivation.clear();
    }
    for (std::size_t l = 0; l < layer_count(); ++l) {
      Eigen::MatrixXd z = weight(l) * a;
      z.colwise() += bias(l);
      if (cache) cache->inputs.push_back(std::move(a));
      if (l + 1 == layer_count()) return z;
      a = z.unaryExpr([](double v) { return elu(v); });
      if (cache) cache->preactivation.push_back(std::move(z));
    }
    return a;
  }

  Eigen::VectorXd forward(const Eigen::VectorXd& input) const {
    Eigen::MatrixXd out = forward_batch(input);
    return out.col(0);
  }

  /// Reverse pass for a batch; parameter gradients are summed over columns.
  NetGradients backward_batch(const NetCache& cache, const Eigen::MatrixXd& upstream) const {
    if (static_cast<std::size_t>(upstream.rows()) != output_dim() || cache.inputs.size() != layer_count() ||
        upstream.cols() != cache.inputs.front().cols())
      throw InvalidInput("upstream gradient does not match the cached forward pass");
    NetGradients grads;
    grads.params = Eigen::VectorXd::Zero(params.size());
    Eigen::MatrixXd g = upstream;
    for (std::size_t l = layer_count(); l-- > 0;) {
      Eigen::Map<Eigen::MatrixXd>(grads.params.data() + weight_offsets_[l], rows(l), cols(l)).noalias() =
          g * cache.inputs[l].transpose();
      Eigen::Map<Eigen::VectorXd>(grads.params.data() + bias_offsets_[l], rows(l)) = g.rowwise().sum();
      Eigen::MatrixXd next = weight(l).transpose() * g;
      if (l > 0)
        next.array() *= cache.preactivation[l - 1].unaryExpr([](double v) { return elu_derivative(v); }).array();
      g = std::move(next);
    }
    grads.input = input_scale.asDiagonal() * g;
    return grads;
  }

  NetGradients backward(const Eigen::VectorXd& input, const Eigen::VectorXd& upstream) const {
    NetCache cache;
    forward_batch(input, &cache);
    return backward_batch(cache, upstream);
  }

  Eigen::VectorXd params;
  Eigen::VectorXd input_offset;
  Eigen::VectorXd input_scale;

private:
  Eigen::Index rows(std::size_t l) const { return static_cast<Eigen::Index>(sizes_[l + 1]); }
  Eigen::Index cols(std::size_t l) const { return static_cast<Eigen::Index>(sizes_[l]); }

  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> weight_offsets_;
  std::vector<std::size_t> bias_offsets_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::int64_t t = 0;                 // successful updates
  std::vector<std::int64_t> block_t;  // updates seen by each block, for bias correction
  std::vector<Eigen::VectorXd> m;
  std::vector<Eigen::VectorXd> v;
};

/// One bias-corrected Adam update over a list of parameter blocks. Blocks
/// flagged inactive are left alone, moments included. Returns false, leaving
/// everything untouched, when any active gradient entry is non-finite.
inline bool adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
                      AdamState& state, std::span<const bool> active = {}) {
  if (params.size() != grads.size()) throw InvalidInput("parameter and gradient block counts differ");
  if (!active.empty() && active.size() != params.size()) throw InvalidInput("activity mask has the wrong length");
  auto is_active = [&](std::size_t b) { return active.empty() || active[b]; };
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size()) throw InvalidInput("parameter and gradient shapes differ");
    if (!is_active(b)) continue;
    for (double g : grads[b])
      if (!std::isfinite(g)) return false;
  }
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size())));
      state.v.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size())));
    }
    state.block_t.assign(params.size(), 0);
  }
  const auto& c = state.config;
  state.t += 1;
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (!is_active(b)) continue;
    auto& m = state.m[b];
    auto& v = state.v[b];
    if (static_cast<std::size_t>(m.size()) != params[b].size()) throw InvalidInput("Adam state shape changed");
    const auto tb = static_cast<double>(++state.block_t[b]);
    const double bc1 = 1.0 - std::pow(c.beta1, tb);
    const double bc2 = 1.0 - std::pow(c.beta2, tb);
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const double g = grads[b][i];
      m[ii] = c.beta1 * m[ii] + (1.0 - c.beta1) * g;
      v[ii] = c.beta2 * v[ii] + (1.0 - c.beta2) * g * g;
      params[b][i] -= c.learning_rate * (m[ii] / bc1) / (std::sqrt(v[ii] / bc2) + c.epsilon);
    }
  }
  return true;
}

/// Scales gradients in place so their global Euclidean norm is at most `cap`.
inline void clip_global_norm(std::span<const std::span<double>> grads, double cap) {
  if (!(cap > 0.0)) return;
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm <= cap || !std::isfinite(norm)) return;
  const double s = cap / norm;
  for (const auto& g : grads)
    for (double& x : g) x *= s;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

/// Scalar function of the network output; writes d(loss)/d(output) into `grad`.
using LossProbe = std::function<double(const Eigen::VectorXd& output, Eigen::VectorXd* grad)>;

/// Max relative error between backprop and central differences over up to
/// `samples` randomly chosen parameters at a random input.
inline double gradient_check(const DenseNet& net, const LossProbe& probe, std::uint64_t seed,
                             std::size_t samples = 100, double h = 1e-6) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Eigen::VectorXd input(static_cast<Eigen::Index>(net.input_dim()));
  for (Eigen::Index i = 0; i < input.size(); ++i) input[i] = unit(rng);

  Eigen::VectorXd out = net.forward(input);
  Eigen::VectorXd dout = Eigen::VectorXd::Zero(out.size());
  probe(out, &dout);
  const Eigen::VectorXd analytic = net.backward(input, dout).params;

  std::vector<std::size_t> order(net.parameter_count());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(samples, order.size()));

  DenseNet work = net;
  double worst = 0.0;
  for (auto idx : order) {
    const auto i = static_cast<Eigen::Index>(idx);
    const double orig = work.params[i];
    work.params[i] = orig + h;
    const double up = probe(work.forward(input), nullptr);
    work.params[i] = orig - h;
    const double down = probe(work.forward(input), nullptr);
    work.params[i] = orig;
    const double fd = (up - down) / (2.0 * h);
    const double bp = analytic[i];
    const double rel = std::abs(bp - fd) / std::max(1e-8, std::abs(bp) + std::abs(fd));
    worst = std::max(worst, rel);
  }
  return worst;
}

} // namespace hkoop

#endif // HKOOP_NET_HPP
