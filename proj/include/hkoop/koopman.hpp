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

#ifndef HKOOP_KOOPMAN_HPP
#define HKOOP_KOOPMAN_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hkoop/datagen.hpp"
#include "hkoop/errors.hpp"
#include "hkoop/hybrid_core.hpp"
#include "hkoop/net.hpp"
#include "hkoop/systems.hpp"

namespace hkoop {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Formulation { Switched, GeneralHybrid, Transformed };
enum class EmbeddingKind { SoftplusBinary, TanhInteger, Relaxed };

inline std::string to_string(Formulation f) {
  switch (f) {
  case Formulation::Switched: return "switched";
  case Formulation::GeneralHybrid: return "hybrid";
  case Formulation::Transformed: return "transformed";
  }
  return "?";
}

inline Formulation parse_formulation(const std::string& s) {
  if (s == "switched") return Formulation::Switched;
  if (s == "hybrid") return Formulation::GeneralHybrid;
  if (s == "transformed") return Formulation::Transformed;
  throw InvalidInput("unknown formulation '" + s + "'");
}

inline std::string to_string(EmbeddingKind k) {
  switch (k) {
  case EmbeddingKind::SoftplusBinary: return "softplus";
  case EmbeddingKind::TanhInteger: return "tanh";
  case EmbeddingKind::Relaxed: return "relaxed";
  }
  return "?";
}

inline EmbeddingKind parse_embedding(const std::string& s) {
  if (s == "softplus") return EmbeddingKind::SoftplusBinary;
  if (s == "tanh") return EmbeddingKind::TanhInteger;
  if (s == "relaxed") return EmbeddingKind::Relaxed;
  throw InvalidInput("unknown embedding '" + s + "'");
}

// ---------------------------------------------------------------------------
// Surjective discrete embeddings
//
//   softplus: xi = (2y - 1) log(1 + e^rho)     binary y, recovered by sign bit
//   tanh:     xi = tanh(rho) / 2 + y           integer y, recovered by rounding
//   relaxed:  xi = y

namespace detail {

// |tanh| is kept strictly below 1 so that |xi - y| < 1/2 survives rounding of
// y + tanh/2 for moderate |y|.
inline constexpr double kTanhCap = 1.0 - 1e-12;

inline double softplus(double r) { return std::max(r, 0.0) + std::log1p(std::exp(-std::abs(r))); }
inline double sigmoid(double r) {
  return r >= 0.0 ? 1.0 / (1.0 + std::exp(-r)) : std::exp(r) / (1.0 + std::exp(r));
}

} // namespace detail

inline double embed_value(EmbeddingKind kind, double rho, double y) {
  switch (kind) {
  case EmbeddingKind::SoftplusBinary: return (2.0 * y - 1.0) * detail::softplus(rho);
  case EmbeddingKind::TanhInteger: return 0.5 * std::clamp(std::tanh(rho), -detail::kTanhCap, detail::kTanhCap) + y;
  case EmbeddingKind::Relaxed: return y;
  }
  return y;
}

inline double embed_derivative(EmbeddingKind kind, double rho, double y) {
  switch (kind) {
  case EmbeddingKind::SoftplusBinary: return (2.0 * y - 1.0) * detail::sigmoid(rho);
  case EmbeddingKind::TanhInteger: {
    double t = std::tanh(rho);
    return std::abs(t) >= detail::kTanhCap ? 0.0 : 0.5 * (1.0 - t * t);
  }
  case EmbeddingKind::Relaxed: return 0.0;
  }
  return 0.0;
}

inline std::int64_t recover_from_embedding(EmbeddingKind kind, double xi) {
  if (!std::isfinite(xi)) throw RecoveryError("cannot recover a discrete value from non-finite xi");
  // Underflowed softplus gives a signed zero.
  if (kind == EmbeddingKind::SoftplusBinary) return std::signbit(xi) ? 0 : 1;
  // Ties to even under the default rounding mode.
  return static_cast<std::int64_t>(std::nearbyint(xi));
}

inline Discrete recover_from_embedding(EmbeddingKind kind, const Vector& xi) {
  Discrete out(static_cast<std::size_t>(xi.size()));
  for (Eigen::Index i = 0; i < xi.size(); ++i) out[static_cast<std::size_t>(i)] = recover_from_embedding(kind, xi[i]);
  return out;
}

/// xi = embedding of discrete values, with rho produced by a network over
/// (continuous, discrete) inputs.
struct DiscreteEmbedding {
  EmbeddingKind kind = EmbeddingKind::TanhInteger;
  DenseNet rho; // unused when kind == Relaxed

  void validate(const std::vector<DiscreteRange>& domain) const {
    if (kind == EmbeddingKind::SoftplusBinary)
      for (const auto& r : domain)
        if (!r.binary()) throw InvalidInput("softplus embedding requires binary discrete variables");
  }

  /// Batch form: `input` feeds the rho network, `discrete` holds the values (rows = variables).
  Eigen::MatrixXd embed(const Eigen::MatrixXd& input, const Eigen::MatrixXd& discrete, NetCache* cache = nullptr,
                        Eigen::MatrixXd* rho_out = nullptr) const {
    if (kind == EmbeddingKind::Relaxed) return discrete;
    Eigen::MatrixXd r = rho.forward_batch(input, cache);
    Eigen::MatrixXd xi = r.binaryExpr(discrete, [k = kind](double a, double y) { return embed_value(k, a, y); });
    if (rho_out) *rho_out = std::move(r);
    return xi;
  }

  Vector embed(const Vector& cont, const Discrete& values) const {
    Eigen::MatrixXd input(cont.size() + static_cast<Eigen::Index>(values.size()), 1);
    Eigen::MatrixXd disc(static_cast<Eigen::Index>(values.size()), 1);
    input.topRows(cont.size()) = cont;
    for (std::size_t i = 0; i < values.size(); ++i) {
      input(cont.size() + static_cast<Eigen::Index>(i), 0) = static_cast<double>(values[i]);
      disc(static_cast<Eigen::Index>(i), 0) = static_cast<double>(values[i]);
    }
    return embed(input, disc).col(0);
  }
};

inline Vector embed_discrete(const DiscreteEmbedding& emb, const Vector& x, const Discrete& y) {
  return emb.embed(x, y);
}

// ---------------------------------------------------------------------------
// Model

struct ModelOptions {
  std::size_t phi_x_dim = 5;
  std::size_t phi_xu_dim = 5;
  std::size_t hidden_width = 8;
  std::size_t hidden_depth = 4;
  EmbeddingKind embedding = EmbeddingKind::TanhInteger;
};

/// Learned observables plus finite Koopman matrices for one of the three
/// formulations. Formulation coordinates:
///
///   switched     state x          control u        psi_x = [x φx]        psi_xu = [u φxu]
///   hybrid       state [x; y]     control [u; z]   psi_x = [x ξ φx]      psi_xu = [u ζ φxu]
///   transformed  state [x; u; v]  control [φ; ω]   psi_x = [x u v φx]    psi_xu = [φ ω φxu]
class KoopmanModel {
public:
  Formulation formulation = Formulation::Switched;
  Dims dims;
  std::vector<DiscreteRange> y_domain;
  std::vector<DiscreteRange> z_domain;
  std::string system_name;
  nlohmann::json system_params;

  DenseNet phi_x;
  DenseNet phi_xu;
  DiscreteEmbedding xi;   // hybrid formulation, p > 0
  DiscreteEmbedding zeta; // hybrid formulation, q > 0

  std::vector<Discrete> modes; // one entry per K pair; a single empty label unless switched
  std::vector<RowMatrix> kx;
  std::vector<RowMatrix> kxu;

  std::uint64_t seed = 0;
  nlohmann::json train_config = nlohmann::json::object();
  std::string config_hash;

  bool controlled() const {
    return formulation == Formulation::Switched ? dims.m > 0 : dims.m + dims.q > 0;
  }

  std::size_t state_dim() const {
    switch (formulation) {
    case Formulation::Switched: return dims.n;
    case Formulation::GeneralHybrid: return dims.n + dims.p;
    case Formulation::Transformed: return 2 * dims.n + dims.m;
    }
    return 0;
  }

  std::size_t control_dim() const {
    return formulation == Formulation::Switched ? dims.m : dims.m + dims.q;
  }

  std::size_t prefix_x_dim() const { return formulation == Formulation::GeneralHybrid ? dims.n : state_dim(); }
  std::size_t embed_x_dim() const { return formulation == Formulation::GeneralHybrid ? dims.p : 0; }
  std::size_t prefix_xu_dim() const { return formulation == Formulation::GeneralHybrid ? dims.m : control_dim(); }
  std::size_t embed_xu_dim() const { return formulation == Formulation::GeneralHybrid ? dims.q : 0; }

  std::size_t psi_x_dim() const { return prefix_x_dim() + embed_x_dim() + phi_x.output_dim(); }
  std::size_t psi_xu_dim() const {
    return controlled() ? prefix_xu_dim() + embed_xu_dim() + phi_xu.output_dim() : 0;
  }

  /// Rows of K_x / K_xu fixed by construction (transformed formulation).
  std::size_t frozen_rows() const { return formulation == Formulation::Transformed ? dims.n + dims.m : 0; }

  std::size_t mode_count() const { return modes.size(); }

  std::size_t mode_index(const Discrete& y, const Discrete& z) const {
    if (formulation != Formulation::Switched) return 0;
    Discrete sigma = y;
    sigma.insert(sigma.end(), z.begin(), z.end());
    auto it = std::find(modes.begin(), modes.end(), sigma);
    if (it == modes.end()) throw InvalidInput("unknown mode");
    return static_cast<std::size_t>(it - modes.begin());
  }

  bool uses_xi() const { return formulation == Formulation::GeneralHybrid && dims.p > 0; }
  bool uses_zeta() const { return formulation == Formulation::GeneralHybrid && dims.q > 0 && controlled(); }

  void set_embedding(EmbeddingKind kind) {
    xi.kind = kind;
    zeta.kind = kind;
  }
  EmbeddingKind embedding() const { return xi.kind; }
};

inline Formulation formulation_of_tag(const std::string& tag) { return parse_formulation(tag); }

/// Writes the fixed identity/zero blocks of the transformed K matrices.
inline void apply_structured_blocks(KoopmanModel& model) {
  if (model.formulation != Formulation::Transformed) return;
  const auto n = static_cast<Eigen::Index>(model.dims.n), m = static_cast<Eigen::Index>(model.dims.m);
  for (auto& k : model.kx) {
    k.topRows(n + m).setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      k(i, i) = 1.0;         // x
      k(i, n + m + i) = 1.0; // + v
    }
    for (Eigen::Index i = 0; i < m; ++i) k(n + i, n + i) = 1.0; // u
  }
  for (auto& k : model.kxu) {
    k.topRows(n + m).setZero();
    for (Eigen::Index i = 0; i < m; ++i) k(n + i, i) = 1.0; // + phi
  }
}

inline bool structured_blocks_intact(const KoopmanModel& model) {
  if (model.formulation != Formulation::Transformed) return true;
  KoopmanModel ref = model;
  apply_structured_blocks(ref);
  const auto rows = static_cast<Eigen::Index>(model.frozen_rows());
  for (std::size_t j = 0; j < model.kx.size(); ++j) {
    if (!(model.kx[j].topRows(rows).array() == ref.kx[j].topRows(rows).array()).all()) return false;
    if (!(model.kxu[j].topRows(rows).array() == ref.kxu[j].topRows(rows).array()).all()) return false;
  }
  return true;
}

inline KoopmanModel make_model(Formulation formulation, const HybridSystemSpec& spec, const ModelOptions& opts,
                               std::uint64_t seed, const nlohmann::json& system_params = nullptr) {
  KoopmanModel model;
  model.formulation = formulation;
  model.dims = spec.dims;
  model.y_domain = spec.y_domain;
  model.z_domain = spec.z_domain;
  model.system_name = spec.name;
  model.system_params = system_params;
  model.seed = seed;

  std::mt19937_64 rng(seed);
  const std::size_t w = opts.hidden_width, d = opts.hidden_depth;
  model.phi_x = DenseNet::he_init(DenseNet::topology(model.state_dim(), w, d, opts.phi_x_dim), rng);
  if (model.controlled())
    model.phi_xu =
        DenseNet::he_init(DenseNet::topology(model.state_dim() + model.control_dim(), w, d, opts.phi_xu_dim), rng);
  model.set_embedding(formulation == Formulation::GeneralHybrid ? opts.embedding : EmbeddingKind::Relaxed);
  if (model.uses_xi()) {
    model.xi.rho = DenseNet::he_init(DenseNet::topology(spec.dims.n + spec.dims.p, w, d, spec.dims.p), rng);
    model.xi.validate(spec.y_domain);
  }
  if (model.uses_zeta()) {
    model.zeta.rho = DenseNet::he_init(DenseNet::topology(spec.dims.m + spec.dims.q, w, d, spec.dims.q), rng);
    model.zeta.validate(spec.z_domain);
  }

  if (formulation == Formulation::Switched)
    model.modes = discrete_domain(spec);
  else
    model.modes = {Discrete{}};

  const auto nx = static_cast<Eigen::Index>(model.psi_x_dim());
  const auto nu = static_cast<Eigen::Index>(model.psi_xu_dim());
  for (std::size_t j = 0; j < model.modes.size(); ++j) {
    model.kx.push_back(RowMatrix::Identity(nx, nx));
    model.kxu.push_back(RowMatrix::Zero(nx, nu));
  }
  apply_structured_blocks(model);
  return model;
}

/// Sets every network's input normalization from per-coordinate bounds of
/// the state and control coordinates.
inline void set_normalization(KoopmanModel& model, const Vector& state_lo, const Vector& state_hi,
                              const Vector& control_lo, const Vector& control_hi) {
  model.phi_x.normalize_inputs(state_lo, state_hi);
  if (model.controlled()) {
    Vector lo(state_lo.size() + control_lo.size()), hi(state_hi.size() + control_hi.size());
    lo << state_lo, control_lo;
    hi << state_hi, control_hi;
    model.phi_xu.normalize_inputs(lo, hi);
  }
  if (model.uses_xi())
    model.xi.rho.normalize_inputs(state_lo.head(static_cast<Eigen::Index>(model.dims.n + model.dims.p)),
                                  state_hi.head(static_cast<Eigen::Index>(model.dims.n + model.dims.p)));
  if (model.uses_zeta()) model.zeta.rho.normalize_inputs(control_lo, control_hi);
}

// ---------------------------------------------------------------------------
// Observables

inline Vector state_coords(const KoopmanModel& model, const Vector& x, const Discrete& y, const Vector& u = {},
                           const Vector& v = {}) {
  Vector s(static_cast<Eigen::Index>(model.state_dim()));
  const auto n = static_cast<Eigen::Index>(model.dims.n);
  switch (model.formulation) {
  case Formulation::Switched: s = x; break;
  case Formulation::GeneralHybrid:
    s.head(n) = x;
    for (std::size_t i = 0; i < y.size(); ++i) s[n + static_cast<Eigen::Index>(i)] = static_cast<double>(y[i]);
    break;
  case Formulation::Transformed: s << x, u, v; break;
  }
  return s;
}

inline Vector control_coords(const KoopmanModel& model, const Vector& u, const Discrete& z, const Vector& phi = {},
                             const Discrete& omega = {}) {
  Vector c(static_cast<Eigen::Index>(model.control_dim()));
  const auto m = static_cast<Eigen::Index>(model.dims.m);
  switch (model.formulation) {
  case Formulation::Switched: c = u; break;
  case Formulation::GeneralHybrid:
    c.head(m) = u;
    for (std::size_t i = 0; i < z.size(); ++i) c[m + static_cast<Eigen::Index>(i)] = static_cast<double>(z[i]);
    break;
  case Formulation::Transformed:
    c.head(m) = phi;
    for (std::size_t i = 0; i < omega.size(); ++i) c[m + static_cast<Eigen::Index>(i)] = static_cast<double>(omega[i]);
    break;
  }
  return c;
}

struct ObservableCache {
  NetCache phi;
  NetCache rho;
  Eigen::MatrixXd rho_out;
  Eigen::MatrixXd discrete;
};

inline Eigen::MatrixXd psi_x_batch(const KoopmanModel& model, const Eigen::MatrixXd& states,
                                   ObservableCache* cache = nullptr) {
  if (static_cast<std::size_t>(states.rows()) != model.state_dim())
    throw InvalidInput("state coordinates have " + std::to_string(states.rows()) + " rows, expected " +
                       std::to_string(model.state_dim()));
  const auto prefix = static_cast<Eigen::Index>(model.prefix_x_dim());
  const auto emb = static_cast<Eigen::Index>(model.embed_x_dim());
  const auto nphi = static_cast<Eigen::Index>(model.phi_x.output_dim());
  Eigen::MatrixXd out(prefix + emb + nphi, states.cols());
  out.topRows(prefix) = states.topRows(prefix);
  if (emb > 0) {
    Eigen::MatrixXd disc = states.middleRows(prefix, emb);
    out.middleRows(prefix, emb) =
        model.xi.embed(states, disc, cache ? &cache->rho : nullptr, cache ? &cache->rho_out : nullptr);
    if (cache) cache->discrete = std::move(disc);
  }
  out.bottomRows(nphi) = model.phi_x.forward_batch(states, cache ? &cache->phi : nullptr);
  return out;
}

inline Eigen::MatrixXd stack_rows(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() + b.rows(), a.cols());
  out << a, b;
  return out;
}

inline Eigen::MatrixXd psi_xu_batch(const KoopmanModel& model, const Eigen::MatrixXd& states,
                                    const Eigen::MatrixXd& controls, ObservableCache* cache = nullptr) {
  if (!model.controlled()) return Eigen::MatrixXd(0, states.cols());
  if (static_cast<std::size_t>(controls.rows()) != model.control_dim() || controls.cols() != states.cols())
    throw InvalidInput("control coordinates do not match the model");
  const auto prefix = static_cast<Eigen::Index>(model.prefix_xu_dim());
  const auto emb = static_cast<Eigen::Index>(model.embed_xu_dim());
  const auto nphi = static_cast<Eigen::Index>(model.phi_xu.output_dim());
  Eigen::MatrixXd out(prefix + emb + nphi, states.cols());
  out.topRows(prefix) = controls.topRows(prefix);
  if (emb > 0) {
    Eigen::MatrixXd disc = controls.middleRows(prefix, emb);
    out.middleRows(prefix, emb) =
        model.zeta.embed(controls, disc, cache ? &cache->rho : nullptr, cache ? &cache->rho_out : nullptr);
    if (cache) cache->discrete = std::move(disc);
  }
  out.bottomRows(nphi) = model.phi_xu.forward_batch(stack_rows(states, controls), cache ? &cache->phi : nullptr);
  return out;
}

inline Vector psi_x(const KoopmanModel& model, const Vector& state) { return psi_x_batch(model, state).col(0); }

inline Vector psi_xu(const KoopmanModel& model, const Vector& state, const Vector& control) {
  return psi_xu_batch(model, state, control).col(0);
}

/// K_x ψ_x + K_xu ψ_xu for one sample in the given mode.
inline Vector predict_step(const KoopmanModel& model, const Vector& state, const Vector& control,
                           std::size_t mode = 0) {
  if (mode >= model.mode_count()) throw InvalidInput("unknown mode index " + std::to_string(mode));
  Vector out = model.kx[mode] * psi_x(model, state);
  if (model.controlled()) out += model.kxu[mode] * psi_xu(model, state, control);
  return out;
}

// ---------------------------------------------------------------------------
// Gradients

struct ModelGradients {
  Eigen::VectorXd phi_x;
  Eigen::VectorXd phi_xu;
  Eigen::VectorXd rho_xi;
  Eigen::VectorXd rho_zeta;
  std::vector<RowMatrix> kx;
  std::vector<RowMatrix> kxu;

  static ModelGradients zeros(const KoopmanModel& model) {
    ModelGradients g;
    g.phi_x = Eigen::VectorXd::Zero(model.phi_x.params.size());
    g.phi_xu = Eigen::VectorXd::Zero(model.phi_xu.params.size());
    g.rho_xi = Eigen::VectorXd::Zero(model.xi.rho.params.size());
    g.rho_zeta = Eigen::VectorXd::Zero(model.zeta.rho.params.size());
    for (std::size_t j = 0; j < model.mode_count(); ++j) {
      g.kx.push_back(RowMatrix::Zero(model.kx[j].rows(), model.kx[j].cols()));
      g.kxu.push_back(RowMatrix::Zero(model.kxu[j].rows(), model.kxu[j].cols()));
    }
    return g;
  }
};

namespace detail {

inline void backprop_embedding(const DiscreteEmbedding& emb, const ObservableCache& cache,
                               const Eigen::MatrixXd& dxi, Eigen::VectorXd& grad) {
  if (emb.kind == EmbeddingKind::Relaxed) return;
  Eigen::MatrixXd drho = cache.rho_out.binaryExpr(
      cache.discrete, [k = emb.kind](double r, double y) { return embed_derivative(k, r, y); });
  drho.array() *= dxi.array();
  grad += emb.rho.backward_batch(cache.rho, drho).params;
}

} // namespace detail

inline void backprop_psi_x(const KoopmanModel& model, const ObservableCache& cache, const Eigen::MatrixXd& dpsi,
                           ModelGradients& grads) {
  const auto prefix = static_cast<Eigen::Index>(model.prefix_x_dim());
  const auto emb = static_cast<Eigen::Index>(model.embed_x_dim());
  const auto nphi = static_cast<Eigen::Index>(model.phi_x.output_dim());
  if (nphi > 0) grads.phi_x += model.phi_x.backward_batch(cache.phi, dpsi.bottomRows(nphi)).params;
  if (emb > 0) detail::backprop_embedding(model.xi, cache, dpsi.middleRows(prefix, emb), grads.rho_xi);
}

inline void backprop_psi_xu(const KoopmanModel& model, const ObservableCache& cache, const Eigen::MatrixXd& dpsi,
                            ModelGradients& grads) {
  if (!model.controlled()) return;
  const auto prefix = static_cast<Eigen::Index>(model.prefix_xu_dim());
  const auto emb = static_cast<Eigen::Index>(model.embed_xu_dim());
  const auto nphi = static_cast<Eigen::Index>(model.phi_xu.output_dim());
  if (nphi > 0) grads.phi_xu += model.phi_xu.backward_batch(cache.phi, dpsi.bottomRows(nphi)).params;
  if (emb > 0) detail::backprop_embedding(model.zeta, cache, dpsi.middleRows(prefix, emb), grads.rho_zeta);
}

// ---------------------------------------------------------------------------
// Pair batches and losses

inline constexpr double kDenominatorFloor = 1e-8;

/// Training pairs in formulation coordinates; columns are samples.
struct PairBatch {
  Eigen::MatrixXd s0, c0, s1;
  std::vector<std::size_t> mode0;
  Eigen::VectorXd weight;        // per-pair loss multiplier
  std::vector<bool> transition;  // y_{k+1} != y_k
  bool two_step = false;
  Eigen::MatrixXd c1, s2;
  std::vector<std::size_t> mode1;

  std::size_t size() const { return static_cast<std::size_t>(s0.cols()); }

  PairBatch select(const std::vector<Eigen::Index>& idx) const {
    PairBatch b;
    b.s0 = s0(Eigen::all, idx);
    b.c0 = c0(Eigen::all, idx);
    b.s1 = s1(Eigen::all, idx);
    b.weight = weight(idx);
    b.two_step = two_step;
    for (auto i : idx) {
      b.mode0.push_back(mode0[static_cast<std::size_t>(i)]);
      b.transition.push_back(transition[static_cast<std::size_t>(i)]);
      if (two_step) b.mode1.push_back(mode1[static_cast<std::size_t>(i)]);
    }
    if (two_step) {
      b.c1 = c1(Eigen::all, idx);
      b.s2 = s2(Eigen::all, idx);
    }
    return b;
  }
};

inline std::string dataset_tag(Formulation f) { return to_string(f); }

inline void check_compatible(const KoopmanModel& model, const PairDataset& ds) {
  if (ds.formulation != dataset_tag(model.formulation))
    throw SchemaError("dataset formulation '" + ds.formulation + "' does not match model formulation '" +
                      to_string(model.formulation) + "'");
  if (ds.dims != model.dims) throw SchemaError("dataset dimensions do not match the model");
}

/// Converts a dataset into formulation coordinates for `model`.
inline PairBatch make_batch(const KoopmanModel& model, const PairDataset& ds) {
  check_compatible(model, ds);
  const auto& d = model.dims;
  PairBatch b;
  const auto count = static_cast<Eigen::Index>(ds.size());
  auto discrete_cols = [&](const Eigen::MatrixXd& y, const Eigen::MatrixXd& z) {
    std::vector<std::size_t> modes(static_cast<std::size_t>(count), 0);
    if (model.formulation != Formulation::Switched) return modes;
    for (Eigen::Index i = 0; i < count; ++i) {
      Discrete yy(d.p), zz(d.q);
      for (std::size_t r = 0; r < d.p; ++r) yy[r] = static_cast<std::int64_t>(y(static_cast<Eigen::Index>(r), i));
      for (std::size_t r = 0; r < d.q; ++r) zz[r] = static_cast<std::int64_t>(z(static_cast<Eigen::Index>(r), i));
      modes[static_cast<std::size_t>(i)] = model.mode_index(yy, zz);
    }
    return modes;
  };

  const Eigen::MatrixXd y0 = ds.group("y", d.p), y1 = ds.group("y", d.p, "_next");
  if (model.formulation == Formulation::Transformed) {
    b.s0 = stack_rows(stack_rows(ds.group("x", d.n), ds.group("u", d.m)), ds.group("v", d.n));
    b.c0 = stack_rows(ds.group("phi", d.m), ds.group("omega", d.q));
    b.s1 = stack_rows(stack_rows(ds.group("x", d.n, "_next"), ds.group("u", d.m, "_next")),
                      ds.group("v", d.n, "_next"));
    if (ds.two_step) {
      b.c1 = stack_rows(ds.group("phi", d.m, "_next"), ds.group("omega", d.q, "_next"));
      b.s2 = stack_rows(stack_rows(ds.group("x", d.n, "_next2"), ds.group("u", d.m, "_next2")),
                        ds.group("v", d.n, "_next2"));
    }
  } else {
    const bool hybrid = model.formulation == Formulation::GeneralHybrid;
    auto state = [&](const std::string& suffix) {
      return hybrid ? stack_rows(ds.group("x", d.n, suffix), ds.group("y", d.p, suffix)) : ds.group("x", d.n, suffix);
    };
    auto control = [&](const std::string& suffix) {
      return hybrid ? stack_rows(ds.group("u", d.m, suffix), ds.group("z", d.q, suffix)) : ds.group("u", d.m, suffix);
    };
    b.s0 = state("");
    b.c0 = control("");
    b.s1 = state("_next");
    b.mode0 = discrete_cols(y0, ds.group("z", d.q));
    if (ds.two_step) {
      b.c1 = control("_next");
      b.s2 = state("_next2");
      b.mode1 = discrete_cols(y1, ds.group("z", d.q, "_next"));
    }
  }
  if (b.mode0.empty()) b.mode0.assign(static_cast<std::size_t>(count), 0);
  if (ds.two_step && b.mode1.empty()) b.mode1.assign(static_cast<std::size_t>(count), 0);
  b.two_step = ds.two_step;
  b.weight = Eigen::VectorXd::Ones(count);
  b.transition.resize(static_cast<std::size_t>(count));
  for (Eigen::Index i = 0; i < count; ++i) b.transition[static_cast<std::size_t>(i)] = !(y0.col(i) == y1.col(i));
  return b;
}

/// Input normalization from the coordinate ranges seen in a batch.
inline void fit_normalization(KoopmanModel& model, const PairBatch& batch) {
  if (batch.size() == 0) return;
  Eigen::MatrixXd s(batch.s0.rows(), 2 * batch.s0.cols());
  s << batch.s0, batch.s1;
  const Vector slo = s.rowwise().minCoeff(), shi = s.rowwise().maxCoeff();
  Vector clo(batch.c0.rows()), chi(batch.c0.rows());
  if (batch.c0.rows() > 0) {
    clo = batch.c0.rowwise().minCoeff();
    chi = batch.c0.rowwise().maxCoeff();
  }
  set_normalization(model, slo, shi, clo, chi);
}

namespace detail {

inline std::vector<std::vector<Eigen::Index>> group_by_mode(const std::vector<std::size_t>& modes,
                                                            std::size_t mode_count) {
  std::vector<std::vector<Eigen::Index>> groups(mode_count);
  for (std::size_t i = 0; i < modes.size(); ++i) groups[modes[i]].push_back(static_cast<Eigen::Index>(i));
  return groups;
}

/// out.col(i) = K[mode_i] * in.col(i)
inline Eigen::MatrixXd apply_modes(const std::vector<RowMatrix>& k, const std::vector<std::vector<Eigen::Index>>& groups,
                                   const Eigen::MatrixXd& in, Eigen::Index rows) {
  Eigen::MatrixXd out(rows, in.cols());
  if (groups.size() == 1) {
    out.noalias() = k[0] * in;
    return out;
  }
  for (std::size_t j = 0; j < groups.size(); ++j) {
    if (groups[j].empty()) continue;
    out(Eigen::all, groups[j]) = k[j] * in(Eigen::all, groups[j]);
  }
  return out;
}

inline Eigen::MatrixXd apply_modes_transposed(const std::vector<RowMatrix>& k,
                                              const std::vector<std::vector<Eigen::Index>>& groups,
                                              const Eigen::MatrixXd& in, Eigen::Index rows) {
  Eigen::MatrixXd out(rows, in.cols());
  if (groups.size() == 1) {
    out.noalias() = k[0].transpose() * in;
    return out;
  }
  for (std::size_t j = 0; j < groups.size(); ++j) {
    if (groups[j].empty()) continue;
    out(Eigen::all, groups[j]) = k[j].transpose() * in(Eigen::all, groups[j]);
  }
  return out;
}

/// dK[mode] += a_cols * b_cols^T
inline void accumulate_outer(std::vector<RowMatrix>& dk, const std::vector<std::vector<Eigen::Index>>& groups,
                             const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (groups.size() == 1) {
    dk[0].noalias() += a * b.transpose();
    return;
  }
  for (std::size_t j = 0; j < groups.size(); ++j) {
    if (groups[j].empty()) continue;
    dk[j].noalias() += a(Eigen::all, groups[j]) * b(Eigen::all, groups[j]).transpose();
  }
}

inline Eigen::VectorXd denominators(const Eigen::MatrixXd& from, const Eigen::MatrixXd& to, std::size_t n) {
  const auto rows = static_cast<Eigen::Index>(n);
  return (to.topRows(rows) - from.topRows(rows)).colwise().squaredNorm().transpose().cwiseMax(kDenominatorFloor);
}

} // namespace detail

/// Mean of weight_i * ||ψ(s1) - K ψ(s0) - K_xu ψ_xu(s0, c0)||² / max(||Δx||², ε),
/// adding d(loss)/d(params) * scale into `grads` when given.
inline double one_step_loss(const KoopmanModel& model, const PairBatch& batch, ModelGradients* grads = nullptr,
                            double scale = 1.0) {
  const auto count = static_cast<double>(batch.size());
  if (batch.size() == 0) throw InvalidInput("loss needs a non-empty batch");
  const auto groups = detail::group_by_mode(batch.mode0, model.mode_count());
  const auto nx = static_cast<Eigen::Index>(model.psi_x_dim());
  ObservableCache c0, c1, cu;
  const Eigen::MatrixXd p0 = psi_x_batch(model, batch.s0, grads ? &c0 : nullptr);
  const Eigen::MatrixXd p1 = psi_x_batch(model, batch.s1, grads ? &c1 : nullptr);
  Eigen::MatrixXd pred = detail::apply_modes(model.kx, groups, p0, nx);
  Eigen::MatrixXd pu;
  if (model.controlled()) {
    pu = psi_xu_batch(model, batch.s0, batch.c0, grads ? &cu : nullptr);
    pred += detail::apply_modes(model.kxu, groups, pu, nx);
  }
  const Eigen::MatrixXd resid = p1 - pred;
  const Eigen::VectorXd den = detail::denominators(batch.s0, batch.s1, model.dims.n);
  const Eigen::VectorXd per = resid.colwise().squaredNorm().transpose().cwiseQuotient(den);
  const double loss = per.dot(batch.weight) / count;
  if (!grads) return loss;

  const Eigen::VectorXd coef = (2.0 * scale / count) * batch.weight.cwiseQuotient(den);
  const Eigen::MatrixXd dres = resid * coef.asDiagonal();
  const Eigen::MatrixXd dpred = -dres;
  detail::accumulate_outer(grads->kx, groups, dpred, p0);
  backprop_psi_x(model, c1, dres, *grads);
  backprop_psi_x(model, c0, detail::apply_modes_transposed(model.kx, groups, dpred, nx), *grads);
  if (model.controlled()) {
    detail::accumulate_outer(grads->kxu, groups, dpred, pu);
    backprop_psi_xu(model, cu,
                    detail::apply_modes_transposed(model.kxu, groups, dpred, static_cast<Eigen::Index>(pu.rows())),
                    *grads);
  }
  return loss;
}

/// Two-step residual ψ(s2) - K_b (K_a ψ(s0) + K_xu,a ψ_xu(s0, c0)) - K_xu,b ψ_xu(s1, c1),
/// normalized by ||x2 - x0||².
inline double two_step_loss(const KoopmanModel& model, const PairBatch& batch, ModelGradients* grads = nullptr,
                            double scale = 1.0) {
  if (!batch.two_step) throw InvalidInput("batch carries no two-step records");
  if (batch.size() == 0) throw InvalidInput("loss needs a non-empty batch");
  const auto count = static_cast<double>(batch.size());
  const auto ga = detail::group_by_mode(batch.mode0, model.mode_count());
  const auto gb = detail::group_by_mode(batch.mode1, model.mode_count());
  const auto nx = static_cast<Eigen::Index>(model.psi_x_dim());
  ObservableCache c0, c2, cu0, cu1;
  const Eigen::MatrixXd p0 = psi_x_batch(model, batch.s0, grads ? &c0 : nullptr);
  const Eigen::MatrixXd p2 = psi_x_batch(model, batch.s2, grads ? &c2 : nullptr);
  Eigen::MatrixXd mid = detail::apply_modes(model.kx, ga, p0, nx);
  Eigen::MatrixXd pu0, pu1;
  if (model.controlled()) {
    pu0 = psi_xu_batch(model, batch.s0, batch.c0, grads ? &cu0 : nullptr);
    pu1 = psi_xu_batch(model, batch.s1, batch.c1, grads ? &cu1 : nullptr);
    mid += detail::apply_modes(model.kxu, ga, pu0, nx);
  }
  Eigen::MatrixXd pred = detail::apply_modes(model.kx, gb, mid, nx);
  if (model.controlled()) pred += detail::apply_modes(model.kxu, gb, pu1, nx);
  const Eigen::MatrixXd resid = p2 - pred;
  const Eigen::VectorXd den = detail::denominators(batch.s0, batch.s2, model.dims.n);
  const Eigen::VectorXd per = resid.colwise().squaredNorm().transpose().cwiseQuotient(den);
  const double loss = per.dot(batch.weight) / count;
  if (!grads) return loss;

  const Eigen::VectorXd coef = (2.0 * scale / count) * batch.weight.cwiseQuotient(den);
  const Eigen::MatrixXd dres = resid * coef.asDiagonal();
  const Eigen::MatrixXd dpred = -dres;
  backprop_psi_x(model, c2, dres, *grads);
  detail::accumulate_outer(grads->kx, gb, dpred, mid);
  const Eigen::MatrixXd dmid = detail::apply_modes_transposed(model.kx, gb, dpred, nx);
  detail::accumulate_outer(grads->kx, ga, dmid, p0);
  backprop_psi_x(model, c0, detail::apply_modes_transposed(model.kx, ga, dmid, nx), *grads);
  if (model.controlled()) {
    const auto nu = static_cast<Eigen::Index>(pu0.rows());
    detail::accumulate_outer(grads->kxu, gb, dpred, pu1);
    backprop_psi_xu(model, cu1, detail::apply_modes_transposed(model.kxu, gb, dpred, nu), *grads);
    detail::accumulate_outer(grads->kxu, ga, dmid, pu0);
    backprop_psi_xu(model, cu0, detail::apply_modes_transposed(model.kxu, ga, dmid, nu), *grads);
  }
  return loss;
}

/// Unweighted single-step relative MSE.
inline double relative_mse(const KoopmanModel& model, PairBatch batch) {
  batch.weight.setOnes();
  return one_step_loss(model, batch);
}

/// Unweighted two-step relative MSE.
inline double multi_step_mse(const KoopmanModel& model, PairBatch batch) {
  batch.weight.setOnes();
  return two_step_loss(model, batch);
}

/// One-step predictions of the lifted state, one column per pair.
inline Eigen::MatrixXd predict_batch(const KoopmanModel& model, const PairBatch& batch) {
  const auto groups = detail::group_by_mode(batch.mode0, model.mode_count());
  const auto nx = static_cast<Eigen::Index>(model.psi_x_dim());
  Eigen::MatrixXd pred = detail::apply_modes(model.kx, groups, psi_x_batch(model, batch.s0), nx);
  if (model.controlled()) pred += detail::apply_modes(model.kxu, groups, psi_xu_batch(model, batch.s0, batch.c0), nx);
  return pred;
}

/// Linear-interpolated quantile of unsorted data.
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct VariableErrors {
  std::string name;
  double p50 = 0.0, p90 = 0.0, p99 = 0.0, max = 0.0;
};

struct EvalReport {
  std::size_t pairs = 0;
  double relative_mse = 0.0;
  std::size_t transition_pairs = 0;
  double transition_mse = std::numeric_limits<double>::quiet_NaN(); // relative MSE over pairs where y changes
  double steady_mse = std::numeric_limits<double>::quiet_NaN();     // over the remaining pairs
  std::vector<VariableErrors> variables; // absolute one-step error of each state coordinate
};

inline EvalReport evaluate(const KoopmanModel& model, const PairDataset& dataset) {
  PairBatch batch = make_batch(model, dataset);
  EvalReport r;
  r.pairs = batch.size();
  if (r.pairs == 0) return r;
  r.relative_mse = relative_mse(model, batch);
  std::vector<Eigen::Index> moved, steady;
  for (std::size_t i = 0; i < batch.size(); ++i)
    (batch.transition[i] ? moved : steady).push_back(static_cast<Eigen::Index>(i));
  r.transition_pairs = moved.size();
  if (!moved.empty()) r.transition_mse = relative_mse(model, batch.select(moved));
  if (!steady.empty()) r.steady_mse = relative_mse(model, batch.select(steady));

  const Eigen::MatrixXd pred = predict_batch(model, batch);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < model.dims.n; ++i) names.push_back("x" + std::to_string(i));
  if (model.formulation == Formulation::Transformed) {
    for (std::size_t i = 0; i < model.dims.m; ++i) names.push_back("u" + std::to_string(i));
    for (std::size_t i = 0; i < model.dims.n; ++i) names.push_back("v" + std::to_string(i));
  } else if (model.formulation == Formulation::GeneralHybrid) {
    for (std::size_t i = 0; i < model.dims.p; ++i) names.push_back("y" + std::to_string(i));
  }
  for (std::size_t v = 0; v < names.size(); ++v) {
    const auto row = static_cast<Eigen::Index>(v);
    std::vector<double> err(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto c = static_cast<Eigen::Index>(i);
      double target = batch.s1(row, c);
      double guess = pred(row, c);
      if (model.formulation == Formulation::GeneralHybrid && v >= model.dims.n)
        guess = static_cast<double>(recover_from_embedding(model.embedding(), guess));
      err[i] = std::abs(guess - target);
    }
    r.variables.push_back({names[v], quantile(err, 0.5), quantile(err, 0.9), quantile(err, 0.99),
                           *std::max_element(err.begin(), err.end())});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct TrainSchedule {
  std::size_t epochs = 2000;
  std::size_t batch_size = 256; // 0 = full batch
  AdamConfig adam;
  double lr_decay = 1.0;          // multiplies the learning rate every lr_decay_every epochs
  std::size_t lr_decay_every = 0; // 0 = constant learning rate
  double min_learning_rate = 0.0;
  double target_loss = 0.0; // stop once an epoch's loss is at or below this (0 = run all epochs)
  bool warm_start = false;
  std::size_t warm_start_epochs = 0;  // cap on the relaxed phase
  double warm_start_threshold = 0.0;  // 0 = five times target_loss
  double transition_weight = 1.0;
  double multi_step_coefficient = 0.0;
  bool sequential_control = false;
  std::size_t sequential_epochs = 0;
  double grad_clip = 0.0;
  std::size_t log_every = 0;
};

inline void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = {{"epochs", s.epochs},
       {"batch_size", s.batch_size},
       {"learning_rate", s.adam.learning_rate},
       {"beta1", s.adam.beta1},
       {"beta2", s.adam.beta2},
       {"epsilon", s.adam.epsilon},
       {"lr_decay", s.lr_decay},
       {"lr_decay_every", s.lr_decay_every},
       {"min_learning_rate", s.min_learning_rate},
       {"target_loss", s.target_loss},
       {"warm_start", s.warm_start},
       {"warm_start_epochs", s.warm_start_epochs},
       {"warm_start_threshold", s.warm_start_threshold},
       {"transition_weight", s.transition_weight},
       {"multi_step_coefficient", s.multi_step_coefficient},
       {"sequential_control", s.sequential_control},
       {"sequential_epochs", s.sequential_epochs},
       {"grad_clip", s.grad_clip},
       {"log_every", s.log_every}};
}

inline void from_json(const nlohmann::json& j, TrainSchedule& s) {
  s = TrainSchedule{};
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.adam.learning_rate = j.value("learning_rate", s.adam.learning_rate);
  s.adam.beta1 = j.value("beta1", s.adam.beta1);
  s.adam.beta2 = j.value("beta2", s.adam.beta2);
  s.adam.epsilon = j.value("epsilon", s.adam.epsilon);
  s.lr_decay = j.value("lr_decay", s.lr_decay);
  s.lr_decay_every = j.value("lr_decay_every", s.lr_decay_every);
  s.min_learning_rate = j.value("min_learning_rate", s.min_learning_rate);
  s.target_loss = j.value("target_loss", s.target_loss);
  s.warm_start = j.value("warm_start", s.warm_start);
  s.warm_start_epochs = j.value("warm_start_epochs", s.warm_start_epochs);
  s.warm_start_threshold = j.value("warm_start_threshold", s.warm_start_threshold);
  s.transition_weight = j.value("transition_weight", s.transition_weight);
  s.multi_step_coefficient = j.value("multi_step_coefficient", s.multi_step_coefficient);
  s.sequential_control = j.value("sequential_control", s.sequential_control);
  s.sequential_epochs = j.value("sequential_epochs", s.sequential_epochs);
  s.grad_clip = j.value("grad_clip", s.grad_clip);
  s.log_every = j.value("log_every", s.log_every);
}

struct TrainResult {
  std::vector<double> history; // mean training loss per epoch
  double final_loss = std::numeric_limits<double>::quiet_NaN(); // unweighted relative MSE on the full dataset
  std::size_t epochs_run = 0;
  std::size_t skipped_updates = 0;
  std::optional<std::size_t> warm_start_switch; // epoch at which the relaxed phase ended
  bool aborted = false;
  std::string message;
};

/// Which parameter groups receive updates.
struct TrainMask {
  bool rho = true;
  bool control = true;
};

namespace detail {

inline std::span<double> span_of(Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

inline std::span<double> learned_rows(RowMatrix& k, std::size_t frozen) {
  const auto offset = static_cast<std::size_t>(frozen) * static_cast<std::size_t>(k.cols());
  return {k.data() + offset, static_cast<std::size_t>(k.size()) - offset};
}

} // namespace detail

/// Parameter blocks in a fixed order: φ_x, φ_xu, ρ_ξ, ρ_ζ, then K_x and K_xu per mode
/// (learned rows only). `active` marks which blocks `mask` lets train.
struct ParameterView {
  std::vector<std::span<double>> blocks;
  std::vector<bool> active;
};

inline ParameterView parameter_view(KoopmanModel& model, const TrainMask& mask) {
  ParameterView v;
  auto add = [&](std::span<double> s, bool on) {
    v.blocks.push_back(s);
    v.active.push_back(on);
  };
  const bool rho_on = mask.rho && model.embedding() != EmbeddingKind::Relaxed;
  add(detail::span_of(model.phi_x.params), true);
  add(detail::span_of(model.phi_xu.params), mask.control);
  add(detail::span_of(model.xi.rho.params), rho_on);
  add(detail::span_of(model.zeta.rho.params), rho_on && mask.control);
  const auto frozen = model.frozen_rows();
  for (std::size_t j = 0; j < model.mode_count(); ++j) {
    add(detail::learned_rows(model.kx[j], frozen), true);
    add(detail::learned_rows(model.kxu[j], frozen), mask.control);
  }
  return v;
}

inline std::vector<std::span<double>> gradient_blocks(ModelGradients& g, std::size_t frozen) {
  std::vector<std::span<double>> out{detail::span_of(g.phi_x), detail::span_of(g.phi_xu), detail::span_of(g.rho_xi),
                                     detail::span_of(g.rho_zeta)};
  for (std::size_t j = 0; j < g.kx.size(); ++j) {
    out.push_back(detail::learned_rows(g.kx[j], frozen));
    out.push_back(detail::learned_rows(g.kxu[j], frozen));
  }
  return out;
}

/// Loss used for optimization: weighted one-step term plus the optional two-step term.
inline double training_objective(const KoopmanModel& model, const PairBatch& batch, const TrainSchedule& schedule,
                                 ModelGradients* grads) {
  double loss = one_step_loss(model, batch, grads);
  if (schedule.multi_step_coefficient > 0.0)
    loss += schedule.multi_step_coefficient * two_step_loss(model, batch, grads, schedule.multi_step_coefficient);
  return loss;
}

inline void zero_output_layer(DenseNet& net) {
  if (net.layer_count() == 0) return;
  net.weight(net.layer_count() - 1).setZero();
  net.bias(net.layer_count() - 1).setZero();
}

/// Switches a relaxed hybrid model to `kind`. The ρ output layer is zeroed,
/// so with tanh the observables are unchanged at the switch.
inline void end_warm_start(KoopmanModel& model, EmbeddingKind kind) {
  model.set_embedding(kind);
  if (model.uses_xi()) zero_output_layer(model.xi.rho);
  if (model.uses_zeta()) zero_output_layer(model.zeta.rho);
}

/// Joint Adam optimization of observable networks and K matrices.
inline TrainResult train(KoopmanModel& model, const PairDataset& dataset, const TrainSchedule& schedule,
                         std::ostream* log = nullptr) {
  PairBatch full = make_batch(model, dataset);
  if (full.size() == 0) throw InvalidInput("cannot train on an empty dataset");
  if (schedule.multi_step_coefficient > 0.0 && !full.two_step)
    throw SchemaError("multi-step training needs a dataset generated with two_step records");
  for (std::size_t i = 0; i < full.size(); ++i)
    if (full.transition[i]) full.weight[static_cast<Eigen::Index>(i)] = schedule.transition_weight;

  TrainResult result;
  const EmbeddingKind target_kind = model.embedding();
  bool relaxed_phase = schedule.warm_start && model.formulation == Formulation::GeneralHybrid;
  if (relaxed_phase) model.set_embedding(EmbeddingKind::Relaxed);
  const double warm_threshold =
      schedule.warm_start_threshold > 0.0 ? schedule.warm_start_threshold : 5.0 * schedule.target_loss;
  const std::size_t frozen = model.frozen_rows();
  const bool sequential = schedule.sequential_control && model.controlled() && schedule.sequential_epochs > 0;
  if (sequential)
    for (auto& k : model.kxu) {
      auto rows = detail::learned_rows(k, frozen);
      std::fill(rows.begin(), rows.end(), 0.0);
    }

  AdamState adam;
  adam.config = schedule.adam;
  std::mt19937_64 rng(model.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Eigen::Index> order(full.size());
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const std::size_t batch_size =
      schedule.batch_size == 0 ? full.size() : std::min(schedule.batch_size, full.size());
  KoopmanModel checkpoint = model;

  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    double lr = schedule.adam.learning_rate;
    if (schedule.lr_decay_every > 0)
      lr *= std::pow(schedule.lr_decay, static_cast<double>(epoch / schedule.lr_decay_every));
    adam.config.learning_rate = std::max(lr, schedule.min_learning_rate);

    const TrainMask mask{!relaxed_phase, !(sequential && epoch < schedule.sequential_epochs)};
    if (batch_size < full.size()) std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < full.size(); start += batch_size) {
      const std::size_t end = std::min(full.size(), start + batch_size);
      ModelGradients grads = ModelGradients::zeros(model);
      double loss;
      if (end - start == full.size()) {
        loss = training_objective(model, full, schedule, &grads);
      } else {
        std::vector<Eigen::Index> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                      order.begin() + static_cast<std::ptrdiff_t>(end));
        loss = training_objective(model, full.select(idx), schedule, &grads);
      }
      epoch_loss += loss * static_cast<double>(end - start);
      auto view = parameter_view(model, mask);
      auto gblocks = gradient_blocks(grads, frozen);
      if (schedule.grad_clip > 0.0) clip_global_norm(gblocks, schedule.grad_clip);
      std::vector<std::span<const double>> cblocks(gblocks.begin(), gblocks.end());
      auto active_storage = std::make_unique<bool[]>(view.active.size());
      std::copy(view.active.begin(), view.active.end(), active_storage.get());
      std::span<const bool> active(active_storage.get(), view.active.size());
      if (!adam_step(view.blocks, cblocks, adam, active)) {
        ++result.skipped_updates;
        if (log) *log << "epoch " << epoch << ": non-finite gradient, update skipped\n";
      }
    }
    epoch_loss /= static_cast<double>(full.size());
    result.epochs_run = epoch + 1;

    if (!std::isfinite(epoch_loss)) {
      model = checkpoint;
      result.aborted = true;
      result.message = "non-finite loss at epoch " + std::to_string(epoch) + "; restored last good checkpoint";
      if (log) *log << result.message << '\n';
      break;
    }
    if (!structured_blocks_intact(model)) throw std::logic_error("frozen Koopman blocks were modified during training");
    result.history.push_back(epoch_loss);
    checkpoint = model;
    if (log && schedule.log_every > 0 && epoch % schedule.log_every == 0)
      *log << "epoch " << epoch << " loss " << epoch_loss << " lr " << adam.config.learning_rate
           << (relaxed_phase ? " (relaxed)" : "") << '\n';

    if (relaxed_phase) {
      const bool done = epoch_loss <= warm_threshold ||
                        (schedule.warm_start_epochs > 0 && epoch + 1 >= schedule.warm_start_epochs);
      if (done) {
        end_warm_start(model, target_kind);
        relaxed_phase = false;
        result.warm_start_switch = epoch;
        if (log) *log << "epoch " << epoch << ": warm start finished, switching to " << to_string(target_kind) << '\n';
      }
      continue;
    }
    if (schedule.target_loss > 0.0 && epoch_loss <= schedule.target_loss &&
        !(sequential && epoch < schedule.sequential_epochs))
      break;
  }
  if (relaxed_phase) {
    end_warm_start(model, target_kind);
    result.warm_start_switch = result.epochs_run;
  }
  result.final_loss = relative_mse(model, full);
  model.train_config["schedule"] = schedule;
  return result;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kModelSchemaVersion = 1;

namespace detail {

inline nlohmann::json matrix_json(const Eigen::Ref<const RowMatrix>& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline RowMatrix matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
    throw SchemaError(what + ": expected " + std::to_string(rows) + " rows");
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw SchemaError(what + ": expected " + std::to_string(cols) + " columns");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline std::vector<double> vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline nlohmann::json net_json(const DenseNet& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < net.layer_count(); ++l)
    layers.push_back({{"W", matrix_json(net.weight(l))}, {"b", vec(net.bias(l))}});
  return {{"layers", layers}, {"input_offset", vec(net.input_offset)}, {"input_scale", vec(net.input_scale)}};
}

inline DenseNet net_from_json(const std::vector<std::size_t>& sizes, const nlohmann::json& j, const std::string& what) {
  if (sizes.empty()) return DenseNet{};
  DenseNet net(sizes);
  const auto& layers = j.at("layers");
  if (layers.size() != net.layer_count()) throw SchemaError(what + ": layer count mismatch");
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    auto w = net.weight(l);
    w = matrix_from_json(layers[l].at("W"), w.rows(), w.cols(), what);
    auto b = layers[l].at("b").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(b.size()) != net.bias(l).size()) throw SchemaError(what + ": bias size mismatch");
    net.bias(l) = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
  }
  auto off = j.at("input_offset").get<std::vector<double>>();
  auto sc = j.at("input_scale").get<std::vector<double>>();
  if (off.size() != net.input_dim() || sc.size() != net.input_dim())
    throw SchemaError(what + ": normalization size mismatch");
  net.input_offset = Eigen::Map<const Eigen::VectorXd>(off.data(), static_cast<Eigen::Index>(off.size()));
  net.input_scale = Eigen::Map<const Eigen::VectorXd>(sc.data(), static_cast<Eigen::Index>(sc.size()));
  return net;
}

inline std::string mode_label(const Discrete& sigma) {
  if (sigma.empty()) return "single";
  std::string s;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(sigma[i]);
  }
  return s;
}

inline nlohmann::json ranges_json(const std::vector<DiscreteRange>& d) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : d) a.push_back({r.lo, r.hi});
  return a;
}

inline std::vector<DiscreteRange> ranges_from_json(const nlohmann::json& j) {
  std::vector<DiscreteRange> out;
  for (const auto& r : j) out.push_back({r.at(0).get<std::int64_t>(), r.at(1).get<std::int64_t>()});
  return out;
}

} // namespace detail

inline nlohmann::json model_to_json(const KoopmanModel& model) {
  nlohmann::json j;
  j["schema_version"] = kModelSchemaVersion;
  j["formulation"] = to_string(model.formulation);
  j["system"] = {{"name", model.system_name}, {"params", model.system_params}};
  j["dims"] = {{"n", model.dims.n}, {"m", model.dims.m}, {"p", model.dims.p}, {"q", model.dims.q}};
  j["domains"] = {{"y", detail::ranges_json(model.y_domain)}, {"z", detail::ranges_json(model.z_domain)}};
  j["embedding"] = to_string(model.embedding());
  j["layer_sizes"] = {{"phi_x", model.phi_x.sizes()},
                      {"phi_xu", model.phi_xu.sizes()},
                      {"rho_xi", model.xi.rho.sizes()},
                      {"rho_zeta", model.zeta.rho.sizes()}};
  nlohmann::json weights;
  weights["phi_x"] = detail::net_json(model.phi_x);
  if (model.controlled()) weights["phi_xu"] = detail::net_json(model.phi_xu);
  if (model.uses_xi()) weights["rho_xi"] = detail::net_json(model.xi.rho);
  if (model.uses_zeta()) weights["rho_zeta"] = detail::net_json(model.zeta.rho);
  j["weights"] = weights;
  nlohmann::json modes = nlohmann::json::array();
  nlohmann::json ks = nlohmann::json::object();
  for (std::size_t m = 0; m < model.mode_count(); ++m) {
    modes.push_back(model.modes[m]);
    ks[detail::mode_label(model.modes[m])] = {{"Kx", detail::matrix_json(model.kx[m])},
                                              {"Kxu", detail::matrix_json(model.kxu[m])}};
  }
  j["modes"] = modes;
  j["K_matrices"] = ks;
  j["train_config"] = model.train_config;
  j["seed"] = model.seed;
  j["config_hash"] = model.config_hash;
  return j;
}

inline KoopmanModel model_from_json(const nlohmann::json& j) {
  try {
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kModelSchemaVersion)
      throw SchemaError("unsupported model schema_version (expected " + std::to_string(kModelSchemaVersion) + ")");
    KoopmanModel model;
    model.formulation = parse_formulation(j.at("formulation").get<std::string>());
    model.system_name = j.at("system").at("name").get<std::string>();
    model.system_params = j.at("system").value("params", nlohmann::json(nullptr));
    const auto& d = j.at("dims");
    model.dims = {d.at("n").get<std::size_t>(), d.at("m").get<std::size_t>(), d.at("p").get<std::size_t>(),
                  d.at("q").get<std::size_t>()};
    model.y_domain = detail::ranges_from_json(j.at("domains").at("y"));
    model.z_domain = detail::ranges_from_json(j.at("domains").at("z"));
    if (model.y_domain.size() != model.dims.p || model.z_domain.size() != model.dims.q)
      throw SchemaError("discrete domains do not match dims");
    const auto& sizes = j.at("layer_sizes");
    const auto& w = j.at("weights");
    auto net = [&](const char* key) {
      auto s = sizes.at(key).get<std::vector<std::size_t>>();
      if (s.empty()) return DenseNet{};
      return detail::net_from_json(s, w.at(key), key);
    };
    model.phi_x = net("phi_x");
    model.phi_xu = net("phi_xu");
    model.xi.rho = net("rho_xi");
    model.zeta.rho = net("rho_zeta");
    model.set_embedding(parse_embedding(j.at("embedding").get<std::string>()));
    if (model.phi_x.input_dim() != model.state_dim()) throw SchemaError("phi_x input size does not match dims");
    if (model.controlled() && model.phi_xu.input_dim() != model.state_dim() + model.control_dim())
      throw SchemaError("phi_xu input size does not match dims");
    if (model.uses_xi() && model.embedding() != EmbeddingKind::Relaxed && model.xi.rho.output_dim() != model.dims.p)
      throw SchemaError("rho_xi output size does not match dims");

    const auto nx = static_cast<Eigen::Index>(model.psi_x_dim());
    const auto nu = static_cast<Eigen::Index>(model.psi_xu_dim());
    for (const auto& m : j.at("modes")) {
      Discrete sigma = m.get<Discrete>();
      const auto& k = j.at("K_matrices").at(detail::mode_label(sigma));
      model.modes.push_back(sigma);
      model.kx.push_back(detail::matrix_from_json(k.at("Kx"), nx, nx, "Kx"));
      model.kxu.push_back(detail::matrix_from_json(k.at("Kxu"), nx, nu, "Kxu"));
    }
    if (model.modes.empty()) throw SchemaError("model has no Koopman matrices");
    model.train_config = j.value("train_config", nlohmann::json::object());
    model.seed = j.value("seed", std::uint64_t{0});
    model.config_hash = j.value("config_hash", std::string{});
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("corrupted model file: ") + e.what());
  }
}

inline void save_model(const KoopmanModel& model, std::ostream& out) { out << model_to_json(model).dump(1) << '\n'; }

inline KoopmanModel load_model(std::istream& in) {
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("corrupted model file: ") + e.what());
  }
  return model_from_json(j);
}

/// Rejects a model whose dimensions differ from the system it is used with.
inline void check_compatible(const KoopmanModel& model, const HybridSystemSpec& spec) {
  if (model.dims != spec.dims)
    throw SchemaError("model dimensions (n=" + std::to_string(model.dims.n) + ", m=" + std::to_string(model.dims.m) +
                      ", p=" + std::to_string(model.dims.p) + ", q=" + std::to_string(model.dims.q) +
                      ") do not match system '" + spec.name + "'");
}

} // namespace hkoop

#endif // HKOOP_KOOPMAN_HPP
