#pragma once

// Control-signal generators: neural controllers trained through the solver
// (MLP for oscillators, GNN for epidemics) and the analytic baselines.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nodec/autodiff.hpp"
#include "nodec/graph.hpp"
#include "nodec/odesolve.hpp"
#include "nodec/random.hpp"

namespace nodec::ctl {

class ControllerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Kind { mlp, gnn, feedback, targeted_constant, random_constant, free };

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::mlp: return "mlp-nodec";
    case Kind::gnn: return "gnn-nodec";
    case Kind::feedback: return "feedback";
    case Kind::targeted_constant: return "targeted-constant";
    case Kind::random_constant: return "random-constant";
    case Kind::free: return "free";
  }
  return "?";
}

struct Parameter {
  std::string name;
  ad::Tensor value;
};

/// Named, ordered parameter tensors.
class ParameterSet {
 public:
  void add(std::string name, ad::Tensor value) { items_.push_back({std::move(name), std::move(value)}); }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  Parameter& operator[](std::size_t i) { return items_[i]; }
  const Parameter& operator[](std::size_t i) const { return items_[i]; }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.value.size();
    return n;
  }

  std::vector<ad::Var> constants() const {
    std::vector<ad::Var> out;
    for (const auto& p : items_) out.push_back(ad::constant(p.value));
    return out;
  }

  std::vector<ad::Var> on_tape(ad::Tape& tape) const {
    std::vector<ad::Var> out;
    for (const auto& p : items_) out.push_back(tape.variable(p.value));
    return out;
  }

  /// Same names and shapes, in the same order.
  bool compatible(const ParameterSet& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (o[i].name != items_[i].name || !(o[i].value.shape == items_[i].value.shape)) return false;
    return true;
  }

  bool operator==(const ParameterSet& o) const {
    if (!compatible(o)) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (o[i].value.values != items_[i].value.values) return false;
    return true;
  }

 private:
  std::vector<Parameter> items_;
};

class Controller {
 public:
  virtual ~Controller() = default;
  virtual Kind kind() const = 0;
  virtual std::size_t outputs() const = 0;

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Control function with the weights bound to `w`. Tape variables make the
  /// solve differentiable; constants give the plain evaluation.
  ode::ControlFn bind(std::vector<ad::Var> w) const { return do_bind(std::move(w)); }
  ode::ControlFn bind() const { return do_bind(params_.constants()); }

 protected:
  virtual ode::ControlFn do_bind(std::vector<ad::Var> w) const = 0;

  ParameterSet params_;
};

namespace detail {

inline ad::Tensor uniform_init(Rng& rng, ad::Shape shape, std::size_t fan_in) {
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  ad::Tensor t(shape, 0.0);
  for (auto& v : t.values) v = rng.uniform(-s, s);
  return t;
}

inline void check_weights(const std::vector<ad::Var>& w, const ParameterSet& p) {
  if (w.size() != p.size()) throw ControllerError("bind: expected " + std::to_string(p.size()) + " weight tensors");
  for (std::size_t i = 0; i < w.size(); ++i)
    if (!(w[i].shape() == p[i].value.shape)) throw ad::ShapeError("bind " + p[i].name, w[i].shape(), p[i].value.shape);
}

}  // namespace detail

/// sin(x) -> [dense, ELU]* -> dense(M).
class MlpController : public Controller {
 public:
  MlpController(std::size_t inputs, std::vector<std::size_t> hidden, std::size_t outputs, std::uint64_t seed)
      : inputs_(inputs), hidden_(std::move(hidden)), outputs_(outputs) {
    if (inputs == 0) throw ControllerError("mlp: zero inputs");
    Rng rng(seed);
    std::size_t fan_in = inputs;
    std::vector<std::size_t> widths = hidden_;
    widths.push_back(outputs);
    for (std::size_t l = 0; l < widths.size(); ++l) {
      if (widths[l] == 0 && l + 1 < widths.size()) throw ControllerError("mlp: zero-width hidden layer");
      params_.add("layer" + std::to_string(l) + ".weight", detail::uniform_init(rng, ad::Shape{widths[l], fan_in}, fan_in));
      params_.add("layer" + std::to_string(l) + ".bias", ad::Tensor(ad::Shape{widths[l]}, 0.0));
      fan_in = widths[l];
    }
  }

  Kind kind() const override { return Kind::mlp; }
  std::size_t outputs() const override { return outputs_; }
  const std::vector<std::size_t>& hidden() const { return hidden_; }

  ad::Var forward(const ad::Var& x, const std::vector<ad::Var>& w) const {
    if (x.shape().rank() != 1 || x.size() != inputs_) throw ad::ShapeError("mlp", x.shape(), ad::Shape{inputs_});
    ad::Var h = ad::sin(x);
    const std::size_t layers = w.size() / 2;
    for (std::size_t l = 0; l < layers; ++l) {
      h = ad::matmul(w[2 * l], h) + w[2 * l + 1];
      if (l + 1 < layers) h = ad::elu(h);
    }
    return h;
  }

  ode::ControlFn do_bind(std::vector<ad::Var> w) const override {
    detail::check_weights(w, params_);
    return [this, w = std::move(w)](double, const ad::Var& x) { return forward(x, w); };
  }

 private:
  std::size_t inputs_;
  std::vector<std::size_t> hidden_;
  std::size_t outputs_;
};

/// Message-passing controller for the 4 x N epidemic state.
///
/// Each round gathers every node's neighbour states into a 4 x N x d tensor
/// (zero padded), applies a learned 4 -> 4 channel map plus bias and ELU to
/// each neighbour slot, and averages over the real neighbours. The decision
/// head averages the channels, keeps the driver entries and returns
/// budget * softmax.
class GnnController : public Controller {
 public:
  GnnController(const graph::Graph& g, const graph::DriverMap& drivers, double budget, std::size_t rounds,
                std::uint64_t seed)
      : n_(g.size()), budget_(budget), rounds_(rounds) {
    if (drivers.empty()) throw ControllerError("gnn: no driver nodes");
    if (drivers.node_count() != n_) throw ControllerError("gnn: driver map built for another graph");
    if (rounds == 0) throw ControllerError("gnn: rounds must be >= 1");
    if (!(budget > 0.0)) throw ControllerError("gnn: budget must be positive");
    m_ = drivers.size();
    d_ = std::max<std::size_t>(1, g.max_degree());
    std::vector<std::ptrdiff_t> idx(kChannels * n_ * d_, -1);
    std::vector<double> mask(kChannels * n_ * d_, 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
      const auto nb = g.neighbors(i);
      for (std::size_t k = 0; k < kChannels; ++k)
        for (std::size_t j = 0; j < nb.size(); ++j) {
          const std::size_t slot = (k * n_ + i) * d_ + j;
          idx[slot] = static_cast<std::ptrdiff_t>(k * n_ + nb[j]);
          mask[slot] = 1.0 / static_cast<double>(nb.size());
        }
    }
    embed_ = ad::make_index(std::move(idx));
    mask_ = ad::constant(ad::Tensor(ad::Shape{kChannels, n_ * d_}, std::move(mask)));
    std::vector<std::ptrdiff_t> didx;
    for (auto v : drivers.nodes()) didx.push_back(static_cast<std::ptrdiff_t>(v));
    driver_idx_ = ad::make_index(std::move(didx));
    Rng rng(seed);
    for (std::size_t r = 0; r < rounds; ++r) {
      params_.add("round" + std::to_string(r) + ".weight", detail::uniform_init(rng, ad::Shape{kChannels, kChannels}, kChannels));
      params_.add("round" + std::to_string(r) + ".bias", detail::uniform_init(rng, ad::Shape{kChannels, 1}, kChannels));
    }
  }

  static constexpr std::size_t kChannels = 4;

  Kind kind() const override { return Kind::gnn; }
  std::size_t outputs() const override { return m_; }
  std::size_t max_degree() const { return d_; }
  std::size_t rounds() const { return rounds_; }
  double budget() const { return budget_; }

  ad::Var forward(const ad::Var& x, const std::vector<ad::Var>& w) const {
    if (!(x.shape() == ad::Shape{kChannels, n_})) throw ad::ShapeError("gnn", x.shape(), ad::Shape{kChannels, n_});
    const ad::Shape slots{kChannels, n_ * d_};
    ad::Var z = x;
    for (std::size_t r = 0; r < rounds_; ++r) {
      const ad::Var psi = ad::gather(z, embed_, slots);
      const ad::Var h = ad::elu(ad::matmul(w[2 * r], psi) + ad::expand(w[2 * r + 1], slots)) * mask_;
      z = ad::sum_axis(ad::reshape(h, ad::Shape{kChannels, n_, d_}), 2);
    }
    const ad::Var logits = ad::gather(ad::mean_axis(z, 0), driver_idx_, ad::Shape{m_});
    return ad::scale(ad::softmax(logits), budget_);
  }

  ode::ControlFn do_bind(std::vector<ad::Var> w) const override {
    detail::check_weights(w, params_);
    return [this, w = std::move(w)](double, const ad::Var& x) { return forward(x, w); };
  }

 private:
  std::size_t n_, m_ = 0, d_ = 1;
  double budget_;
  std::size_t rounds_;
  ad::Index embed_;
  ad::Var mask_;
  ad::Index driver_idx_;
};

/// u_m = zeta * b_m * sin(x*_i - x_i) on driver i = node of slot m.
class FeedbackController : public Controller {
 public:
  FeedbackController(const graph::DriverMap& drivers, double zeta, std::vector<double> target = {})
      : drivers_(drivers), zeta_(zeta), target_(std::move(target)) {
    if (!drivers.has_gains()) throw ControllerError("feedback: driver map carries no gains");
    if (target_.empty()) target_.assign(drivers.node_count(), 0.0);
    if (target_.size() != drivers.node_count()) throw ControllerError("feedback: target length differs from node count");
    std::vector<std::ptrdiff_t> idx;
    std::vector<double> gain, tgt;
    for (std::size_t m = 0; m < drivers.size(); ++m) {
      idx.push_back(static_cast<std::ptrdiff_t>(drivers.nodes()[m]));
      gain.push_back(zeta_ * drivers.gains()[m]);
      tgt.push_back(target_[drivers.nodes()[m]]);
    }
    idx_ = ad::make_index(std::move(idx));
    gain_ = ad::constant(ad::Tensor::vector(std::move(gain)));
    tgt_ = ad::constant(ad::Tensor::vector(std::move(tgt)));
  }

  Kind kind() const override { return Kind::feedback; }
  std::size_t outputs() const override { return drivers_.size(); }

  ode::ControlFn do_bind(std::vector<ad::Var>) const override {
    return [this](double, const ad::Var& x) {
      if (drivers_.empty()) return ad::constant(ad::Tensor(ad::Shape{0}, 0.0));
      const ad::Var xd = ad::gather(x, idx_, ad::Shape{drivers_.size()});
      return gain_ * ad::sin(tgt_ - xd);
    };
  }

 private:
  graph::DriverMap drivers_;
  double zeta_;
  std::vector<double> target_;
  ad::Index idx_;
  ad::Var gain_, tgt_;
};

/// Whole budget split evenly over the drivers inside the target set (all
/// drivers when no target set is given); zero elsewhere.
class TargetedConstantController : public Controller {
 public:
  TargetedConstantController(const graph::DriverMap& drivers, double budget, std::span<const std::size_t> targets = {}) {
    if (drivers.empty()) throw ControllerError("targeted-constant: no driver nodes");
    std::vector<bool> in_target(drivers.node_count(), targets.empty());
    for (auto t : targets) {
      if (t >= drivers.node_count()) throw ControllerError("targeted-constant: target node out of range");
      in_target[t] = true;
    }
    std::size_t hit = 0;
    for (auto v : drivers.nodes()) hit += in_target[v] ? 1 : 0;
    if (hit == 0) throw ControllerError("targeted-constant: no driver node inside the target set");
    ad::Tensor u(ad::Shape{drivers.size()}, 0.0);
    for (std::size_t m = 0; m < drivers.size(); ++m)
      if (in_target[drivers.nodes()[m]]) u.values[m] = budget / static_cast<double>(hit);
    u_ = ad::constant(std::move(u));
  }

  Kind kind() const override { return Kind::targeted_constant; }
  std::size_t outputs() const override { return u_.size(); }
  const ad::Tensor& value() const { return u_.value(); }

  ode::ControlFn do_bind(std::vector<ad::Var>) const override {
    return [u = u_](double, const ad::Var&) { return u; };
  }

 private:
  ad::Var u_;
};

/// u_m = b c_m / sum c, c_m ~ U(0, 1). Drawn once, or redrawn at every
/// controller call when per_step is set (each bound solve restarts the stream).
class RandomConstantController : public Controller {
 public:
  RandomConstantController(std::size_t m, double budget, std::uint64_t seed, bool per_step = false)
      : m_(m), budget_(budget), seed_(seed), per_step_(per_step) {
    if (m == 0) throw ControllerError("random-constant: no driver nodes");
    Rng rng(seed);
    u_ = ad::constant(draw(rng));
  }

  Kind kind() const override { return Kind::random_constant; }
  std::size_t outputs() const override { return m_; }
  const ad::Tensor& value() const { return u_.value(); }
  bool per_step() const { return per_step_; }

  ode::ControlFn do_bind(std::vector<ad::Var>) const override {
    if (!per_step_) return [u = u_](double, const ad::Var&) { return u; };
    auto rng = std::make_shared<Rng>(seed_);
    return [this, rng](double, const ad::Var&) { return ad::constant(draw(*rng)); };
  }

 private:
  ad::Tensor draw(Rng& rng) const {
    ad::Tensor c(ad::Shape{m_}, 0.0);
    double total = 0.0;
    for (auto& v : c.values) total += (v = rng.uniform());
    if (!(total > 0.0)) {
      c.values.assign(m_, 1.0);
      total = static_cast<double>(m_);
    }
    for (auto& v : c.values) v = budget_ * v / total;
    return c;
  }

  std::size_t m_;
  double budget_;
  std::uint64_t seed_;
  bool per_step_;
  ad::Var u_;
};

class FreeController : public Controller {
 public:
  explicit FreeController(std::size_t m) : m_(m) {}
  Kind kind() const override { return Kind::free; }
  std::size_t outputs() const override { return m_; }
  ode::ControlFn do_bind(std::vector<ad::Var>) const override {
    return [u = ad::constant(ad::Tensor(ad::Shape{m_}, 0.0))](double, const ad::Var&) { return u; };
  }

 private:
  std::size_t m_;
};

// Checkpoints: "NODEC1\n", one "name d0 d1 ..." line per tensor, a blank
// line, then the values as little-endian float64 in declaration order.

inline void save_checkpoint(std::ostream& os, const ParameterSet& p) {
  os << "NODEC1\n";
  for (const auto& q : p) {
    os << q.name;
    for (auto d : q.value.shape.dims()) os << ' ' << d;
    os << '\n';
  }
  os << '\n';
  for (const auto& q : p)
    for (double v : q.value.values) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      char buf[8];
      for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
      os.write(buf, 8);
    }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

inline ParameterSet load_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "NODEC1") throw std::runtime_error("checkpoint: bad magic");
  ParameterSet p;
  while (std::getline(is, line) && !line.empty()) {
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    std::vector<std::size_t> dims;
    std::size_t d;
    while (ls >> d) dims.push_back(d);
    if (name.empty() || dims.size() > ad::Shape::max_rank) throw std::runtime_error("checkpoint: bad header line '" + line + "'");
    p.add(name, ad::Tensor(ad::Shape(std::span<const std::size_t>(dims)), 0.0));
  }
  for (auto& q : p)
    for (double& v : q.value.values) {
      unsigned char buf[8];
      if (!is.read(reinterpret_cast<char*>(buf), 8)) throw std::runtime_error("checkpoint: truncated data");
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
      v = std::bit_cast<double>(bits);
    }
  return p;
}

/// Copies checkpoint values into a controller with the same architecture.
inline void load_into(Controller& c, const ParameterSet& saved) {
  if (!c.params().compatible(saved)) throw ControllerError("checkpoint does not match the controller architecture");
  for (std::size_t i = 0; i < saved.size(); ++i) c.params()[i].value = saved[i].value;
}

}  // namespace nodec::ctl
