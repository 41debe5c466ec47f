#include "tshamo/diffcore.hpp"

namespace tshamo::diffcore {

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("var: unbound handle");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

const Tensor& Gradients::operator[](const Var& v) const {
  if (!has(v)) throw std::out_of_range("gradients: no gradient for requested tensor");
  return grads_[v.id()];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NonFiniteError("leaf: non-finite value");
  nodes_.push_back(Node{std::move(value), requires_grad, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* primitive, Tensor value, bool requires_grad, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string(primitive) + ": non-finite output of shape " + to_string(value.shape()));
  }
  if (!requires_grad) backward = nullptr;
  nodes_.push_back(Node{std::move(value), requires_grad, std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(std::size_t id) {
  if (!grad_present_[id]) {
    grads_[id] = Tensor(nodes_[id].value.shape());
    grad_present_[id] = true;
  }
  return grads_[id];
}

Gradients Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss is not on this tape");
  if (backward_done_) throw std::logic_error("backward: already called on this tape; reset() first");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + to_string(loss.shape()));
  }
  backward_done_ = true;
  grads_.assign(nodes_.size(), Tensor());
  grad_present_.assign(nodes_.size(), false);
  if (!nodes_[loss.id()].requires_grad) return Gradients(std::move(grads_), std::move(grad_present_));

  grad(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    if (!grad_present_[i] || !nodes_[i].backward) continue;
    nodes_[i].backward(*this, grads_[i]);
  }
  return Gradients(std::move(grads_), std::move(grad_present_));
}

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
  grad_present_.clear();
  backward_done_ = false;
}

Bindings bind(Tape& tape, const ParameterSet& params, bool requires_grad) {
  Bindings out;
  for (const auto& [name, value] : params) out.emplace(name, tape.leaf(value, requires_grad));
  return out;
}

GradientSet collect(const Gradients& grads, const Bindings& bindings) {
  GradientSet out;
  for (const auto& [name, var] : bindings) {
    if (grads.has(var)) out.emplace(name, grads[var]);
  }
  return out;
}

Index parameter_count(const ParameterSet& params) {
  Index n = 0;
  for (const auto& [name, value] : params) n += value.size();
  return n;
}

void adam_step(ParameterSet& params, const GradientSet& grads, AdamState& state, double lr,
               const AdamConfig& config) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("adam: gradient for unknown parameter " + name);
    if (it->second.shape() != g.shape()) {
      throw ShapeError("adam: gradient shape " + to_string(g.shape()) + " does not match parameter " + name +
                       " " + to_string(it->second.shape()));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() == 0) m = Eigen::VectorXd::Zero(p.size());
    if (v.size() == 0) v = Eigen::VectorXd::Zero(p.size());
    if (m.size() != p.size() || v.size() != p.size()) {
      throw ShapeError("adam: optimizer state does not match parameter " + name);
    }
    auto git = grads.find(name);
    if (git == grads.end()) {
      m *= config.beta1;
      v *= config.beta2;
    } else {
      const Eigen::VectorXd& gv = git->second.data();
      m = config.beta1 * m + (1.0 - config.beta1) * gv;
      v = config.beta2 * v + (1.0 - config.beta2) * gv.cwiseAbs2();
    }
    p.data().array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config.eps);
  }
}

}  // namespace tshamo::diffcore
