#include "layers.hpp"

#include <cmath>

namespace tshamo::denoisers::detail {

void Init::normal(const std::string& name, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = stddev * rng_.normal();
  params_.emplace(name, std::move(t));
}

void Init::constant(const std::string& name, Shape shape, double value) {
  Tensor t(std::move(shape));
  t.data().setConstant(value);
  params_.emplace(name, std::move(t));
}

void Init::linear(const std::string& name, Index in, Index out) {
  normal(name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  constant(name + ".b", {out}, 0.0);
}

void Init::norm(const std::string& name, Index dim) {
  constant(name + ".gamma", {dim}, 1.0);
  constant(name + ".beta", {dim}, 0.0);
}

void Init::conv(const std::string& name, Index kernel, Index in, Index out) {
  normal(name + ".w", {kernel * in, out}, 1.0 / std::sqrt(static_cast<double>(kernel * in)));
  constant(name + ".b", {out}, 0.0);
}

const Var& param(const Bindings& p, const std::string& name) {
  const auto it = p.find(name);
  if (it == p.end()) throw std::invalid_argument("denoiser: parameter '" + name + "' is not bound");
  return it->second;
}

Var linear(const Bindings& p, const std::string& name, const Var& x) {
  return diffcore::add(diffcore::matmul(x, param(p, name + ".w")), param(p, name + ".b"));
}

Var norm(const Bindings& p, const std::string& name, const Var& x) {
  return diffcore::layer_norm(x, param(p, name + ".gamma"), param(p, name + ".beta"));
}

Var conv(const Bindings& p, const std::string& name, const Var& x) {
  return diffcore::add(diffcore::conv1d(x, param(p, name + ".w")), param(p, name + ".b"));
}

Var add_positions(const Var& x, const Var& table) {
  const Shape s = x.shape();
  const Var flat = diffcore::reshape(x, {s[0], s[1] * s[2]});
  const Var bias = diffcore::reshape(table, {s[1] * s[2]});
  return diffcore::reshape(diffcore::add(flat, bias), s);
}

Var broadcast_time(const Var& v, Index length) {
  const Shape s = v.shape();
  return diffcore::repeat(diffcore::reshape(v, {s[0], 1, s[1]}), 1, length);
}

namespace {

Var split_heads(const Var& x, int heads) {
  const Shape s = x.shape();  // [B, T, d]
  const Index dh = s[2] / heads;
  const Var h = diffcore::permute(diffcore::reshape(x, {s[0], s[1], heads, dh}), {0, 2, 1, 3});
  return diffcore::reshape(h, {s[0] * heads, s[1], dh});
}

Var merge_heads(const Var& x, Index batch, int heads) {
  const Shape s = x.shape();  // [B * H, T, dh]
  const Var h = diffcore::permute(diffcore::reshape(x, {batch, heads, s[1], s[2]}), {0, 2, 1, 3});
  return diffcore::reshape(h, {batch, s[1], heads * s[2]});
}

}  // namespace

Var attention(const Bindings& p, const std::string& name, const Var& q_in, const Var& kv_in,
              const std::vector<Index>& key_lengths, int heads) {
  const Index batch = q_in.shape()[0];
  const Index d = q_in.shape()[2];
  const Var q = split_heads(linear(p, name + ".q", q_in), heads);
  const Var k = split_heads(linear(p, name + ".k", kv_in), heads);
  const Var v = split_heads(linear(p, name + ".v", kv_in), heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(d / heads));
  const Var scores = diffcore::scale(diffcore::matmul(q, diffcore::transpose(k)), inv);
  std::vector<Index> lens;
  lens.reserve(batch * heads);
  for (Index b = 0; b < batch; ++b) lens.insert(lens.end(), heads, key_lengths[b]);
  const Var weights = diffcore::masked_softmax(scores, lens);
  return linear(p, name + ".o", merge_heads(diffcore::matmul(weights, v), batch, heads));
}

Var feed_forward(const Bindings& p, const std::string& name, const Var& x) {
  return linear(p, name + ".fc2", diffcore::gelu(linear(p, name + ".fc1", x)));
}

void init_attention(Init& init, const std::string& name, Index d) {
  for (const char* part : {".q", ".k", ".v", ".o"}) init.linear(name + part, d, d);
}

void init_feed_forward(Init& init, const std::string& name, Index d) {
  init.linear(name + ".fc1", d, 2 * d);
  init.linear(name + ".fc2", 2 * d, d);
}

}  // namespace tshamo::denoisers::detail
