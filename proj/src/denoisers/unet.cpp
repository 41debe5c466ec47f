// Channels-last 1-D U-Net with three resolution levels. The condition vector
// modulates every residual block; teacher auxiliary frames enter as extra
// input channels broadcast over time. Padded positions are zeroed before
// every convolution; real outputs do not depend on the padding.
#include "layers.hpp"

#include <algorithm>
#include <cmath>

namespace tshamo::denoisers::detail {

namespace {

using diffcore::add;
using diffcore::add_scalar;
using diffcore::concat;
using diffcore::gelu;
using diffcore::multiply;
using diffcore::reshape;
using diffcore::slice;

constexpr Index kKernel = 3;

Index aux_group(const DenoiserConfig& cfg) { return std::max(2, cfg.d_model / 4); }

class UNet final : public BackboneImpl {
 public:
  void init(Init& init, const DenoiserConfig& cfg) const override {
    const Index c0 = cfg.d_model, c1 = 2 * cfg.d_model;
    const Index in = motion::kFrameWidth + (cfg.role == Role::teacher ? kAuxFrames * aux_group(cfg) : 0);
    init.conv("in", kKernel, in, c0);
    init_block(init, cfg, "enc0", c0, c0);
    init_block(init, cfg, "enc1", c0, c1);
    init_block(init, cfg, "mid", c1, c1);
    init_block(init, cfg, "dec1", 2 * c1, c1);
    init_block(init, cfg, "dec0", c1 + c0, c0);
    init.norm("out_norm", c0);
    init.linear("out", c0, motion::kFrameWidth);
  }

  Index frames_for(Index longest, const DenoiserConfig& cfg) const override {
    return std::min<Index>(cfg.max_len, (longest + 3) / 4 * 4);
  }
  Index aux_embed_width(const DenoiserConfig& cfg) const override { return aux_group(cfg); }

  Var run(Pass& pass) const override {
    const Index c0 = pass.cfg.d_model, c1 = 2 * pass.cfg.d_model;
    Var x = pass.x;
    if (pass.aux) {
      const Var flat = reshape(*pass.aux, {pass.batch, kAuxFrames * aux_group(pass.cfg)});
      x = concat({x, broadcast_time(flat, pass.frames)}, 2);
    }
    const Var h = conv(pass.p, "in", masked(pass, x, 0));
    const Var e0 = block(pass, "enc0", h, 0, c0);
    const Var e1 = block(pass, "enc1", diffcore::avg_pool2(e0), 1, c1);
    const Var m = block(pass, "mid", diffcore::avg_pool2(e1), 2, c1);
    const Var d1 = block(pass, "dec1", concat({diffcore::upsample2(m), e1}, 2), 1, c1);
    const Var d0 = block(pass, "dec0", concat({diffcore::upsample2(d1), e0}, 2), 0, c0);
    return linear(pass.p, "out", norm(pass.p, "out_norm", d0));
  }

 private:
  static void init_block(Init& init, const DenoiserConfig& cfg, const std::string& n, Index in, Index out) {
    init.norm(n + ".ln1", in);
    init.conv(n + ".conv1", kKernel, in, out);
    init.norm(n + ".ln2", out);
    init.linear(n + ".film", cfg.d_model, 2 * out);
    init.conv(n + ".conv2", kKernel, out, out);
    if (in != out) init.normal(n + ".skip.w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  }

  // Zeroes positions at or beyond ceil(length / 2^level) of x [B, T_level, C].
  static Var masked(Pass& pass, const Var& x, int level) {
    const Shape s = x.shape();
    Tensor mask(s);
    auto rows = mask.matrix(s[0], s[1] * s[2]);
    for (Index b = 0; b < s[0]; ++b) {
      const Index valid = std::min(s[1], (pass.lengths[b] + (Index{1} << level) - 1) >> level);
      rows.row(b).head(valid * s[2]).setOnes();
    }
    return multiply(x, pass.tape.constant(std::move(mask)));
  }

  static Var block(Pass& pass, const std::string& n, const Var& x, int level, Index out) {
    const auto& p = pass.p;
    const Index T = x.shape()[1];
    Var h = conv(p, n + ".conv1", masked(pass, gelu(norm(p, n + ".ln1", x)), level));
    const Var film = linear(p, n + ".film", pass.cond);
    const Var gain = broadcast_time(add_scalar(slice(film, 1, 0, out), 1.0), T);
    const Var shift = broadcast_time(slice(film, 1, out, 2 * out), T);
    h = add(multiply(norm(p, n + ".ln2", h), gain), shift);
    h = conv(p, n + ".conv2", masked(pass, gelu(h), level));
    const Var skip = x.shape()[2] == out ? x : diffcore::matmul(x, param(p, n + ".skip.w"));
    return masked(pass, add(h, skip), level);
  }
};

}  // namespace

std::shared_ptr<const BackboneImpl> make_unet() { return std::make_shared<UNet>(); }

}  // namespace tshamo::denoisers::detail
