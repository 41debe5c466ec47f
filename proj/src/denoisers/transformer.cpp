// Transformer backbone. The student prepends the condition token to the
// frame tokens of a pre-norm encoder. The teacher encodes [cond; 5 aux
// tokens] and a decoder over the frames cross-attends to that memory.
#include "layers.hpp"

namespace tshamo::denoisers::detail {

namespace {

using diffcore::add;
using diffcore::concat;
using diffcore::reshape;
using diffcore::slice;

std::string layer_name(const char* stack, int i) { return std::string(stack) + "." + std::to_string(i); }

class Transformer final : public BackboneImpl {
 public:
  void init(Init& init, const DenoiserConfig& cfg) const override {
    const Index d = cfg.d_model;
    init.linear("in", motion::kFrameWidth, d);
    init.linear("out", d, motion::kFrameWidth);
    init.norm("out_norm", d);
    init.normal("frame_pos", {cfg.max_len + 1, d}, 0.1);
    for (int i = 0; i < cfg.num_layers; ++i) {
      const std::string n = layer_name(cfg.role == Role::student ? "enc" : "dec", i);
      init.norm(n + ".ln1", d);
      init_attention(init, n + ".self", d);
      if (cfg.role == Role::teacher) {
        init.norm(n + ".ln_cross", d);
        init_attention(init, n + ".cross", d);
      }
      init.norm(n + ".ln2", d);
      init_feed_forward(init, n + ".ff", d);
    }
    if (cfg.role == Role::teacher) {
      init.normal("memory_pos", {1 + kAuxFrames, d}, 0.1);
      for (int i = 0; i < cfg.num_layers; ++i) {
        const std::string n = layer_name("mem", i);
        init.norm(n + ".ln1", d);
        init_attention(init, n + ".self", d);
        init.norm(n + ".ln2", d);
        init_feed_forward(init, n + ".ff", d);
      }
      init.norm("mem_norm", d);
    }
  }

  Index frames_for(Index longest, const DenoiserConfig&) const override { return longest; }
  Index aux_embed_width(const DenoiserConfig& cfg) const override { return cfg.d_model; }

  Var run(Pass& pass) const override {
    const auto& p = pass.p;
    const auto& cfg = pass.cfg;
    const Index B = pass.batch, T = pass.frames, d = cfg.d_model;
    const Var& pos = param(p, "frame_pos");
    Var frames = add_positions(linear(p, "in", pass.x), slice(pos, 0, 1, T + 1));

    if (cfg.role == Role::student) {
      const Var cond = add(pass.cond, reshape(slice(pos, 0, 0, 1), {d}));
      Var h = concat({reshape(cond, {B, 1, d}), frames}, 1);
      std::vector<Index> keys(pass.lengths);
      for (auto& k : keys) k += 1;
      for (int i = 0; i < cfg.num_layers; ++i) h = encoder_layer(p, layer_name("enc", i), h, keys, cfg.num_heads);
      return linear(p, "out", norm(p, "out_norm", slice(h, 1, 1, T + 1)));
    }

    Var memory = add_positions(concat({reshape(pass.cond, {B, 1, d}), *pass.aux}, 1), param(p, "memory_pos"));
    const std::vector<Index> all(B, 1 + kAuxFrames);
    for (int i = 0; i < cfg.num_layers; ++i) memory = encoder_layer(p, layer_name("mem", i), memory, all, cfg.num_heads);
    memory = norm(p, "mem_norm", memory);

    Var h = frames;
    for (int i = 0; i < cfg.num_layers; ++i) {
      const std::string n = layer_name("dec", i);
      const Var a = norm(p, n + ".ln1", h);
      h = add(h, attention(p, n + ".self", a, a, pass.lengths, cfg.num_heads));
      h = add(h, attention(p, n + ".cross", norm(p, n + ".ln_cross", h), memory, all, cfg.num_heads));
      h = add(h, feed_forward(p, n + ".ff", norm(p, n + ".ln2", h)));
    }
    return linear(p, "out", norm(p, "out_norm", h));
  }

 private:
  static Var encoder_layer(const Bindings& p, const std::string& n, Var h, const std::vector<Index>& keys, int heads) {
    const Var a = norm(p, n + ".ln1", h);
    h = add(h, attention(p, n + ".self", a, a, keys, heads));
    return add(h, feed_forward(p, n + ".ff", norm(p, n + ".ln2", h)));
  }
};

}  // namespace

std::shared_ptr<const BackboneImpl> make_transformer() { return std::make_shared<Transformer>(); }

}  // namespace tshamo::denoisers::detail
