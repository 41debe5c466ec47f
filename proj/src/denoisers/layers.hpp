// Building blocks shared by the denoiser backbones.
#ifndef TSHAMO_DENOISERS_LAYERS_HPP
#define TSHAMO_DENOISERS_LAYERS_HPP

#include "tshamo/denoisers.hpp"

namespace tshamo::denoisers::detail {

using diffcore::Index;
using diffcore::Shape;

class Init {
 public:
  Init(ParameterSet& params, Rng& rng) : params_(params), rng_(rng) {}

  void normal(const std::string& name, Shape shape, double stddev);
  void constant(const std::string& name, Shape shape, double value);
  void linear(const std::string& name, Index in, Index out);
  void norm(const std::string& name, Index dim);
  void conv(const std::string& name, Index kernel, Index in, Index out);

 private:
  ParameterSet& params_;
  Rng& rng_;
};

const Var& param(const Bindings& p, const std::string& name);
Var linear(const Bindings& p, const std::string& name, const Var& x);
Var norm(const Bindings& p, const std::string& name, const Var& x);
Var conv(const Bindings& p, const std::string& name, const Var& x);
// Adds a [T, d] table to every batch entry of x [B, T, d].
Var add_positions(const Var& x, const Var& table);
// Broadcasts v [B, C] along a new length axis: [B, T, C].
Var broadcast_time(const Var& v, Index length);

// Multi-head attention of q_in [B, Tq, d] over kv_in [B, Tk, d]; keys at or
// beyond key_lengths[b] are masked.
Var attention(const Bindings& p, const std::string& name, const Var& q_in, const Var& kv_in,
              const std::vector<Index>& key_lengths, int heads);
Var feed_forward(const Bindings& p, const std::string& name, const Var& x);

void init_attention(Init& init, const std::string& name, Index d);
void init_feed_forward(Init& init, const std::string& name, Index d);

// Everything a backbone needs for one forward pass.
struct Pass {
  Tape& tape;
  const Bindings& p;
  const DenoiserConfig& cfg;
  Index batch;
  Index frames;                 // trimmed length T
  std::vector<Index> lengths;   // per sequence
  Var x;                        // [B, T, 166], padded rows zero
  Var cond;                     // [B, d]
  std::optional<Var> aux;       // [B, 5, aux_embed_width] (teacher)
};

class BackboneImpl {
 public:
  virtual ~BackboneImpl() = default;
  virtual void init(Init& init, const DenoiserConfig& cfg) const = 0;
  // Trimmed length covering every real frame.
  virtual Index frames_for(Index longest, const DenoiserConfig& cfg) const = 0;
  virtual Index aux_embed_width(const DenoiserConfig& cfg) const = 0;
  // Returns [B, T, 166]; rows beyond a sequence's length are masked by the caller.
  virtual Var run(Pass& pass) const = 0;
};

std::shared_ptr<const BackboneImpl> make_transformer();
std::shared_ptr<const BackboneImpl> make_unet();

}  // namespace tshamo::denoisers::detail

#endif
