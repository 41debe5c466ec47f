// x0-predicting denoisers for the student (text only) and teacher (text plus
// auxiliary frames) roles, over a transformer or a 1-D conv U-Net backbone.
#ifndef TSHAMO_DENOISERS_HPP
#define TSHAMO_DENOISERS_HPP

#include "tshamo/diffcore.hpp"
#include "tshamo/motion.hpp"
#include "tshamo/random.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace tshamo::denoisers {

using diffcore::Bindings;
using diffcore::ParameterSet;
using diffcore::Tape;
using diffcore::Tensor;
using diffcore::Var;

enum class Backbone { transformer_encdec, conv_unet };
enum class Role { student, teacher };
enum class AuxKind { mano_params, joints_3d, joints_2d, hand_masks, mano_plus_contact };

inline constexpr int kAuxFrames = 5;
inline constexpr int kNullLabel = -1;
inline constexpr std::array<AuxKind, 5> kAllAuxKinds = {AuxKind::mano_params, AuxKind::joints_3d,
                                                         AuxKind::joints_2d, AuxKind::hand_masks,
                                                         AuxKind::mano_plus_contact};

std::string to_string(Backbone b);
std::string to_string(Role r);
std::string to_string(AuxKind k);
Backbone parse_backbone(const std::string& name);
AuxKind parse_aux_kind(const std::string& name);
// Raw feature width of one auxiliary frame (both hands).
int aux_width(AuxKind kind);

struct AuxiliaryCondition {
  AuxKind kind = AuxKind::mano_params;
  motion::RowMatrix frames;  // kAuxFrames x aux_width(kind)
  std::array<int, kAuxFrames> positions{};
};

// round(p * (length - 1)) for p in {0, .25, .5, .75, 1}.
std::array<int, kAuxFrames> percentile_positions(int length);

AuxiliaryCondition encode_auxiliary(const motion::MotionSequence& seq, const motion::Camera& camera, AuxKind kind,
                                    const motion::HandSkeleton& skeleton);

// Interleaved [sin(t w_0), cos(t w_0), sin(t w_1), ...] with w_i = 10000^(-2i/d).
Eigen::VectorXd embed_timestep(int t, int d_model);

struct DenoiserConfig {
  Backbone backbone = Backbone::transformer_encdec;
  int d_model = 128;
  int num_layers = 4;  // transformer depth (encoder and decoder each); unused by conv_unet
  int num_heads = 4;
  int max_len = motion::kMaxFrames;
  Role role = Role::student;
  std::optional<AuxKind> aux_kind;  // teacher only
  int num_labels = 6;

  void validate() const;
  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

nlohmann::json to_json(const DenoiserConfig& cfg);
DenoiserConfig config_from_json(const nlohmann::json& j);

// Per-sequence conditioning shared by both roles. labels[i] == kNullLabel
// selects the learned null row.
struct Conditioning {
  std::vector<int> timesteps;
  std::vector<int> labels;
  std::vector<int> lengths;

  std::size_t batch() const { return labels.size(); }
};

// Null entries select the learned null auxiliary tokens.
using AuxBatch = std::vector<const AuxiliaryCondition*>;

namespace detail {
class BackboneImpl;
}

class Denoiser {
 public:
  Denoiser(const DenoiserConfig& config, std::uint64_t seed);

  const DenoiserConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  // Non-trainable state: auxiliary feature mean and spread (teacher only).
  ParameterSet& buffers() { return buffers_; }
  const ParameterSet& buffers() const { return buffers_; }
  void set_aux_stats(const Eigen::VectorXd& mean, const Eigen::VectorXd& stddev);

  // x_t: [B, max_len, 166] -> x0_hat of the same shape. Rows at or beyond
  // each sequence's length are ignored on input and zero on output.
  Var student_forward(Tape& tape, const Bindings& params, const Var& x_t, const Conditioning& cond) const;
  Var teacher_forward(Tape& tape, const Bindings& params, const Var& x_t, const Conditioning& cond,
                      const AuxBatch& aux) const;
  // Dispatches on role; a student given any auxiliary entry is an error.
  Var forward(Tape& tape, const Bindings& params, const Var& x_t, const Conditioning& cond,
              const AuxBatch& aux = {}) const;
  // Gradient-free evaluation.
  Tensor predict(const Tensor& x_t, const Conditioning& cond, const AuxBatch& aux = {}) const;

 private:
  void check_batch(const Var& x_t, const Conditioning& cond) const;

  DenoiserConfig config_;
  ParameterSet params_;
  ParameterSet buffers_;
  std::shared_ptr<const detail::BackboneImpl> impl_;
};

// Replaces both conditions by null jointly with probability p_uncond.
struct DroppedCondition {
  int label;
  const AuxiliaryCondition* aux;
};
DroppedCondition cfg_dropout(int label, const AuxiliaryCondition* aux, double p_uncond, Rng& rng);

}  // namespace tshamo::denoisers

#endif
