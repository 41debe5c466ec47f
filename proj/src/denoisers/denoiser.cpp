#include "layers.hpp"

#include <algorithm>
#include <cmath>

namespace tshamo::denoisers {

using detail::Index;

std::string to_string(Backbone b) { return b == Backbone::transformer_encdec ? "transformer_encdec" : "conv_unet"; }
std::string to_string(Role r) { return r == Role::student ? "student" : "teacher"; }

std::string to_string(AuxKind k) {
  switch (k) {
    case AuxKind::mano_params: return "mano_params";
    case AuxKind::joints_3d: return "joints_3d";
    case AuxKind::joints_2d: return "joints_2d";
    case AuxKind::hand_masks: return "hand_masks";
    case AuxKind::mano_plus_contact: return "mano_plus_contact";
  }
  throw std::invalid_argument("aux kind: invalid value");
}

Backbone parse_backbone(const std::string& name) {
  if (name == "transformer_encdec") return Backbone::transformer_encdec;
  if (name == "conv_unet") return Backbone::conv_unet;
  throw std::invalid_argument("unknown backbone '" + name + "' (expected transformer_encdec or conv_unet)");
}

AuxKind parse_aux_kind(const std::string& name) {
  for (AuxKind k : kAllAuxKinds) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown auxiliary condition kind '" + name + "'");
}

int aux_width(AuxKind kind) {
  switch (kind) {
    case AuxKind::mano_params: return 2 * motion::kManoWidth;
    case AuxKind::joints_3d: return 2 * 3 * motion::kJoints;
    case AuxKind::joints_2d: return 2 * 2 * motion::kJoints;
    case AuxKind::hand_masks: return motion::kMaskGrid * motion::kMaskGrid;
    case AuxKind::mano_plus_contact: return 2 * (motion::kManoWidth + motion::kContactWidth);
  }
  throw std::invalid_argument("aux kind: invalid value");
}

std::array<int, kAuxFrames> percentile_positions(int length) {
  if (length < 1) throw std::invalid_argument("percentile_positions: length must be positive");
  std::array<int, kAuxFrames> out{};
  for (int i = 0; i < kAuxFrames; ++i) out[i] = static_cast<int>(std::lround(0.25 * i * (length - 1)));
  return out;
}

AuxiliaryCondition encode_auxiliary(const motion::MotionSequence& seq, const motion::Camera& camera, AuxKind kind,
                                    const motion::HandSkeleton& skeleton) {
  AuxiliaryCondition aux;
  aux.kind = kind;
  aux.positions = percentile_positions(seq.length);
  const int width = aux_width(kind);
  aux.frames = motion::RowMatrix::Zero(kAuxFrames, width);
  for (int k = 0; k < kAuxFrames; ++k) {
    const auto row = seq.frames.row(aux.positions[k]);
    auto out = aux.frames.row(k);
    const motion::HandFrame frame = seq.frame(aux.positions[k]);
    const motion::Hand* hands[2] = {&frame.left, &frame.right};
    const int offsets[2] = {motion::kLeftOffset, motion::kRightOffset};
    switch (kind) {
      case AuxKind::mano_params:
        for (int h = 0; h < 2; ++h) {
          out.segment(h * motion::kManoWidth, motion::kManoWidth) =
              row.segment(offsets[h] + motion::kManoSlot, motion::kManoWidth);
        }
        break;
      case AuxKind::mano_plus_contact: {
        const int w = motion::kManoWidth + motion::kContactWidth;
        for (int h = 0; h < 2; ++h) out.segment(h * w, w) = row.segment(offsets[h] + motion::kManoSlot, w);
        break;
      }
      case AuxKind::joints_3d:
        for (int h = 0; h < 2; ++h) {
          if (!hands[h]->present) continue;
          const motion::Joints j = motion::forward_kinematics(hands[h]->mano, skeleton);
          out.segment(h * 3 * motion::kJoints, 3 * motion::kJoints) =
              Eigen::Map<const Eigen::RowVectorXd>(j.data(), 3 * motion::kJoints);
        }
        break;
      case AuxKind::joints_2d:
        for (int h = 0; h < 2; ++h) {
          if (!hands[h]->present) continue;
          const motion::Joints2d j = motion::project_2d(motion::forward_kinematics(hands[h]->mano, skeleton), camera);
          out.segment(h * 2 * motion::kJoints, 2 * motion::kJoints) =
              Eigen::Map<const Eigen::RowVectorXd>(j.data(), 2 * motion::kJoints);
        }
        break;
      case AuxKind::hand_masks: {
        motion::MaskGrid grid = motion::MaskGrid::Zero();
        for (int h = 0; h < 2; ++h) {
          if (!hands[h]->present) continue;
          const motion::Joints2d j = motion::project_2d(motion::forward_kinematics(hands[h]->mano, skeleton), camera);
          grid = grid.cwiseMax(motion::rasterize_mask(j, camera.width, camera.height));
        }
        out = grid.transpose();
        break;
      }
    }
  }
  return aux;
}

Eigen::VectorXd embed_timestep(int t, int d_model) {
  if (t < 0) throw std::invalid_argument("embed_timestep: negative step");
  if (d_model < 1) throw std::invalid_argument("embed_timestep: d_model must be positive");
  Eigen::VectorXd e(d_model);
  for (int i = 0; i < d_model; ++i) {
    const double freq = std::pow(10000.0, -2.0 * (i / 2) / d_model);
    e[i] = i % 2 == 0 ? std::sin(t * freq) : std::cos(t * freq);
  }
  return e;
}

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("denoiser config: " + what); };
  if (d_model < 1 || num_heads < 1) fail("d_model and num_heads must be positive");
  if (d_model % num_heads != 0) fail("d_model must be divisible by num_heads");
  if (num_layers < 1) fail("num_layers must be positive");
  if (max_len < 1 || max_len > motion::kMaxFrames) fail("max_len must lie in [1, 64]");
  if (backbone == Backbone::conv_unet && max_len % 4 != 0) fail("conv_unet needs max_len divisible by 4");
  if (num_labels < 1) fail("num_labels must be positive");
  if (role == Role::student && aux_kind) fail("student configs carry no aux_kind");
  if (role == Role::teacher && !aux_kind) fail("teacher configs need an aux_kind");
}

nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"backbone", to_string(c.backbone)},
          {"d_model", c.d_model},
          {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},
          {"max_len", c.max_len},
          {"role", to_string(c.role)},
          {"aux_kind", c.aux_kind ? nlohmann::json(to_string(*c.aux_kind)) : nlohmann::json(nullptr)},
          {"num_labels", c.num_labels}};
}

DenoiserConfig config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.backbone = parse_backbone(j.value("backbone", to_string(c.backbone)));
  c.d_model = j.value("d_model", c.d_model);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.max_len = j.value("max_len", c.max_len);
  const std::string role = j.value("role", std::string("student"));
  if (role != "student" && role != "teacher") throw std::invalid_argument("unknown role '" + role + "'");
  c.role = role == "student" ? Role::student : Role::teacher;
  if (j.contains("aux_kind") && !j.at("aux_kind").is_null()) c.aux_kind = parse_aux_kind(j.at("aux_kind"));
  c.num_labels = j.value("num_labels", c.num_labels);
  c.validate();
  return c;
}

Denoiser::Denoiser(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  impl_ = config_.backbone == Backbone::transformer_encdec ? detail::make_transformer() : detail::make_unet();
  Rng rng(seed);
  detail::Init init(params_, rng);
  const Index d = config_.d_model;
  init.normal("text.table", {config_.num_labels + 1, d}, 1.0);
  init.linear("time.fc1", d, d);
  init.linear("time.fc2", d, d);
  if (config_.role == Role::teacher) {
    const Index w = aux_width(*config_.aux_kind), e = impl_->aux_embed_width(config_);
    init.linear("aux.proj", w, e);
    init.normal("aux.null", {kAuxFrames, e}, 1.0);
    buffers_["aux.mean"] = Tensor({w});
    Tensor ones({w});
    ones.data().setOnes();
    buffers_["aux.std"] = ones;
  }
  impl_->init(init, config_);
}

void Denoiser::set_aux_stats(const Eigen::VectorXd& mean, const Eigen::VectorXd& stddev) {
  if (config_.role != Role::teacher) throw std::logic_error("set_aux_stats: only teachers take auxiliary input");
  const Index w = aux_width(*config_.aux_kind);
  if (mean.size() != w || stddev.size() != w) throw std::invalid_argument("set_aux_stats: wrong width");
  if ((stddev.array() <= 0.0).any()) throw std::invalid_argument("set_aux_stats: spread must be positive");
  buffers_["aux.mean"] = Tensor({w}, mean);
  buffers_["aux.std"] = Tensor({w}, stddev);
}

void Denoiser::check_batch(const Var& x_t, const Conditioning& cond) const {
  const std::size_t B = cond.batch();
  if (B == 0) throw std::invalid_argument("denoiser: empty batch");
  if (cond.timesteps.size() != B || cond.lengths.size() != B) {
    throw std::invalid_argument("denoiser: timesteps, labels and lengths must have equal sizes");
  }
  const diffcore::Shape want{static_cast<Index>(B), config_.max_len, motion::kFrameWidth};
  if (x_t.shape() != want) {
    throw diffcore::ShapeError("denoiser: x_t has shape " + diffcore::to_string(x_t.shape()) + ", expected " +
                               diffcore::to_string(want));
  }
  for (std::size_t b = 0; b < B; ++b) {
    if (cond.lengths[b] < 1 || cond.lengths[b] > config_.max_len) throw std::invalid_argument("denoiser: bad length");
    if (cond.timesteps[b] < 0) throw std::invalid_argument("denoiser: negative timestep");
    if (cond.labels[b] < kNullLabel || cond.labels[b] >= config_.num_labels) {
      throw std::invalid_argument("denoiser: label " + std::to_string(cond.labels[b]) + " out of range");
    }
  }
}

namespace {

Var condition_vector(Tape& tape, const Bindings& p, const DenoiserConfig& cfg, const Conditioning& cond) {
  const Index B = static_cast<Index>(cond.batch()), d = cfg.d_model;
  std::vector<Index> rows(B);
  Tensor temb({B, d});
  for (Index b = 0; b < B; ++b) {
    rows[b] = cond.labels[b] == kNullLabel ? cfg.num_labels : cond.labels[b];
    temb.matrix().row(b) = embed_timestep(cond.timesteps[b], d).transpose();
  }
  const Var text = diffcore::embedding(detail::param(p, "text.table"), rows);
  const Var time = detail::linear(p, "time.fc2", diffcore::gelu(detail::linear(p, "time.fc1", tape.constant(temb))));
  return diffcore::add(text, time);
}

Var aux_tokens(Tape& tape, const Bindings& p, const DenoiserConfig& cfg, const ParameterSet& buffers,
               const AuxBatch& aux, Index width) {
  const Index B = static_cast<Index>(aux.size());
  const AuxKind kind = *cfg.aux_kind;
  const Index w = aux_width(kind);
  const Eigen::VectorXd& mean = buffers.at("aux.mean").data();
  const Eigen::VectorXd& sd = buffers.at("aux.std").data();
  Tensor raw({B * kAuxFrames, w});
  Tensor keep({B, kAuxFrames, width});
  bool any = false, all = true;
  for (Index b = 0; b < B; ++b) {
    if (!aux[b]) {
      all = false;
      continue;
    }
    if (aux[b]->kind != kind) {
      throw std::invalid_argument("teacher_forward: auxiliary kind " + to_string(aux[b]->kind) +
                                  " does not match the model's " + to_string(kind));
    }
    if (aux[b]->frames.rows() != kAuxFrames || aux[b]->frames.cols() != w) {
      throw std::invalid_argument("teacher_forward: auxiliary frames must be 5 x " + std::to_string(w));
    }
    any = true;
    for (int k = 0; k < kAuxFrames; ++k) {
      raw.matrix().row(b * kAuxFrames + k) =
          ((aux[b]->frames.row(k).transpose() - mean).cwiseQuotient(sd)).transpose();
    }
    keep.matrix(B, kAuxFrames * width).row(b).setOnes();
  }
  const Var null_tokens =
      diffcore::repeat(diffcore::reshape(detail::param(p, "aux.null"), {1, kAuxFrames, width}), 0, B);
  if (!any) return null_tokens;
  const Var proj = diffcore::reshape(detail::linear(p, "aux.proj", tape.constant(raw)), {B, kAuxFrames, width});
  if (all) return proj;
  Tensor drop = keep;
  drop.data() = 1.0 - keep.data().array();
  return diffcore::add(diffcore::multiply(proj, tape.constant(keep)),
                       diffcore::multiply(null_tokens, tape.constant(drop)));
}

}  // namespace

Var Denoiser::student_forward(Tape& tape, const Bindings& params, const Var& x_t, const Conditioning& cond) const {
  if (config_.role != Role::student) throw std::logic_error("student_forward: model role is teacher");
  return forward(tape, params, x_t, cond, {});
}

Var Denoiser::teacher_forward(Tape& tape, const Bindings& params, const Var& x_t, const Conditioning& cond,
                              const AuxBatch& aux) const {
  if (config_.role != Role::teacher) throw std::logic_error("teacher_forward: model role is student");
  if (aux.size() != cond.batch()) throw std::invalid_argument("teacher_forward: one auxiliary entry per sequence");
  return forward(tape, params, x_t, cond, aux);
}

Var Denoiser::forward(Tape& tape, const Bindings& params, const Var& x_t, const Conditioning& cond,
                      const AuxBatch& aux) const {
  check_batch(x_t, cond);
  const bool teacher = config_.role == Role::teacher;
  if (!teacher && !aux.empty()) throw std::logic_error("student models take no auxiliary input");
  if (teacher && aux.size() != cond.batch()) {
    throw std::invalid_argument("teacher_forward: one auxiliary entry per sequence");
  }
  const Index B = static_cast<Index>(cond.batch()), N = config_.max_len, W = motion::kFrameWidth;
  const Index longest = *std::max_element(cond.lengths.begin(), cond.lengths.end());
  const Index T = impl_->frames_for(longest, config_);

  Tensor mask({B, T, W});
  for (Index b = 0; b < B; ++b) mask.matrix(B, T * W).row(b).head(cond.lengths[b] * W).setOnes();
  const Var mask_var = tape.constant(mask);

  detail::Pass pass{tape, params, config_, B, T, {}, {}, {}, std::nullopt};
  pass.lengths.assign(cond.lengths.begin(), cond.lengths.end());
  pass.x = diffcore::multiply(T == N ? x_t : diffcore::slice(x_t, 1, 0, T), mask_var);
  pass.cond = condition_vector(tape, params, config_, cond);
  if (teacher) pass.aux = aux_tokens(tape, params, config_, buffers_, aux, impl_->aux_embed_width(config_));

  Var out = diffcore::multiply(impl_->run(pass), mask_var);
  if (T < N) out = diffcore::concat({out, tape.constant(Tensor({B, N - T, W}))}, 1);
  return out;
}

Tensor Denoiser::predict(const Tensor& x_t, const Conditioning& cond, const AuxBatch& aux) const {
  Tape tape;
  const Bindings bound = diffcore::bind(tape, params_, false);
  return forward(tape, bound, tape.constant(x_t), cond, aux).value();
}

DroppedCondition cfg_dropout(int label, const AuxiliaryCondition* aux, double p_uncond, Rng& rng) {
  if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) throw std::invalid_argument("cfg_dropout: p_uncond must lie in [0, 1]");
  if (rng.uniform() < p_uncond) return {kNullLabel, nullptr};
  return {label, aux};
}

}  // namespace tshamo::denoisers
