#include "tshamo/cotrain.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace tshamo::cotrain {

using diffcore::Index;
using motion::kFrameWidth;

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("lambda must be finite and >= 0");
  if (!(t_cycle >= 1.0) || !std::isfinite(t_cycle)) fail("t_cycle must be finite and >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive");
  if (epochs < 1) fail("epochs must be positive");
  if (batch_size < 1) fail("batch_size must be positive");
  if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) fail("p_uncond must lie in [0, 1]");
  if (diffusion_steps < 1) fail("diffusion_steps must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lambda", c.lambda},     {"t_cycle", c.t_cycle},   {"lr", c.lr},
          {"epochs", c.epochs},     {"batch_size", c.batch_size}, {"p_uncond", c.p_uncond},
          {"seed", c.seed},         {"diffusion_steps", c.diffusion_steps},
          {"schedule", diffusion::to_string(c.schedule)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.t_cycle = j.value("t_cycle", c.t_cycle);
  c.lr = j.value("lr", c.lr);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.p_uncond = j.value("p_uncond", c.p_uncond);
  c.seed = j.value("seed", c.seed);
  c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
  c.schedule = diffusion::parse_schedule_kind(j.value("schedule", diffusion::to_string(c.schedule)));
  c.validate();
  return c;
}

int timer_reset(double t_cycle, double u) {
  if (!(t_cycle >= 1.0)) throw std::invalid_argument("timer_reset: t_cycle must be >= 1");
  const double whole = std::floor(t_cycle);
  return static_cast<int>(whole) + (u < t_cycle - whole ? 1 : 0);
}

TeacherTimer::TeacherTimer(double t_cycle, Rng& rng) : t_cycle_(t_cycle), counter_(timer_reset(t_cycle, rng.uniform())) {}

bool TeacherTimer::tick(Rng& rng) {
  if (--counter_ > 0) return false;
  counter_ = timer_reset(t_cycle_, rng.uniform());
  return true;
}

double cosine_lr(long step, long total_steps, double lr_base) {
  if (total_steps < 1 || step < 0 || step > total_steps) throw std::invalid_argument("cosine_lr: step out of range");
  const double lr = lr_base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
  return std::max(lr, 0.0);
}

Var loss_to_gt(const Var& pred, const Var& x0, const Tensor& mask) { return diffcore::squared_error(pred, x0, mask); }

Var loss_s_to_t(const Var& student_pred, const Var& teacher_pred, const Tensor& mask) {
  if (teacher_pred.requires_grad()) throw std::logic_error("loss_s_to_t: teacher prediction must be detached");
  return diffcore::squared_error(student_pred, teacher_pred, mask);
}

std::vector<TrainingSample> prepare_samples(const datakit::Dataset& ds, const std::vector<std::uint32_t>& ids,
                                            std::optional<denoisers::AuxKind> aux_kind,
                                            const motion::HandSkeleton& skeleton) {
  std::vector<TrainingSample> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    const auto& rec = ds.record(id);
    TrainingSample s;
    s.x0 = motion::normalize(rec.motion, ds.manifest.stats).frames;
    s.label = rec.motion.label;
    s.length = rec.motion.length;
    if (aux_kind) s.aux = denoisers::encode_auxiliary(rec.motion, rec.camera, *aux_kind, skeleton);
    out.push_back(std::move(s));
  }
  return out;
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> aux_stats(const std::vector<TrainingSample>& samples) {
  Eigen::Index width = -1, count = 0;
  Eigen::VectorXd sum, sq;
  for (const auto& s : samples) {
    if (!s.aux) continue;
    if (width < 0) {
      width = s.aux->frames.cols();
      sum = sq = Eigen::VectorXd::Zero(width);
    }
    for (int k = 0; k < s.aux->frames.rows(); ++k) {
      sum += s.aux->frames.row(k).transpose();
      sq += s.aux->frames.row(k).transpose().cwiseAbs2();
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("aux_stats: no auxiliary features");
  const Eigen::VectorXd mean = sum / static_cast<double>(count);
  Eigen::VectorXd sd = (sq / static_cast<double>(count) - mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
  for (Eigen::Index d = 0; d < width; ++d) {
    if (sd[d] < 1e-8) sd[d] = 1.0;
  }
  return {mean, sd};
}

std::string csv_header() { return "epoch,loss_s_gt,loss_s_t,loss_t_gt,lr,teacher_updates,teacher_updates_total"; }

std::string csv_row(const EpochLog& e) {
  std::ostringstream os;
  os.precision(17);
  os << e.epoch << ',' << e.loss_s_gt << ',' << e.loss_s_t << ',' << e.loss_t_gt << ',' << e.lr << ','
     << e.teacher_updates << ',' << e.teacher_updates_total;
  return os.str();
}

Trainer::Trainer(const TrainConfig& config, Denoiser student, std::optional<Denoiser> teacher,
                 std::vector<TrainingSample> samples)
    : config_(config),
      student_(std::move(student)),
      teacher_(std::move(teacher)),
      samples_(std::move(samples)),
      data_rng_(Rng(config.seed).fork(1)),
      noise_rng_(Rng(config.seed).fork(2)),
      teacher_rng_(Rng(config.seed).fork(3)),
      timer_rng_(Rng(config.seed).fork(4)) {
  config_.validate();
  if (samples_.empty()) throw std::invalid_argument("trainer: no training samples");
  if (student_.config().role != denoisers::Role::student) throw std::invalid_argument("trainer: student has teacher role");
  const int N = student_.config().max_len;
  for (const auto& s : samples_) {
    if (s.x0.rows() < N || s.x0.cols() != kFrameWidth || s.length > N) {
      throw std::invalid_argument("trainer: sample does not fit the model's max_len");
    }
  }
  if (teacher_) {
    if (teacher_->config().role != denoisers::Role::teacher) throw std::invalid_argument("trainer: teacher has student role");
    if (teacher_->config().max_len != N) throw std::invalid_argument("trainer: student and teacher max_len differ");
    for (const auto& s : samples_) {
      if (!s.aux || s.aux->kind != *teacher_->config().aux_kind) {
        throw std::invalid_argument("trainer: samples lack auxiliary features of the teacher's kind");
      }
    }
    timer_.emplace(config_.t_cycle, timer_rng_);
  }
  schedule_ = diffusion::build_schedule(config_.diffusion_steps, config_.schedule);
}

long Trainer::steps_per_epoch() const {
  return static_cast<long>((samples_.size() + config_.batch_size - 1) / config_.batch_size);
}

void Trainer::begin_epoch() {
  order_.resize(samples_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[data_rng_.below(i)]);
  cursor_ = 0;
}

StepReport Trainer::step() {
  if (finished()) throw std::logic_error("trainer: training already finished");
  if (order_.empty() || cursor_ >= order_.size()) begin_epoch();

  const std::size_t end = std::min(order_.size(), cursor_ + config_.batch_size);
  const Index B = static_cast<Index>(end - cursor_);
  const Index N = student_.config().max_len, W = kFrameWidth;
  Tensor x0({B, N, W}), xt({B, N, W}), mask({B, N, W});
  denoisers::Conditioning cs, ct;
  denoisers::AuxBatch aux;
  for (Index b = 0; b < B; ++b) {
    const TrainingSample& s = samples_[order_[cursor_ + b]];
    const int t = 1 + static_cast<int>(noise_rng_.below(config_.diffusion_steps));
    const auto ds = denoisers::cfg_dropout(s.label, nullptr, config_.p_uncond, noise_rng_);
    cs.timesteps.push_back(t);
    cs.labels.push_back(ds.label);
    cs.lengths.push_back(s.length);
    const Index n = s.length * W;
    auto x0_row = x0.matrix(B, N * W).row(b);
    auto xt_row = xt.matrix(B, N * W).row(b);
    x0_row.head(n) = Eigen::Map<const Eigen::RowVectorXd>(s.x0.data(), n);
    Eigen::RowVectorXd eps(n);
    for (Index i = 0; i < n; ++i) eps[i] = noise_rng_.normal();
    xt_row.head(n) = diffusion::q_sample(x0_row.head(n), t, eps, schedule_);
    mask.matrix(B, N * W).row(b).head(n).setOnes();
    if (teacher_) {
      const auto dt = denoisers::cfg_dropout(s.label, &*s.aux, config_.p_uncond, teacher_rng_);
      ct.timesteps.push_back(t);
      ct.labels.push_back(dt.label);
      ct.lengths.push_back(s.length);
      aux.push_back(dt.aux);
    }
  }
  cursor_ = end;

  StepReport report;
  report.lr = cosine_lr(step_, total_steps(), config_.lr);
  diffcore::Tape tape;
  const Var x0v = tape.constant(x0);
  const Var xtv = tape.constant(xt);
  const auto sp = diffcore::bind(tape, student_.params(), true);
  const Var pred_s = student_.student_forward(tape, sp, xtv, cs);
  const Var l_s_gt = loss_to_gt(pred_s, x0v, mask);
  Var total = l_s_gt;
  report.loss_s_gt = l_s_gt.value().item();
  report.loss_s_t = report.loss_t_gt = std::numeric_limits<double>::quiet_NaN();

  diffcore::Bindings tp;
  if (teacher_) {
    report.teacher_updated = timer_->tick(timer_rng_);
    tp = diffcore::bind(tape, teacher_->params(), report.teacher_updated);
    const Var pred_t = teacher_->teacher_forward(tape, tp, xtv, ct, aux);
    const Var l_t_gt = loss_to_gt(pred_t, x0v, mask);
    const Var l_s_t = loss_s_to_t(pred_s, tape.constant(pred_t.value()), mask);
    report.loss_t_gt = l_t_gt.value().item();
    report.loss_s_t = l_s_t.value().item();
    if (config_.lambda > 0.0) total = diffcore::add(total, diffcore::scale(l_s_t, config_.lambda));
    if (report.teacher_updated) total = diffcore::add(total, l_t_gt);
  }
  const auto grads = tape.backward(total);
  diffcore::adam_step(student_.params(), diffcore::collect(grads, sp), student_adam_, report.lr);
  if (report.teacher_updated) {
    diffcore::adam_step(teacher_->params(), diffcore::collect(grads, tp), teacher_adam_, report.lr);
    ++teacher_updates_total_;
    ++running_.teacher_updates;
  }
  ++step_;

  running_.loss_s_gt += report.loss_s_gt;
  running_.loss_s_t += report.loss_s_t;
  running_.loss_t_gt += report.loss_t_gt;
  running_.lr = report.lr;
  ++running_steps_;
  if (cursor_ >= order_.size()) {
    EpochLog e = running_;
    e.epoch = static_cast<int>(history_.size()) + 1;
    e.loss_s_gt /= running_steps_;
    e.loss_s_t /= running_steps_;
    e.loss_t_gt /= running_steps_;
    e.teacher_updates_total = teacher_updates_total_;
    history_.push_back(e);
    running_ = EpochLog{};
    running_steps_ = 0;
  }
  return report;
}

void Trainer::run(const std::function<void(const EpochLog&)>& on_epoch) {
  while (!finished()) {
    const std::size_t before = history_.size();
    step();
    if (on_epoch && history_.size() > before) on_epoch(history_.back());
  }
}

namespace {

nlohmann::json number(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }
double number(const nlohmann::json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},        {"loss_s_gt", number(e.loss_s_gt)}, {"loss_s_t", number(e.loss_s_t)},
          {"loss_t_gt", number(e.loss_t_gt)}, {"lr", e.lr}, {"teacher_updates", e.teacher_updates},
          {"teacher_updates_total", e.teacher_updates_total}};
}

EpochLog epoch_from_json(const nlohmann::json& j) {
  EpochLog e;
  e.epoch = j.at("epoch");
  e.loss_s_gt = number(j.at("loss_s_gt"));
  e.loss_s_t = number(j.at("loss_s_t"));
  e.loss_t_gt = number(j.at("loss_t_gt"));
  e.lr = j.at("lr");
  e.teacher_updates = j.at("teacher_updates");
  e.teacher_updates_total = j.at("teacher_updates_total");
  return e;
}

void store_adam(datakit::Checkpoint& ck, const std::string& prefix, const diffcore::AdamState& s) {
  for (const auto& [name, m] : s.m) ck.tensors[prefix + "m/" + name] = Tensor({m.size()}, m);
  for (const auto& [name, v] : s.v) ck.tensors[prefix + "v/" + name] = Tensor({v.size()}, v);
  ck.meta[prefix + "step"] = s.step;
}

void restore_adam(const datakit::Checkpoint& ck, const std::string& prefix, const diffcore::ParameterSet& params,
                  diffcore::AdamState& s) {
  s = diffcore::AdamState{};
  s.step = ck.meta.at(prefix + "step").get<long>();
  for (const auto& [name, t] : params) {
    const auto m = ck.tensors.find(prefix + "m/" + name);
    const auto v = ck.tensors.find(prefix + "v/" + name);
    if (m == ck.tensors.end() || v == ck.tensors.end()) continue;
    if (m->second.size() != t.size() || v->second.size() != t.size()) {
      throw std::runtime_error("checkpoint: optimizer state for '" + name + "' has the wrong size");
    }
    s.m[name] = m->second.data();
    s.v[name] = v->second.data();
  }
}

}  // namespace

datakit::Checkpoint Trainer::checkpoint() const {
  datakit::Checkpoint ck;
  auto& m = ck.meta;
  m["kind"] = "training";
  m["train_config"] = to_json(config_);
  m["student_config"] = denoisers::to_json(student_.config());
  m["teacher_config"] = teacher_ ? denoisers::to_json(teacher_->config()) : nlohmann::json(nullptr);
  m["step"] = step_;
  m["cursor"] = cursor_;
  m["order"] = order_;
  m["teacher_updates_total"] = teacher_updates_total_;
  m["running"] = to_json(running_);
  m["running_steps"] = running_steps_;
  m["timer_counter"] = timer_ ? timer_->counter() : 0;
  m["rng"] = {data_rng_.state(), noise_rng_.state(), teacher_rng_.state(), timer_rng_.state()};
  auto& hist = m["history"] = nlohmann::json::array();
  for (const auto& e : history_) hist.push_back(to_json(e));
  datakit::store_parameters(ck, "student/", student_.params());
  store_adam(ck, "adam.student/", student_adam_);
  if (teacher_) {
    datakit::store_parameters(ck, "teacher/", teacher_->params());
    datakit::store_parameters(ck, "teacher_buffers/", teacher_->buffers());
    store_adam(ck, "adam.teacher/", teacher_adam_);
  }
  return ck;
}

void Trainer::restore(const datakit::Checkpoint& ck) {
  const auto& m = ck.meta;
  if (m.value("kind", std::string()) != "training") throw std::runtime_error("checkpoint: not a training checkpoint");
  if (denoisers::config_from_json(m.at("student_config")) != student_.config()) {
    throw std::runtime_error("checkpoint: student config differs from the trainer's");
  }
  if (m.at("teacher_config").is_null() != !teacher_.has_value() ||
      (teacher_ && denoisers::config_from_json(m.at("teacher_config")) != teacher_->config())) {
    throw std::runtime_error("checkpoint: teacher config differs from the trainer's");
  }
  datakit::restore_parameters(ck, "student/", student_.params());
  restore_adam(ck, "adam.student/", student_.params(), student_adam_);
  if (teacher_) {
    datakit::restore_parameters(ck, "teacher/", teacher_->params());
    datakit::restore_parameters(ck, "teacher_buffers/", teacher_->buffers());
    restore_adam(ck, "adam.teacher/", teacher_->params(), teacher_adam_);
    timer_->set_counter(m.at("timer_counter"));
  }
  step_ = m.at("step");
  cursor_ = m.at("cursor");
  order_ = m.at("order").get<std::vector<std::size_t>>();
  teacher_updates_total_ = m.at("teacher_updates_total");
  running_ = epoch_from_json(m.at("running"));
  running_steps_ = m.at("running_steps");
  const auto rng = m.at("rng").get<std::vector<std::string>>();
  data_rng_.set_state(rng.at(0));
  noise_rng_.set_state(rng.at(1));
  teacher_rng_.set_state(rng.at(2));
  timer_rng_.set_state(rng.at(3));
  history_.clear();
  for (const auto& e : m.at("history")) history_.push_back(epoch_from_json(e));
}

datakit::Checkpoint student_checkpoint(const Denoiser& student, const motion::NormStats& stats) {
  datakit::Checkpoint ck;
  ck.meta["kind"] = "student";
  ck.meta["student_config"] = denoisers::to_json(student.config());
  ck.meta["norm_mean"] = std::vector<double>(stats.mean.data(), stats.mean.data() + stats.mean.size());
  ck.meta["norm_std"] = std::vector<double>(stats.std.data(), stats.std.data() + stats.std.size());
  datakit::store_parameters(ck, "student/", student.params());
  return ck;
}

Denoiser load_student(const datakit::Checkpoint& ck) {
  Denoiser model(denoisers::config_from_json(ck.meta.at("student_config")), 0);
  datakit::restore_parameters(ck, "student/", model.params());
  return model;
}

Denoiser load_teacher(const datakit::Checkpoint& ck) {
  if (!ck.meta.contains("teacher_config") || ck.meta.at("teacher_config").is_null()) {
    throw std::runtime_error("checkpoint: no teacher in this checkpoint");
  }
  Denoiser model(denoisers::config_from_json(ck.meta.at("teacher_config")), 0);
  datakit::restore_parameters(ck, "teacher/", model.params());
  datakit::restore_parameters(ck, "teacher_buffers/", model.buffers());
  return model;
}

}  // namespace tshamo::cotrain
