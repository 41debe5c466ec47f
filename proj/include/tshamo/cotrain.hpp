// Teacher-student co-training: joint losses, the teacher update countdown,
// cosine learning rate and the resumable training loop.
#ifndef TSHAMO_COTRAIN_HPP
#define TSHAMO_COTRAIN_HPP

#include "tshamo/datakit.hpp"
#include "tshamo/denoisers.hpp"
#include "tshamo/diffusion.hpp"
#include "tshamo/random.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace tshamo::cotrain {

using denoisers::AuxiliaryCondition;
using denoisers::Denoiser;
using diffcore::Tensor;
using diffcore::Var;

struct TrainConfig {
  double lambda = 0.3;
  double t_cycle = 2.0;
  double lr = 1e-3;
  int epochs = 200;
  int batch_size = 32;
  double p_uncond = 0.1;
  std::uint64_t seed = 0;
  int diffusion_steps = 1000;
  diffusion::ScheduleKind schedule = diffusion::ScheduleKind::linear;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// floor(t_cycle) + [u < t_cycle - floor(t_cycle)] for u in [0, 1).
int timer_reset(double t_cycle, double u);

class TeacherTimer {
 public:
  TeacherTimer(double t_cycle, Rng& rng);
  // Counts one step down; true when the teacher updates on this step.
  bool tick(Rng& rng);
  int counter() const { return counter_; }
  void set_counter(int counter) { counter_ = counter; }

 private:
  double t_cycle_;
  int counter_;
};

// lr_base * (1 + cos(pi * step / total)) / 2.
double cosine_lr(long step, long total_steps, double lr_base);

// Masked mean squared error; the mask is a 0/1 tensor of the prediction's shape.
Var loss_to_gt(const Var& pred, const Var& x0, const Tensor& mask);
// The teacher prediction must be a constant on the tape.
Var loss_s_to_t(const Var& student_pred, const Var& teacher_pred, const Tensor& mask);

// One normalized training sequence, padded to N rows.
struct TrainingSample {
  motion::RowMatrix x0;
  int label = 0;
  int length = 1;
  std::optional<AuxiliaryCondition> aux;
};

std::vector<TrainingSample> prepare_samples(const datakit::Dataset& dataset, const std::vector<std::uint32_t>& ids,
                                            std::optional<denoisers::AuxKind> aux_kind,
                                            const motion::HandSkeleton& skeleton);
// Per-dimension mean and spread of the auxiliary features (zero spread -> 1).
std::pair<Eigen::VectorXd, Eigen::VectorXd> aux_stats(const std::vector<TrainingSample>& samples);

struct StepReport {
  double loss_s_gt = 0.0;
  double loss_s_t = 0.0;  // NaN without a teacher
  double loss_t_gt = 0.0;  // NaN without a teacher
  bool teacher_updated = false;
  double lr = 0.0;
};

struct EpochLog {
  int epoch = 0;
  double loss_s_gt = 0.0, loss_s_t = 0.0, loss_t_gt = 0.0;
  double lr = 0.0;
  long teacher_updates = 0;
  long teacher_updates_total = 0;
};

std::string csv_header();
std::string csv_row(const EpochLog& log);

class Trainer {
 public:
  // Without a teacher this is plain diffusion training of the student. The
  // student's randomness does not depend on whether a teacher is present.
  Trainer(const TrainConfig& config, Denoiser student, std::optional<Denoiser> teacher,
          std::vector<TrainingSample> samples);

  StepReport step();
  // Runs until the configured epoch count; on_epoch sees each finished epoch.
  void run(const std::function<void(const EpochLog&)>& on_epoch = {});
  bool finished() const { return step_ >= total_steps(); }

  long global_step() const { return step_; }
  long steps_per_epoch() const;
  long total_steps() const { return steps_per_epoch() * config_.epochs; }
  const TrainConfig& config() const { return config_; }
  const Denoiser& student() const { return student_; }
  const std::optional<Denoiser>& teacher() const { return teacher_; }
  const std::vector<EpochLog>& history() const { return history_; }

  // Everything needed to continue bit-identically.
  datakit::Checkpoint checkpoint() const;
  void restore(const datakit::Checkpoint& checkpoint);

 private:
  void begin_epoch();

  TrainConfig config_;
  Denoiser student_;
  std::optional<Denoiser> teacher_;
  std::vector<TrainingSample> samples_;
  diffusion::NoiseSchedule schedule_;
  diffcore::AdamState student_adam_, teacher_adam_;
  Rng data_rng_, noise_rng_, teacher_rng_, timer_rng_;
  std::optional<TeacherTimer> timer_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  long step_ = 0;
  long teacher_updates_total_ = 0;
  EpochLog running_;
  long running_steps_ = 0;
  std::vector<EpochLog> history_;
};

// Student-only model file for inference.
datakit::Checkpoint student_checkpoint(const Denoiser& student, const motion::NormStats& stats);
Denoiser load_student(const datakit::Checkpoint& checkpoint);
Denoiser load_teacher(const datakit::Checkpoint& checkpoint);

}  // namespace tshamo::cotrain

#endif
