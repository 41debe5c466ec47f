// Guided sampling, the action classifier used as a feature extractor, and
// the evaluation metrics: top-k accuracy, KID, diversity and run intervals.
#ifndef TSHAMO_EVALKIT_HPP
#define TSHAMO_EVALKIT_HPP

#include "tshamo/datakit.hpp"
#include "tshamo/denoisers.hpp"
#include "tshamo/diffusion.hpp"
#include "tshamo/random.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace tshamo::evalkit {

using diffcore::Tensor;
using motion::MotionSequence;
using motion::RowMatrix;

// f_uncond + sigma * (f_cond - f_uncond). Exact at sigma 0 and 1.
Tensor cfg_combine(const Tensor& f_uncond, const Tensor& f_cond, double sigma);

// x0 prediction for x_t [B, N, 166]; `conditional` is false for the null half.
using PredictFn = std::function<Tensor(const Tensor& x_t, const denoisers::Conditioning& cond, bool conditional)>;

// Reverse chain from pure noise, returning normalized x0 [B, N, 166] with
// zero rows past each length. Only the needed half is evaluated at sigma 0 or 1.
Tensor sample_normalized(const PredictFn& predict, const std::vector<int>& labels, const std::vector<int>& lengths,
                         int max_len, double sigma, const diffusion::NoiseSchedule& sched, Rng& rng);

struct Prompt {
  int label = 0;
  int length = 1;
  std::optional<denoisers::AuxiliaryCondition> aux;  // teacher only
};

// Wraps a denoiser; the null half always drops both label and auxiliary input.
PredictFn make_predictor(const denoisers::Denoiser& model, const std::vector<Prompt>& prompts);

// Decoded generations, one per prompt, processed in batches of batch_size.
std::vector<MotionSequence> sample(const denoisers::Denoiser& model, const std::vector<Prompt>& prompts, double sigma,
                                   const diffusion::NoiseSchedule& sched, const motion::NormStats& stats, Rng& rng,
                                   int batch_size = 64);

struct ClassifierConfig {
  int num_classes = 6;
  int max_len = motion::kMaxFrames;
  int hidden = 64;
  int kernel = 5;
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

inline constexpr int kFeatureDim = 64;

// Per-frame projection, temporal convolution, masked mean pool, linear head.
// features() returns the pooled 64-d layer standardized per dimension with
// statistics of the training set, fixed when train() finishes.
class ActionClassifier {
 public:
  ActionClassifier(const ClassifierConfig& config, const motion::NormStats& stats);

  // Returns the mean training loss per epoch.
  std::vector<double> train(const std::vector<MotionSequence>& data);
  RowMatrix features(const std::vector<MotionSequence>& data) const;  // n x 64
  RowMatrix logits(const std::vector<MotionSequence>& data) const;    // n x C
  double accuracy(const std::vector<MotionSequence>& data, int k = 1) const;

  const ClassifierConfig& config() const { return config_; }
  const diffcore::ParameterSet& params() const { return params_; }

  datakit::Checkpoint checkpoint() const;
  static ActionClassifier load(const datakit::Checkpoint& checkpoint);

 private:
  struct Outputs {
    diffcore::Var features, logits;
  };
  Outputs forward(diffcore::Tape& tape, const diffcore::Bindings& p, const std::vector<MotionSequence>& batch) const;
  void forward_rows(const std::vector<MotionSequence>& data, RowMatrix* features, RowMatrix* logits) const;

  ClassifierConfig config_;
  motion::NormStats stats_;
  diffcore::ParameterSet params_;
  Eigen::RowVectorXd feature_mean_ = Eigen::RowVectorXd::Zero(kFeatureDim);
  Eigen::RowVectorXd feature_std_ = Eigen::RowVectorXd::Ones(kFeatureDim);
};

// Fraction of rows whose label is among the k largest logits; ties rank the
// smaller class id first.
double top_k_accuracy(const RowMatrix& logits, const std::vector<int>& labels, int k);
double top_k_accuracy(const ActionClassifier& classifier, const std::vector<MotionSequence>& samples, int k);

// Unbiased MMD^2 under k(x, y) = (x.y / d + 1)^3, times 5000. For equal set
// sizes the cross sum skips paired rows, so identical sets score exactly 0.
double kid_x5000(const RowMatrix& real, const RowMatrix& generated);

// Mean Euclidean distance over all pairs when there are at most pair_count of
// them, otherwise over pair_count random pairs of distinct rows.
double diversity(const RowMatrix& features, Rng& rng, int pair_count = 300);

struct RunMetrics {
  double acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
  double kid_x5000 = 0.0;
  double diversity = 0.0;
};

struct EvalReport {
  std::vector<RunMetrics> runs;
  RunMetrics mean;
  RunMetrics half_width;  // 1.96 sd / sqrt(runs), zero for one run
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

struct EvalConfig {
  int runs = 20;
  double sigma = 10.0;
  std::uint64_t seed = 0;
  int pair_count = 300;
  int threads = 0;  // 0: TSHAMO_THREADS or the hardware count
};

// One generation per reference sequence; called once per run with that run's stream.
using Generator = std::function<std::vector<MotionSequence>(Rng& rng)>;

EvalReport evaluate(const Generator& generate, const ActionClassifier& classifier,
                    const std::vector<MotionSequence>& reference, const EvalConfig& config);

// Denoiser-backed generator over the reference prompts.
Generator model_generator(const denoisers::Denoiser& model, std::vector<Prompt> prompts, double sigma,
                          const diffusion::NoiseSchedule& sched, const motion::NormStats& stats);

EvalReport aggregate(std::vector<RunMetrics> runs);
nlohmann::json to_json(const EvalReport& report);
std::string csv_header();
std::string csv_rows(const EvalReport& report);

// Worker count honoring TSHAMO_THREADS.
int worker_count(int requested = 0);
// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first error.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace tshamo::evalkit

#endif
