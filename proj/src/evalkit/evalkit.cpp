#include "tshamo/evalkit.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

namespace tshamo::evalkit {

using diffcore::Index;
using diffcore::Var;
using motion::kFrameWidth;

Tensor cfg_combine(const Tensor& f_uncond, const Tensor& f_cond, double sigma) {
  if (f_uncond.shape() != f_cond.shape()) throw diffcore::ShapeError("cfg_combine: operand shapes differ");
  if (sigma == 1.0) return f_cond;
  if (sigma == 0.0) return f_uncond;
  return Tensor(f_cond.shape(), f_uncond.data() + sigma * (f_cond.data() - f_uncond.data()));
}

Tensor sample_normalized(const PredictFn& predict, const std::vector<int>& labels, const std::vector<int>& lengths,
                         int max_len, double sigma, const diffusion::NoiseSchedule& sched, Rng& rng) {
  const Index B = static_cast<Index>(labels.size()), N = max_len, W = kFrameWidth;
  if (B == 0 || lengths.size() != labels.size()) throw std::invalid_argument("sample: need one length per label");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("sample: sigma must be finite and >= 0");
  for (int len : lengths) {
    if (len < 1 || len > max_len) throw std::invalid_argument("sample: length out of range");
  }
  auto fill_noise = [&](Tensor& t) {
    auto rows = t.matrix(B, N * W);
    for (Index b = 0; b < B; ++b) {
      for (Index i = 0; i < lengths[b] * W; ++i) rows(b, i) = rng.normal();
    }
  };
  Tensor x({B, N, W}), noise({B, N, W});
  fill_noise(x);
  denoisers::Conditioning cond{{}, labels, lengths}, null{{}, std::vector<int>(B, denoisers::kNullLabel), lengths};
  for (int t = sched.steps; t >= 1; --t) {
    cond.timesteps.assign(B, t);
    null.timesteps.assign(B, t);
    Tensor x0_hat;
    if (sigma == 1.0) {
      x0_hat = predict(x, cond, true);
    } else if (sigma == 0.0) {
      x0_hat = predict(x, null, false);
    } else {
      x0_hat = cfg_combine(predict(x, null, false), predict(x, cond, true), sigma);
    }
    if (t > 1) fill_noise(noise);
    x.matrix(B, N * W) = diffusion::posterior_step(x.matrix(B, N * W), x0_hat.matrix(B, N * W), t,
                                                   noise.matrix(B, N * W), sched);
  }
  return x;
}

PredictFn make_predictor(const denoisers::Denoiser& model, const std::vector<Prompt>& prompts) {
  auto owned = std::make_shared<const std::vector<Prompt>>(prompts);
  const bool teacher = model.config().role == denoisers::Role::teacher;
  return [model, owned, teacher](const Tensor& x_t, const denoisers::Conditioning& cond, bool conditional) {
    if (cond.batch() != owned->size()) throw std::invalid_argument("predictor: batch does not match the prompts");
    denoisers::AuxBatch aux;
    if (teacher) {
      for (const auto& p : *owned) aux.push_back(conditional && p.aux ? &*p.aux : nullptr);
    } else {
      for (const auto& p : *owned) {
        if (p.aux) throw std::invalid_argument("predictor: a student takes no auxiliary input");
      }
    }
    return model.predict(x_t, cond, aux);
  };
}

std::vector<MotionSequence> sample(const denoisers::Denoiser& model, const std::vector<Prompt>& prompts, double sigma,
                                   const diffusion::NoiseSchedule& sched, const motion::NormStats& stats, Rng& rng,
                                   int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("sample: batch_size must be positive");
  std::vector<MotionSequence> out;
  out.reserve(prompts.size());
  const int N = model.config().max_len;
  for (std::size_t begin = 0; begin < prompts.size(); begin += batch_size) {
    const std::size_t end = std::min(prompts.size(), begin + batch_size);
    const std::vector<Prompt> chunk(prompts.begin() + begin, prompts.begin() + end);
    std::vector<int> labels, lengths;
    for (const auto& p : chunk) {
      labels.push_back(p.label);
      lengths.push_back(p.length);
    }
    const Tensor x0 = sample_normalized(make_predictor(model, chunk), labels, lengths, N, sigma, sched, rng);
    const auto rows = x0.matrix(static_cast<Index>(chunk.size()), Index{N} * kFrameWidth);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const Eigen::Map<const RowMatrix> seq(rows.row(b).data(), N, kFrameWidth);
      out.push_back(motion::decode(seq, lengths[b], labels[b], stats));
    }
  }
  return out;
}

void ClassifierConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("classifier: need at least two classes");
  if (max_len < 1 || hidden < 1 || epochs < 0 || batch_size < 1) throw std::invalid_argument("classifier: bad sizes");
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("classifier: kernel must be odd");
  if (!(lr > 0.0)) throw std::invalid_argument("classifier: lr must be positive");
}

namespace {

nlohmann::json to_json(const ClassifierConfig& c) {
  return {{"num_classes", c.num_classes}, {"max_len", c.max_len}, {"hidden", c.hidden}, {"kernel", c.kernel},
          {"epochs", c.epochs},           {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed}};
}

ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.num_classes = j.at("num_classes");
  c.max_len = j.at("max_len");
  c.hidden = j.at("hidden");
  c.kernel = j.at("kernel");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.lr = j.at("lr");
  c.seed = j.at("seed");
  c.validate();
  return c;
}

Tensor gaussian(diffcore::Shape shape, double sd, Rng& rng) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = sd * rng.normal();
  return t;
}

}  // namespace

ActionClassifier::ActionClassifier(const ClassifierConfig& config, const motion::NormStats& stats)
    : config_(config), stats_(stats) {
  config_.validate();
  Rng rng = Rng(config_.seed).fork(0xc1a5);
  const Index H = config_.hidden, K = config_.kernel;
  params_["proj.w"] = gaussian({kFrameWidth, H}, 1.0 / std::sqrt(double(kFrameWidth)), rng);
  params_["proj.b"] = Tensor({H});
  params_["conv.w"] = gaussian({K * H, kFeatureDim}, 1.0 / std::sqrt(double(K * H)), rng);
  params_["conv.b"] = Tensor({kFeatureDim});
  params_["head.w"] = gaussian({kFeatureDim, config_.num_classes}, 1.0 / std::sqrt(double(kFeatureDim)), rng);
  params_["head.b"] = Tensor({config_.num_classes});
}

ActionClassifier::Outputs ActionClassifier::forward(diffcore::Tape& tape, const diffcore::Bindings& p,
                                                    const std::vector<MotionSequence>& batch) const {
  const Index B = static_cast<Index>(batch.size());
  Index T = 1;
  for (const auto& s : batch) {
    if (s.length < 1 || s.length > config_.max_len || s.frames.rows() < s.length) {
      throw std::invalid_argument("classifier: sequence length out of range");
    }
    T = std::max<Index>(T, s.length);
  }
  Tensor x({B, T, kFrameWidth}), mask({B, T, config_.hidden}), pool({B, 1, T});
  for (Index b = 0; b < B; ++b) {
    const MotionSequence n = motion::normalize(batch[b], stats_);
    const Index L = batch[b].length;
    x.matrix(B, T * kFrameWidth).row(b).head(L * kFrameWidth) =
        Eigen::Map<const Eigen::RowVectorXd>(n.frames.data(), L * kFrameWidth);
    mask.matrix(B, T * config_.hidden).row(b).head(L * config_.hidden).setOnes();
    pool.matrix(B, T).row(b).head(L).setConstant(1.0 / static_cast<double>(L));
  }
  Var h = diffcore::gelu(diffcore::add(diffcore::matmul(tape.constant(x), p.at("proj.w")), p.at("proj.b")));
  h = diffcore::multiply(h, tape.constant(mask));
  h = diffcore::gelu(diffcore::add(diffcore::conv1d(h, p.at("conv.w")), p.at("conv.b")));
  const Var features = diffcore::reshape(diffcore::matmul(tape.constant(pool), h), {B, kFeatureDim});
  const Var logits = diffcore::add(diffcore::matmul(features, p.at("head.w")), p.at("head.b"));
  return {features, logits};
}

std::vector<double> ActionClassifier::train(const std::vector<MotionSequence>& data) {
  if (data.empty()) throw std::invalid_argument("classifier: no training data");
  for (const auto& s : data) {
    if (s.label < 0 || s.label >= config_.num_classes) throw std::invalid_argument("classifier: label out of range");
  }
  Rng rng = Rng(config_.seed).fork(0x7a1e);
  diffcore::AdamState adam;
  std::vector<std::size_t> order(data.size());
  std::vector<double> losses;
  for (int epoch = 0; epoch < config_.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total = 0.0;
    int batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config_.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config_.batch_size);
      std::vector<MotionSequence> batch;
      std::vector<Index> labels;
      for (std::size_t i = begin; i < end; ++i) {
        batch.push_back(data[order[i]]);
        labels.push_back(data[order[i]].label);
      }
      diffcore::Tape tape;
      const auto p = diffcore::bind(tape, params_, true);
      const Var loss = diffcore::cross_entropy(forward(tape, p, batch).logits, labels);
      const auto grads = tape.backward(loss);
      diffcore::adam_step(params_, diffcore::collect(grads, p), adam, config_.lr);
      total += loss.value().item();
      ++batches;
    }
    losses.push_back(total / batches);
  }
  feature_mean_.setZero();
  feature_std_.setOnes();
  const RowMatrix raw = features(data);
  feature_mean_ = raw.colwise().mean();
  feature_std_ = (raw.rowwise() - feature_mean_).cwiseAbs2().colwise().mean().cwiseSqrt();
  for (Index j = 0; j < kFeatureDim; ++j) {
    if (!(feature_std_[j] > 1e-8)) feature_std_[j] = 1.0;
  }
  return losses;
}

void ActionClassifier::forward_rows(const std::vector<MotionSequence>& data, RowMatrix* features,
                                   RowMatrix* logits) const {
  const Index n = static_cast<Index>(data.size());
  if (features) features->resize(n, kFeatureDim);
  if (logits) logits->resize(n, config_.num_classes);
  constexpr Index chunk = 64;
  for (Index begin = 0; begin < n; begin += chunk) {
    const Index end = std::min(n, begin + chunk);
    const std::vector<MotionSequence> batch(data.begin() + begin, data.begin() + end);
    diffcore::Tape tape;
    const auto out = forward(tape, diffcore::bind(tape, params_, false), batch);
    if (features) {
      features->middleRows(begin, end - begin) =
          (out.features.value().matrix(end - begin, kFeatureDim).rowwise() - feature_mean_).array().rowwise() /
          feature_std_.array();
    }
    if (logits) logits->middleRows(begin, end - begin) = out.logits.value().matrix(end - begin, config_.num_classes);
  }
}

RowMatrix ActionClassifier::features(const std::vector<MotionSequence>& data) const {
  RowMatrix f;
  forward_rows(data, &f, nullptr);
  return f;
}

RowMatrix ActionClassifier::logits(const std::vector<MotionSequence>& data) const {
  RowMatrix l;
  forward_rows(data, nullptr, &l);
  return l;
}

double ActionClassifier::accuracy(const std::vector<MotionSequence>& data, int k) const {
  return top_k_accuracy(*this, data, k);
}

datakit::Checkpoint ActionClassifier::checkpoint() const {
  datakit::Checkpoint ck;
  ck.meta["kind"] = "classifier";
  ck.meta["classifier_config"] = to_json(config_);
  ck.meta["norm_mean"] = std::vector<double>(stats_.mean.data(), stats_.mean.data() + kFrameWidth);
  ck.meta["norm_std"] = std::vector<double>(stats_.std.data(), stats_.std.data() + kFrameWidth);
  datakit::store_parameters(ck, "classifier/", params_);
  ck.tensors["features/mean"] = Tensor({kFeatureDim}, feature_mean_.transpose());
  ck.tensors["features/std"] = Tensor({kFeatureDim}, feature_std_.transpose());
  return ck;
}

ActionClassifier ActionClassifier::load(const datakit::Checkpoint& ck) {
  if (ck.meta.value("kind", std::string()) != "classifier") throw std::runtime_error("checkpoint: not a classifier");
  motion::NormStats stats;
  const auto mean = ck.meta.at("norm_mean").get<std::vector<double>>();
  const auto sd = ck.meta.at("norm_std").get<std::vector<double>>();
  if (mean.size() != kFrameWidth || sd.size() != kFrameWidth) throw std::runtime_error("checkpoint: bad norm stats");
  for (int i = 0; i < kFrameWidth; ++i) {
    stats.mean[i] = mean[i];
    stats.std[i] = sd[i];
  }
  ActionClassifier c(classifier_config_from_json(ck.meta.at("classifier_config")), stats);
  datakit::restore_parameters(ck, "classifier/", c.params_);
  c.feature_mean_ = ck.tensors.at("features/mean").data().transpose();
  c.feature_std_ = ck.tensors.at("features/std").data().transpose();
  return c;
}

double top_k_accuracy(const RowMatrix& logits, const std::vector<int>& labels, int k) {
  if (logits.rows() == 0) throw std::invalid_argument("top_k_accuracy: no samples");
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw std::invalid_argument("top_k_accuracy: label count");
  if (k < 1) throw std::invalid_argument("top_k_accuracy: k must be positive");
  Index hits = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= logits.cols()) throw std::invalid_argument("top_k_accuracy: label out of range");
    Index rank = 0;
    for (Index j = 0; j < logits.cols(); ++j) {
      if (logits(i, j) > logits(i, y) || (logits(i, j) == logits(i, y) && j < y)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

double top_k_accuracy(const ActionClassifier& classifier, const std::vector<MotionSequence>& samples, int k) {
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  return top_k_accuracy(classifier.logits(samples), labels, k);
}

namespace {

// Sum of (x_i . y_j / d + 1)^3 over all pairs, or over i != j, accumulated
// pair by pair in extended precision. Independent of row and argument order.
long double kernel_sum(const RowMatrix& x, const RowMatrix& y, bool skip_diagonal) {
  const double d = static_cast<double>(x.cols());
  long double total = 0.0L;
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < y.rows(); ++j) {
      if (skip_diagonal && i == j) continue;
      const double u = x.row(i).dot(y.row(j)) / d + 1.0;
      total += static_cast<long double>(u * u * u);
    }
  }
  return total;
}

}  // namespace

double kid_x5000(const RowMatrix& x, const RowMatrix& y) {
  if (x.rows() < 2 || y.rows() < 2) throw std::invalid_argument("kid: need at least two samples per set");
  if (x.cols() != y.cols() || x.cols() == 0) throw std::invalid_argument("kid: feature widths differ");
  const long double n = x.rows(), m = y.rows();
  const long double sxx = kernel_sum(x, x, true) / (n * (n - 1));
  const long double syy = kernel_sum(y, y, true) / (m * (m - 1));
  // Equal sizes use the paired U-statistic, which also drops the i == j cross terms.
  const bool paired = x.rows() == y.rows();
  const long double sxy = paired ? kernel_sum(x, y, true) / (n * (n - 1)) : kernel_sum(x, y, false) / (n * m);
  return static_cast<double>(5000.0L * ((sxx + syy) - 2.0L * sxy));
}

double diversity(const RowMatrix& f, Rng& rng, int pair_count) {
  const Index n = f.rows();
  if (n < 2) throw std::invalid_argument("diversity: need at least two samples");
  if (pair_count < 1) throw std::invalid_argument("diversity: pair_count must be positive");
  double total = 0.0;
  long pairs = 0;
  if (n * (n - 1) / 2 <= pair_count) {
    for (Index i = 0; i < n; ++i) {
      for (Index j = i + 1; j < n; ++j, ++pairs) total += (f.row(i) - f.row(j)).norm();
    }
  } else {
    for (; pairs < pair_count; ++pairs) {
      const Index i = static_cast<Index>(rng.below(n));
      Index j = static_cast<Index>(rng.below(n - 1));
      if (j >= i) ++j;
      total += (f.row(i) - f.row(j)).norm();
    }
  }
  return total / static_cast<double>(pairs);
}

EvalReport aggregate(std::vector<RunMetrics> runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate: no runs");
  EvalReport r;
  r.runs = std::move(runs);
  const double n = static_cast<double>(r.runs.size());
  auto each = [&](double RunMetrics::*field) {
    double mean = 0.0;
    for (const auto& m : r.runs) mean += m.*field;
    mean /= n;
    double ss = 0.0;
    for (const auto& m : r.runs) ss += (m.*field - mean) * (m.*field - mean);
    r.mean.*field = mean;
    r.half_width.*field = r.runs.size() > 1 ? 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
  };
  for (auto field : {&RunMetrics::acc1, &RunMetrics::acc2, &RunMetrics::acc3, &RunMetrics::kid_x5000,
                     &RunMetrics::diversity}) {
    each(field);
  }
  return r;
}

EvalReport evaluate(const Generator& generate, const ActionClassifier& classifier,
                    const std::vector<MotionSequence>& reference, const EvalConfig& config) {
  if (reference.size() < 2) throw std::invalid_argument("evaluate: need at least two reference sequences");
  if (config.runs < 1) throw std::invalid_argument("evaluate: runs must be positive");
  std::vector<int> labels;
  for (const auto& s : reference) labels.push_back(s.label);
  const RowMatrix real = classifier.features(reference);
  std::vector<RunMetrics> runs(config.runs);
  parallel_for(config.runs, worker_count(config.threads), [&](int run) {
    Rng rng = Rng(config.seed).fork(static_cast<std::uint64_t>(run));
    const auto gen = generate(rng);
    if (gen.size() != reference.size()) throw std::runtime_error("evaluate: generator returned the wrong count");
    const RowMatrix f = classifier.features(gen), l = classifier.logits(gen);
    RunMetrics& m = runs[run];
    m.acc1 = top_k_accuracy(l, labels, 1);
    m.acc2 = top_k_accuracy(l, labels, 2);
    m.acc3 = top_k_accuracy(l, labels, 3);
    m.kid_x5000 = kid_x5000(real, f);
    m.diversity = diversity(f, rng, config.pair_count);
  });
  EvalReport report = aggregate(std::move(runs));
  report.sigma = config.sigma;
  report.seed = config.seed;
  return report;
}

Generator model_generator(const denoisers::Denoiser& model, std::vector<Prompt> prompts, double sigma,
                          const diffusion::NoiseSchedule& sched, const motion::NormStats& stats) {
  auto shared = std::make_shared<const std::vector<Prompt>>(std::move(prompts));
  return [model, shared, sigma, sched, stats](Rng& rng) { return sample(model, *shared, sigma, sched, stats, rng); };
}

namespace {

nlohmann::json to_json(const RunMetrics& m) {
  return {{"acc1", m.acc1}, {"acc2", m.acc2}, {"acc3", m.acc3}, {"kid_x5000", m.kid_x5000}, {"diversity", m.diversity}};
}

std::string csv_line(const std::string& tag, const RunMetrics& m) {
  std::ostringstream os;
  os.precision(17);
  os << tag << ',' << m.acc1 << ',' << m.acc2 << ',' << m.acc3 << ',' << m.kid_x5000 << ',' << m.diversity << '\n';
  return os.str();
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& m : r.runs) runs.push_back(to_json(m));
  return {{"runs", runs},     {"run_count", r.runs.size()}, {"mean", to_json(r.mean)},
          {"ci95_half_width", to_json(r.half_width)}, {"sigma", r.sigma}, {"seed", r.seed}};
}

std::string csv_header() { return "run,acc1,acc2,acc3,kid_x5000,diversity"; }

std::string csv_rows(const EvalReport& r) {
  std::string out;
  for (std::size_t i = 0; i < r.runs.size(); ++i) out += csv_line(std::to_string(i), r.runs[i]);
  out += csv_line("mean", r.mean);
  out += csv_line("ci95", r.half_width);
  return out;
}

int worker_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("TSHAMO_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace tshamo::evalkit
