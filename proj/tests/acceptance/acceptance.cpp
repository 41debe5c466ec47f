// Acceptance suite: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Pass criterion numbers as arguments to run a subset.
#include "model_fixtures.hpp"
#include "primitive_cases.hpp"
#include "tshamo/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

using namespace tshamo;
using denoisers::AuxKind;
using denoisers::Backbone;
using denoisers::Role;
using diffcore::Tensor;
using motion::RowMatrix;

namespace tol {
constexpr double kPrimitiveGrad = 1e-4;
constexpr double kEndToEndGrad = 1e-3;
constexpr double kGradSeconds = 120.0;
constexpr long kTimerResets = 1'000'000;
constexpr double kTimerMean = 0.002;
constexpr double kTimerSeconds = 10.0;
constexpr double kCfgAffine = 1e-12;
constexpr double kTerminalAlphaBar = 1e-3;
constexpr long kTerminalDraws = 100'000;
constexpr double kTerminalVarLow = 0.98, kTerminalVarHigh = 1.02;
constexpr double kScheduleSeconds = 30.0;
constexpr double kKidIdentical = 1e-9;
constexpr double kKidIid = 5.0;
constexpr int kKidIidSplits = 200;
constexpr double kKidHand = 1e-9;
constexpr double kKidSeconds = 30.0;
constexpr double kGroundTruthKid = 5.0;
}  // namespace tol

// Ablation scale: a reduced model, diffusion length and evaluation run count.
namespace ablation {
constexpr int kSeeds = 3;
constexpr int kEpochs = 200;
constexpr int kDModel = 16;
constexpr int kLayers = 1;
constexpr int kHeads = 2;
constexpr int kDiffusionSteps = 100;
constexpr int kEvalRuns = 5;
constexpr double kLambda = 0.3;
constexpr AuxKind kSweepAux = AuxKind::joints_3d;
constexpr AuxKind kCoTrainAux = AuxKind::mano_plus_contact;
const std::vector<double> kSweep{0.0, 0.1, 0.3, 0.5, 1.0};
}  // namespace ablation

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void report(int id, const std::string& name, const Outcome& o, double seconds) {
  std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << " (" << fmt("%.1f", seconds)
            << " s): " << o.detail << std::endl;
}

void progress(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  Rng rng(11);
  double worst_primitive = 0.0;
  std::string worst_name;
  int count = 0;
  for (const auto& c : testing::primitive_cases(rng)) {
    const double e = testing::gradient_error(c.fn, c.inputs);
    if (e > worst_primitive || !std::isfinite(e)) {
      worst_primitive = e;
      worst_name = c.name;
    }
    ++count;
  }
  double worst_model = 0.0;
  for (Backbone bb : {Backbone::transformer_encdec, Backbone::conv_unet}) {
    for (Role role : {Role::student, Role::teacher}) {
      const double e = testing::end_to_end_gradient_error(testing::tiny_config(bb, role, 8, 4), 41);
      progress("end-to-end " + denoisers::to_string(bb) + "/" + denoisers::to_string(role) + " rel err " +
               fmt("%.2e", e));
      worst_model = std::isfinite(e) ? std::max(worst_model, e) : INFINITY;
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst_primitive <= tol::kPrimitiveGrad && worst_model <= tol::kEndToEndGrad && secs < tol::kGradSeconds;
  o.detail = std::to_string(count) + " primitives, worst " + fmt("%.2e", worst_primitive) + " (" + worst_name +
             "); 4 backbone/role models, worst " + fmt("%.2e", worst_model);
  return o;
}

// ---------------------------------------------------------------- 2

Outcome timer_expectation() {
  const auto t0 = Clock::now();
  Outcome o{true, ""};
  for (double t_cycle : {1.0, 2.5, 3.7}) {
    Rng rng(Rng(2).fork(static_cast<std::uint64_t>(t_cycle * 10)));
    double total = 0.0;
    for (long i = 0; i < tol::kTimerResets; ++i) total += cotrain::timer_reset(t_cycle, rng.uniform());
    const double reset_mean = total / tol::kTimerResets;

    // The same expectation seen through the countdown: steps per teacher update.
    cotrain::TeacherTimer timer(t_cycle, rng);
    long steps = 0, updates = 0;
    while (updates < tol::kTimerResets) {
      ++steps;
      if (timer.tick(rng)) ++updates;
    }
    const double interval = static_cast<double>(steps) / static_cast<double>(updates);
    const bool ok = std::abs(reset_mean - t_cycle) <= tol::kTimerMean && std::abs(interval - t_cycle) <= tol::kTimerMean;
    o.pass = o.pass && ok;
    o.detail += "t_cycle " + fmt("%.1f", t_cycle) + ": reset mean " + fmt("%.5f", reset_mean) + ", interval " +
                fmt("%.5f", interval) + "; ";
  }
  o.pass = o.pass && seconds_since(t0) < tol::kTimerSeconds;
  return o;
}

// ---------------------------------------------------------------- 3

double max_abs(const Tensor& a, const Tensor& b) { return (a.data() - b.data()).cwiseAbs().maxCoeff(); }

Outcome cfg_identities() {
  const auto sched = diffusion::build_schedule(20);
  Outcome o{true, ""};
  double worst_affine = 0.0;
  int cases = 0;
  for (Backbone bb : {Backbone::transformer_encdec, Backbone::conv_unet}) {
    for (Role role : {Role::student, Role::teacher}) {
      const auto cfg = testing::tiny_config(bb, role, 8, 8);
      const denoisers::Denoiser model(cfg, 5);
      Rng rng(9);
      std::vector<evalkit::Prompt> prompts{{0, 8, std::nullopt}, {2, 3, std::nullopt}};
      if (role == Role::teacher) {
        for (auto& p : prompts) p.aux = testing::random_aux(*cfg.aux_kind, rng);
      }
      const evalkit::PredictFn predict = evalkit::make_predictor(model, prompts);
      const Tensor x = testing::random_tensor({2, 8, motion::kFrameWidth}, rng);
      const denoisers::Conditioning cond{{7, 13}, {0, 2}, {8, 3}};
      const Tensor fc = predict(x, cond, true), fu = predict(x, cond, false);
      const bool one = evalkit::cfg_combine(fu, fc, 1.0).data() == fc.data();
      const bool zero = evalkit::cfg_combine(fu, fc, 0.0).data() == fu.data();
      const double scale = std::max({1.0, fc.data().cwiseAbs().maxCoeff(), fu.data().cwiseAbs().maxCoeff()});
      for (double s1 : {-1.0, 0.5, 3.7, 10.0}) {
        for (double s2 : {0.0, 2.0, 7.5}) {
          const Tensor a = evalkit::cfg_combine(fu, fc, s1), b = evalkit::cfg_combine(fu, fc, s2);
          const Tensor mid = evalkit::cfg_combine(fu, fc, 0.5 * (s1 + s2));
          Tensor avg = a;
          avg.data() = 0.5 * (a.data() + b.data());
          worst_affine = std::max(worst_affine, max_abs(mid, avg) / (scale * std::max({1.0, std::abs(s1), std::abs(s2)})));
        }
      }

      // Whole reverse chains: evaluating only the needed half at sigma 0 and 1
      // must match evaluating both halves and combining them at every step.
      bool chain_ok = true;
      for (double sigma : {0.0, 1.0}) {
        int wrong_half = 0;
        const evalkit::PredictFn counted = [&](const Tensor& xt, const denoisers::Conditioning& c, bool conditional) {
          if (conditional != (sigma == 1.0)) ++wrong_half;
          return predict(xt, c, conditional);
        };
        const evalkit::PredictFn combined = [&](const Tensor& xt, const denoisers::Conditioning& c, bool) {
          denoisers::Conditioning with = c, without = c;
          with.labels = {0, 2};
          std::fill(without.labels.begin(), without.labels.end(), denoisers::kNullLabel);
          return evalkit::cfg_combine(predict(xt, without, false), predict(xt, with, true), sigma);
        };
        Rng r1(3), r2(3);
        const Tensor fast = evalkit::sample_normalized(counted, {0, 2}, {8, 3}, 8, sigma, sched, r1);
        const Tensor reference = evalkit::sample_normalized(combined, {0, 2}, {8, 3}, 8, sigma, sched, r2);
        chain_ok = chain_ok && wrong_half == 0 && fast.data() == reference.data();
      }
      o.pass = o.pass && one && zero && chain_ok;
      ++cases;
      if (!(one && zero && chain_ok)) {
        o.detail += denoisers::to_string(bb) + "/" + denoisers::to_string(role) + " failed (sigma1 " +
                    std::to_string(one) + ", sigma0 " + std::to_string(zero) + ", chain " + std::to_string(chain_ok) +
                    "); ";
      }
    }
  }
  o.pass = o.pass && worst_affine <= tol::kCfgAffine;
  o.detail += std::to_string(cases) + " models: sigma 1 and 0 bit-exact, chains skip the unused half; worst affine "
              "residual " + fmt("%.2e", worst_affine);
  return o;
}

// ---------------------------------------------------------------- 4

Outcome schedule_terminal(const datakit::Dataset& data) {
  const auto t0 = Clock::now();
  const auto sched = diffusion::build_schedule(1000, diffusion::ScheduleKind::linear);
  const double abar = sched.alpha_bar[sched.steps];
  const auto samples = cotrain::prepare_samples(data, data.manifest.train, std::nullopt, motion::default_skeleton());
  std::vector<std::pair<std::size_t, int>> frames;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    for (int f = 0; f < samples[s].length; ++f) frames.emplace_back(s, f);
  }
  Rng rng(4);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(motion::kFrameWidth), sq = sum;
  for (long i = 0; i < tol::kTerminalDraws; ++i) {
    const auto [s, f] = frames[rng.below(frames.size())];
    const Eigen::RowVectorXd x0 = samples[s].x0.row(f);
    Eigen::RowVectorXd eps(motion::kFrameWidth);
    for (auto& e : eps) e = rng.normal();
    const Eigen::VectorXd xt = diffusion::q_sample(x0, sched.steps, eps, sched).transpose();
    sum += xt;
    sq += xt.cwiseAbs2();
  }
  const double n = static_cast<double>(tol::kTerminalDraws);
  const Eigen::VectorXd var = (sq - sum.cwiseAbs2() / n) / (n - 1.0);
  Outcome o;
  o.pass = abar < tol::kTerminalAlphaBar && var.minCoeff() >= tol::kTerminalVarLow &&
           var.maxCoeff() <= tol::kTerminalVarHigh && seconds_since(t0) < tol::kScheduleSeconds;
  o.detail = "alpha_bar(1000) " + fmt("%.3e", abar) + "; per-dimension variance of x_T over " +
             std::to_string(tol::kTerminalDraws) + " draws in [" + fmt("%.4f", var.minCoeff()) + ", " +
             fmt("%.4f", var.maxCoeff()) + "], overall " + fmt("%.4f", var.mean());
  return o;
}

// ---------------------------------------------------------------- 5

RowMatrix gaussian_rows(Eigen::Index n, Eigen::Index d, Rng& rng) {
  RowMatrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Outcome kid_oracle(const evalkit::ActionClassifier& classifier, const datakit::Dataset& data) {
  const auto t0 = Clock::now();
  Rng rng(5);
  const RowMatrix g = gaussian_rows(500, evalkit::kFeatureDim, rng);
  const RowMatrix real = classifier.features(pipeline::motions(data, data.manifest.test));
  const double same = std::max(std::abs(evalkit::kid_x5000(g, g)), std::abs(evalkit::kid_x5000(real, real)));

  // Independent splits from a seeded Gaussian feature generator.
  std::vector<double> kids;
  for (int s = 0; s < tol::kKidIidSplits; ++s) {
    Rng split = Rng(55).fork(static_cast<std::uint64_t>(s));
    const RowMatrix a = gaussian_rows(500, evalkit::kFeatureDim, split);
    const RowMatrix b = gaussian_rows(500, evalkit::kFeatureDim, split);
    kids.push_back(evalkit::kid_x5000(a, b));
  }
  double mean = 0.0, sq = 0.0;
  int within = 0;
  for (double k : kids) {
    mean += k;
    sq += k * k;
    within += std::abs(k) < tol::kKidIid;
  }
  mean /= kids.size();
  const double sd = std::sqrt(sq / kids.size() - mean * mean);
  const double mc_se = sd / std::sqrt(static_cast<double>(kids.size()));

  // n = m = 2 written out by hand: both within-set terms have a single pair,
  // and the equal-size cross term averages the two off-diagonal pairs.
  RowMatrix x(2, 3), y(2, 3);
  x << 1.0, 0.0, 2.0, -1.0, 0.5, 0.0;
  y << 0.0, 1.0, 1.0, 2.0, -2.0, 0.5;
  auto k = [](const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) { return std::pow(a.dot(b) / 3.0 + 1.0, 3); };
  const double hand = 5000.0 * (k(x.row(0), x.row(1)) + k(y.row(0), y.row(1)) -
                                (k(x.row(0), y.row(1)) + k(x.row(1), y.row(0))));
  const double hand_err = std::abs(evalkit::kid_x5000(x, y) - hand) / std::max(1.0, std::abs(hand));

  Outcome o;
  o.pass = same <= tol::kKidIdentical && std::abs(mean) < tol::kKidIid && hand_err <= tol::kKidHand &&
           seconds_since(t0) < tol::kKidSeconds;
  o.detail = "identical sets " + fmt("%.1e", same) + "; iid 500/500 splits: mean kid_x5000 over " +
             std::to_string(tol::kKidIidSplits) + " seeded splits " + fmt("%.3f", mean) + " (MC s.e. " +
             fmt("%.3f", mc_se) + "), single-split sd " + fmt("%.2f", sd) + ", " + std::to_string(within) + "/" +
             std::to_string(kids.size()) + " single splits under 5; n=m=2 hand expansion rel err " +
             fmt("%.1e", hand_err);
  return o;
}

// ---------------------------------------------------------------- 6

struct OrderingLedger {
  long evaluations = 0, runs = 0, violations = 0;
  void add(const evalkit::EvalReport& r) {
    ++evaluations;
    for (const auto& m : r.runs) {
      ++runs;
      if (!(m.acc1 <= m.acc2 && m.acc2 <= m.acc3)) ++violations;
    }
  }
};

Outcome metric_orderings(const evalkit::ActionClassifier& classifier, const datakit::Dataset& data,
                         OrderingLedger& ledger) {
  const auto test = pipeline::motions(data, data.manifest.test);
  evalkit::EvalConfig cfg;
  cfg.runs = 3;
  cfg.seed = 6;
  const auto report = evalkit::evaluate([&](Rng&) { return test; }, classifier, test, cfg);
  ledger.add(report);
  double worst_kid = 0.0;
  bool acc_equal = true;
  const double a1 = classifier.accuracy(test, 1), a2 = classifier.accuracy(test, 2), a3 = classifier.accuracy(test, 3);
  for (const auto& m : report.runs) {
    worst_kid = std::max(worst_kid, std::abs(m.kid_x5000));
    acc_equal = acc_equal && m.acc1 == a1 && m.acc2 == a2 && m.acc3 == a3;
  }
  Outcome o;
  o.pass = ledger.violations == 0 && ledger.evaluations > 1 && worst_kid < tol::kGroundTruthKid && acc_equal;
  o.detail = std::to_string(ledger.violations) + " ordering violations over " + std::to_string(ledger.runs) +
             " runs in " + std::to_string(ledger.evaluations) + " evaluations; ground truth as generations: kid_x5000 " +
             fmt("%.2e", worst_kid) + ", acc@1/2/3 " + fmt("%.4f", report.mean.acc1) + "/" +
             fmt("%.4f", report.mean.acc2) + "/" + fmt("%.4f", report.mean.acc3) + " vs classifier " + fmt("%.4f", a1) +
             "/" + fmt("%.4f", a2) + "/" + fmt("%.4f", a3) + (acc_equal ? " (equal)" : " (differ)");
  return o;
}

// ---------------------------------------------------------------- 7, 8

struct AblationResults {
  // cells[seed][name]
  std::vector<std::map<std::string, pipeline::CellResult>> cells;
  double seconds = 0.0;
};

pipeline::Setup ablation_setup() {
  pipeline::Setup s;
  s.model.d_model = ablation::kDModel;
  s.model.num_layers = ablation::kLayers;
  s.model.num_heads = ablation::kHeads;
  s.model.num_labels = 6;
  s.model.max_len = motion::kMaxFrames;
  s.train.epochs = ablation::kEpochs;
  s.train.diffusion_steps = ablation::kDiffusionSteps;
  s.train.lambda = ablation::kLambda;
  s.eval.runs = ablation::kEvalRuns;
  return s;
}

std::string sweep_name(double lambda) {
  std::ostringstream os;
  os << "lambda=" << lambda;
  return os.str();
}

// The cond-type grid for every seed plus the lambda sweep. The sweep takes
// lambda 0 from the no-teacher cell and lambda 0.3 from the joints_3d cell.
AblationResults run_ablations(const datakit::Dataset& data, const evalkit::ActionClassifier& classifier,
                              OrderingLedger& ledger) {
  const auto t0 = Clock::now();
  pipeline::Setup grid_setup = ablation_setup();
  pipeline::Setup sweep_setup = grid_setup;
  sweep_setup.evaluate_teacher = false;
  std::vector<pipeline::CellSpec> grid, sweep;
  for (int s = 0; s < ablation::kSeeds; ++s) {
    for (auto& c : pipeline::cond_type_grid(ablation::kLambda, s)) grid.push_back(c);
    std::vector<double> extra;
    for (double l : ablation::kSweep) {
      if (l != 0.0 && l != ablation::kLambda) extra.push_back(l);
    }
    for (auto& c : pipeline::lambda_grid(ablation::kSweepAux, extra, s)) sweep.push_back(c);
  }
  const int workers = evalkit::worker_count();
  progress("ablation grid: " + std::to_string(grid.size() + sweep.size()) + " cells on " + std::to_string(workers) +
           " thread(s)");
  std::vector<pipeline::CellSpec> all = grid;
  all.insert(all.end(), sweep.begin(), sweep.end());
  std::vector<pipeline::CellResult> out(all.size());
  std::mutex log_mutex;
  evalkit::parallel_for(static_cast<int>(all.size()), workers, [&](int i) {
    const auto c0 = Clock::now();
    const bool in_grid = static_cast<std::size_t>(i) < grid.size();
    out[i] = pipeline::run_cell(data, classifier, in_grid ? grid_setup : sweep_setup, all[i]);
    std::lock_guard lock(log_mutex);
    progress("seed " + std::to_string(all[i].seed) + " " + all[i].name + ": student acc@3 " +
             fmt("%.4f", out[i].student.mean.acc3) + " kid " + fmt("%.1f", out[i].student.mean.kid_x5000) +
             (out[i].teacher ? ", teacher acc@3 " + fmt("%.4f", out[i].teacher->mean.acc3) + " kid " +
                                   fmt("%.1f", out[i].teacher->mean.kid_x5000)
                             : std::string()) +
             " (" + fmt("%.0f", seconds_since(c0)) + " s)");
  });
  AblationResults r;
  r.cells.resize(ablation::kSeeds);
  for (auto& c : out) {
    ledger.add(c.student);
    if (c.teacher) ledger.add(*c.teacher);
    r.cells[c.spec.seed][c.spec.name] = std::move(c);
  }
  r.seconds = seconds_since(t0);

  std::ofstream csv("acceptance_ablation.csv");
  csv << pipeline::ablation_csv_header() << "\n";
  for (const auto& seed : r.cells) {
    for (const auto& [name, cell] : seed) csv << pipeline::ablation_csv_row(cell) << "\n";
  }
  return r;
}

Outcome table3_directions(const AblationResults& r) {
  Outcome o{true, ""};
  const double S = ablation::kSeeds;
  // (a) teacher over its own co-trained student, per aux kind, seed means.
  int dominated = 0;
  std::string a_detail;
  std::vector<std::pair<double, std::string>> student_acc3;
  for (AuxKind k : denoisers::kAllAuxKinds) {
    const std::string name = denoisers::to_string(k);
    double sa = 0, sk = 0, ta = 0, tk = 0;
    for (const auto& seed : r.cells) {
      const auto& c = seed.at(name);
      sa += c.student.mean.acc3 / S;
      sk += c.student.mean.kid_x5000 / S;
      ta += c.teacher->mean.acc3 / S;
      tk += c.teacher->mean.kid_x5000 / S;
    }
    const bool ok = ta > sa && tk < sk;
    dominated += ok;
    student_acc3.emplace_back(sa, name);
    a_detail += name + " T/S acc@3 " + fmt("%.3f", ta) + "/" + fmt("%.3f", sa) + " kid " + fmt("%.0f", tk) + "/" +
                fmt("%.0f", sk) + (ok ? "" : " (not dominated)") + "; ";
  }
  const bool a = dominated == 5;

  // (b) co-trained student against the no-teacher baseline, per seed.
  const std::string co = denoisers::to_string(ablation::kCoTrainAux);
  int wins = 0;
  std::string b_detail;
  for (const auto& seed : r.cells) {
    const double c = seed.at(co).student.mean.acc3, base = seed.at("no_teacher").student.mean.acc3;
    wins += c > base;
    b_detail += fmt("%.3f", c) + " vs " + fmt("%.3f", base) + "; ";
  }
  const bool b = wins >= 2;

  // (c) rank of the co-training aux kind among the five student means.
  std::sort(student_acc3.begin(), student_acc3.end(), std::greater<>());
  const auto it = std::find_if(student_acc3.begin(), student_acc3.end(), [&](const auto& p) { return p.second == co; });
  const int rank = static_cast<int>(it - student_acc3.begin()) + 1;  // 1 = best
  double co_acc = it->first;
  const double median = student_acc3[2].first;
  const bool c = co_acc >= median;

  o.pass = a && b && c;
  o.detail = std::string("(a) ") + (a ? "ok" : "FAIL") + " " + std::to_string(dominated) + "/5 kinds: " + a_detail +
             "(b) " + (b ? "ok" : "FAIL") + " " + co + " beats no_teacher in " + std::to_string(wins) + "/3 seeds: " +
             b_detail + "(c) " + (c ? "ok" : "FAIL") + " " + co + " ranks " + std::to_string(rank) +
             "/5 on student acc@3 (" + fmt("%.3f", co_acc) + ", median " + fmt("%.3f", median) +
             "); grid runtime " + fmt("%.0f", r.seconds) + " s";
  return o;
}

const pipeline::CellResult& sweep_cell(const std::map<std::string, pipeline::CellResult>& seed, double lambda) {
  if (lambda == 0.0) return seed.at("no_teacher");
  if (lambda == ablation::kLambda) return seed.at(denoisers::to_string(ablation::kSweepAux));
  return seed.at(sweep_name(lambda));
}

Outcome lambda_sweep(const AblationResults& r) {
  int interior = 0;
  std::string detail;
  for (std::size_t s = 0; s < r.cells.size(); ++s) {
    std::vector<double> acc;
    for (double l : ablation::kSweep) acc.push_back(sweep_cell(r.cells[s], l).student.mean.acc3);
    const double inner = *std::max_element(acc.begin() + 1, acc.end() - 1);
    const bool peak = inner > acc.front() && inner > acc.back();
    interior += peak;
    detail += "seed " + std::to_string(s) + " [";
    for (std::size_t i = 0; i < acc.size(); ++i) detail += (i ? " " : "") + fmt("%.3f", acc[i]);
    detail += std::string("]") + (peak ? " interior peak" : " no interior peak") + "; ";
  }
  Outcome o;
  o.pass = interior >= 2;
  o.detail = "student acc@3 over lambda {0, 0.1, 0.3, 0.5, 1} with " + denoisers::to_string(ablation::kSweepAux) +
             ": " + detail + std::to_string(interior) + "/3 seeds with an interior maximum";
  return o;
}

// ---------------------------------------------------------------- 9

datakit::Dataset small_dataset() {
  datakit::SyntheticSpec spec;
  spec.num_classes = 4;
  spec.seqs_per_class = 20;
  spec.min_length = 12;
  spec.max_length = 24;
  spec.object_points = 8;
  return datakit::generate_synthetic_dataset(spec, 17);
}

// The same call sequence for every backbone; only the config value differs.
struct StudentOnlyResult {
  bool no_teacher_tensors = false;
  bool identical_predictions = false;
  bool finite_metrics = false;
  evalkit::EvalReport report;
};

StudentOnlyResult student_only_run(const datakit::Dataset& data, const evalkit::ActionClassifier& classifier,
                                   Backbone backbone, const std::filesystem::path& dir) {
  denoisers::DenoiserConfig model;
  model.backbone = backbone;
  model.d_model = 8;
  model.num_layers = 1;
  model.num_heads = 2;
  model.num_labels = data.manifest.num_classes;
  model.max_len = data.manifest.max_frames;
  cotrain::TrainConfig train;
  train.epochs = 2;
  train.batch_size = 8;
  train.diffusion_steps = 20;
  const auto skeleton = motion::default_skeleton();
  auto samples = cotrain::prepare_samples(data, data.manifest.train, ablation::kCoTrainAux, skeleton);
  auto teacher_cfg = model;
  teacher_cfg.role = Role::teacher;
  teacher_cfg.aux_kind = ablation::kCoTrainAux;
  denoisers::Denoiser teacher(teacher_cfg, 2);
  const auto [mean, sd] = cotrain::aux_stats(samples);
  teacher.set_aux_stats(mean, sd);
  cotrain::Trainer trainer(train, denoisers::Denoiser(model, 1), std::move(teacher), std::move(samples));
  trainer.run();

  const auto path = (dir / ("student_" + denoisers::to_string(backbone) + ".ckpt")).string();
  datakit::save_checkpoint(cotrain::student_checkpoint(trainer.student(), data.manifest.stats), path);
  const auto ck = datakit::load_checkpoint(path);
  StudentOnlyResult r;
  r.no_teacher_tensors = std::none_of(ck.tensors.begin(), ck.tensors.end(), [](const auto& kv) {
    return kv.first.find("teacher") != std::string::npos;
  });
  const denoisers::Denoiser student = cotrain::load_student(ck);

  Rng rng(8);
  const Tensor x = testing::random_tensor({2, model.max_len, motion::kFrameWidth}, rng);
  const denoisers::Conditioning cond{{3, 11}, {0, 1}, {model.max_len, 5}};
  r.identical_predictions = student.predict(x, cond).data() == trainer.student().predict(x, cond).data();

  evalkit::EvalConfig eval;
  eval.runs = 2;
  eval.seed = 3;
  const auto sched = diffusion::build_schedule(train.diffusion_steps, train.schedule);
  r.report = evalkit::evaluate(evalkit::model_generator(student, pipeline::prompts(data, data.manifest.test, {}, skeleton),
                                                        eval.sigma, sched, data.manifest.stats),
                               classifier, pipeline::motions(data, data.manifest.test), eval);
  const auto& m = r.report.mean;
  r.finite_metrics = std::isfinite(m.acc3) && std::isfinite(m.kid_x5000) && std::isfinite(m.diversity);
  return r;
}

Outcome student_only(const std::filesystem::path& dir, OrderingLedger& ledger) {
  const auto data = small_dataset();
  evalkit::ClassifierConfig cc;
  cc.epochs = 5;
  const auto classifier = pipeline::train_classifier(data, cc);
  Outcome o{true, ""};
  for (Backbone bb : {Backbone::transformer_encdec, Backbone::conv_unet}) {
    const auto r = student_only_run(data, classifier, bb, dir);
    ledger.add(r.report);
    const bool ok = r.no_teacher_tensors && r.identical_predictions && r.finite_metrics;
    o.pass = o.pass && ok;
    o.detail += denoisers::to_string(bb) + ": teacher-free checkpoint " + (r.no_teacher_tensors ? "yes" : "NO") +
                ", reload bit-identical " + (r.identical_predictions ? "yes" : "NO") + ", eval acc@3 " +
                fmt("%.3f", r.report.mean.acc3) + " kid " + fmt("%.0f", r.report.mean.kid_x5000) + "; ";
  }
  o.detail += "both backbones ran through one unchanged train/save/load/evaluate path";
  return o;
}

// ---------------------------------------------------------------- 10

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string cell_csv(const pipeline::CellResult& r) {
  std::string s = cotrain::csv_header() + "\n";
  for (const auto& e : r.history) s += cotrain::csv_row(e) + "\n";
  s += evalkit::csv_header() + "\n" + evalkit::csv_rows(r.student);
  if (r.teacher) s += evalkit::csv_rows(*r.teacher);
  return s + pipeline::ablation_csv_row(r) + "\n";
}

Outcome determinism(const std::filesystem::path& dir, OrderingLedger& ledger) {
  const auto data = small_dataset();
  evalkit::ClassifierConfig cc;
  cc.epochs = 5;
  const auto classifier = pipeline::train_classifier(data, cc);
  pipeline::Setup setup;
  setup.model.d_model = 8;
  setup.model.num_layers = 1;
  setup.model.num_heads = 2;
  setup.model.num_labels = data.manifest.num_classes;
  setup.model.max_len = data.manifest.max_frames;
  setup.train.epochs = 3;
  setup.train.batch_size = 8;
  setup.train.diffusion_steps = 20;
  setup.eval.runs = 2;
  const pipeline::CellSpec cell{"mano_plus_contact", AuxKind::mano_plus_contact, 0.3, 12};
  const auto first = pipeline::run_cell(data, classifier, setup, cell);
  const auto second = pipeline::run_cell(data, classifier, setup, cell);
  ledger.add(first.student);
  ledger.add(*first.teacher);
  const bool csv_same = cell_csv(first) == cell_csv(second);

  // Resume: 10 steps, a checkpoint through disk, 10 more, against 20 straight.
  auto make_trainer = [&]() {
    auto samples = cotrain::prepare_samples(data, data.manifest.train, AuxKind::joints_2d, motion::default_skeleton());
    auto tc = setup.model;
    tc.role = Role::teacher;
    tc.aux_kind = AuxKind::joints_2d;
    denoisers::Denoiser teacher(tc, 22);
    const auto [mean, sd] = cotrain::aux_stats(samples);
    teacher.set_aux_stats(mean, sd);
    cotrain::TrainConfig train = setup.train;
    train.epochs = 5;
    train.t_cycle = 2.5;
    return cotrain::Trainer(train, denoisers::Denoiser(setup.model, 21), std::move(teacher), std::move(samples));
  };
  auto straight = make_trainer();
  std::vector<cotrain::StepReport> reference;
  for (int i = 0; i < 20; ++i) reference.push_back(straight.step());
  auto interrupted = make_trainer();
  for (int i = 0; i < 10; ++i) interrupted.step();
  const auto ck_path = (dir / "resume.ckpt").string();
  datakit::save_checkpoint(interrupted.checkpoint(), ck_path);
  auto resumed = make_trainer();
  resumed.restore(datakit::load_checkpoint(ck_path));
  bool trajectory_same = true;
  for (int i = 10; i < 20; ++i) {
    const auto s = resumed.step();
    const auto& r = reference[i];
    trajectory_same = trajectory_same && s.loss_s_gt == r.loss_s_gt && s.loss_t_gt == r.loss_t_gt &&
                      s.loss_s_t == r.loss_s_t && s.teacher_updated == r.teacher_updated && s.lr == r.lr;
  }
  datakit::save_checkpoint(straight.checkpoint(), (dir / "straight.ckpt").string());
  datakit::save_checkpoint(resumed.checkpoint(), (dir / "resumed.ckpt").string());
  const bool state_same = slurp(dir / "straight.ckpt") == slurp(dir / "resumed.ckpt");

  // Golden bytes, produced independently of this code base.
  datakit::SequenceRecord rec;
  rec.id = 7;
  rec.motion.label = 2;
  rec.motion.length = 2;
  for (int d = 0; d < motion::kFrameWidth; ++d) rec.motion.frames(0, d) = d / 4.0;
  rec.motion.frames(1, 83) = 1.0;
  rec.objects.resize(1, 3);
  rec.objects << 0.5, -0.25, 1.0;
  rec.camera.translation << 0.0, 0.0, 0.5;
  const std::string golden = slurp(std::filesystem::path(TSHAMO_SOURCE_DIR) / "tests/data/golden_record.bin");
  const auto written = dir / "golden_check.bin";
  datakit::write_records({rec}, written.string());
  const bool golden_same = !golden.empty() && slurp(written) == golden && datakit::read_records(written.string())[0] == rec;

  Outcome o;
  o.pass = csv_same && trajectory_same && state_same && golden_same;
  o.detail = std::string("repeated train/eval CSVs ") + (csv_same ? "identical" : "DIFFER") +
             "; resumed steps 11-20 " + (trajectory_same ? "bit-identical" : "DIFFER") + ", final state " +
             (state_same ? "byte-identical" : "DIFFERS") + "; golden record file " +
             (golden_same ? "byte-identical" : "DIFFERS") + " (" + std::to_string(golden.size()) + " bytes)";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto want = [&](int id) { return only.empty() || only.count(id) > 0; };
  const auto dir = std::filesystem::temp_directory_path() / "tshamo_acceptance";
  std::filesystem::create_directories(dir);

  int failures = 0;
  auto run = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    std::cerr << "[" << id << "] " << name << std::endl;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    report(id, name, o, seconds_since(t0));
    failures += !o.pass;
  };

  std::optional<datakit::Dataset> data;
  std::optional<evalkit::ActionClassifier> classifier;
  auto main_data = [&]() -> const datakit::Dataset& {
    if (!data) data = datakit::generate_synthetic_dataset(datakit::SyntheticSpec{}, 0);
    return *data;
  };
  auto main_classifier = [&]() -> const evalkit::ActionClassifier& {
    if (!classifier) {
      progress("training the evaluation classifier");
      classifier = pipeline::train_classifier(main_data(), evalkit::ClassifierConfig{});
      progress("classifier test acc@1 " +
               fmt("%.4f", classifier->accuracy(pipeline::motions(*data, data->manifest.test), 1)));
    }
    return *classifier;
  };

  OrderingLedger ledger;
  if (want(1)) run(1, "gradient suite", gradient_suite);
  if (want(2)) run(2, "timer expectation", timer_expectation);
  if (want(3)) run(3, "classifier-free guidance identities", cfg_identities);
  if (want(4)) run(4, "schedule and terminal noise", [&] { return schedule_terminal(main_data()); });
  if (want(5)) run(5, "KID oracle", [&] { return kid_oracle(main_classifier(), main_data()); });
  if (want(9)) run(9, "student-only inference and backbone swap", [&] { return student_only(dir, ledger); });
  if (want(10)) run(10, "determinism and persistence", [&] { return determinism(dir, ledger); });

  std::optional<AblationResults> ablations;
  if (want(7) || want(8)) {
    try {
      ablations = run_ablations(main_data(), main_classifier(), ledger);
    } catch (const std::exception& e) {
      std::cerr << "ablation grid failed: " << e.what() << std::endl;
    }
  }
  auto need_ablations = [&]() -> const AblationResults& {
    if (!ablations) throw std::runtime_error("ablation grid did not complete");
    return *ablations;
  };
  if (want(7)) run(7, "condition-type ablation directions", [&] { return table3_directions(need_ablations()); });
  if (want(8)) run(8, "lambda sweep shape", [&] { return lambda_sweep(need_ablations()); });
  if (want(6)) run(6, "metric orderings", [&] { return metric_orderings(main_classifier(), main_data(), ledger); });

  std::filesystem::remove_all(dir);
  return failures == 0 ? 0 : 1;
}
