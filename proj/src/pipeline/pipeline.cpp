#include "tshamo/pipeline.hpp"

#include <cmath>
#include <sstream>

namespace tshamo::pipeline {

std::vector<motion::MotionSequence> motions(const datakit::Dataset& data, const std::vector<std::uint32_t>& ids) {
  std::vector<motion::MotionSequence> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(data.record(id).motion);
  return out;
}

std::vector<evalkit::Prompt> prompts(const datakit::Dataset& data, const std::vector<std::uint32_t>& ids,
                                     std::optional<AuxKind> aux, const motion::HandSkeleton& skeleton) {
  std::vector<evalkit::Prompt> out;
  for (auto id : ids) {
    const auto& rec = data.record(id);
    evalkit::Prompt p{rec.motion.label, rec.motion.length, std::nullopt};
    if (aux) p.aux = denoisers::encode_auxiliary(rec.motion, rec.camera, *aux, skeleton);
    out.push_back(std::move(p));
  }
  return out;
}

evalkit::ActionClassifier train_classifier(const datakit::Dataset& data, evalkit::ClassifierConfig config) {
  config.num_classes = data.manifest.num_classes;
  config.max_len = data.manifest.max_frames;
  evalkit::ActionClassifier clf(config, data.manifest.stats);
  clf.train(motions(data, data.manifest.train));
  return clf;
}

CellResult run_cell(const datakit::Dataset& data, const evalkit::ActionClassifier& classifier, const Setup& setup,
                    const CellSpec& cell) {
  const auto skeleton = motion::default_skeleton();
  const Rng root(cell.seed);
  denoisers::DenoiserConfig student_cfg = setup.model;
  student_cfg.role = denoisers::Role::student;
  student_cfg.aux_kind.reset();
  denoisers::Denoiser student(student_cfg, root.fork(1).next_u64());

  auto samples = cotrain::prepare_samples(data, data.manifest.train, cell.aux, skeleton);
  std::optional<denoisers::Denoiser> teacher;
  if (cell.aux) {
    denoisers::DenoiserConfig teacher_cfg = student_cfg;
    teacher_cfg.role = denoisers::Role::teacher;
    teacher_cfg.aux_kind = cell.aux;
    teacher.emplace(teacher_cfg, root.fork(2).next_u64());
    const auto [mean, sd] = cotrain::aux_stats(samples);
    teacher->set_aux_stats(mean, sd);
  }
  cotrain::TrainConfig train = setup.train;
  train.seed = root.fork(3).next_u64();
  train.lambda = cell.lambda;
  cotrain::Trainer trainer(train, std::move(student), std::move(teacher), std::move(samples));
  trainer.run();

  CellResult result;
  result.spec = cell;
  result.history = trainer.history();
  const auto sched = diffusion::build_schedule(train.diffusion_steps, train.schedule);
  const auto reference = motions(data, data.manifest.test);
  evalkit::EvalConfig eval = setup.eval;
  eval.seed = root.fork(4).next_u64();
  eval.threads = 1;
  const auto student_gen = evalkit::model_generator(trainer.student(), prompts(data, data.manifest.test, {}, skeleton),
                                                    eval.sigma, sched, data.manifest.stats);
  result.student = evalkit::evaluate(student_gen, classifier, reference, eval);
  if (trainer.teacher() && setup.evaluate_teacher) {
    const auto teacher_gen = evalkit::model_generator(*trainer.teacher(),
                                                      prompts(data, data.manifest.test, cell.aux, skeleton),
                                                      eval.sigma, sched, data.manifest.stats);
    result.teacher = evalkit::evaluate(teacher_gen, classifier, reference, eval);
  }
  return result;
}

std::vector<CellResult> run_cells(const datakit::Dataset& data, const evalkit::ActionClassifier& classifier,
                                  const Setup& setup, const std::vector<CellSpec>& cells, int workers) {
  std::vector<CellResult> out(cells.size());
  evalkit::parallel_for(static_cast<int>(cells.size()), workers,
                        [&](int i) { out[i] = run_cell(data, classifier, setup, cells[i]); });
  return out;
}

std::vector<CellSpec> cond_type_grid(double lambda, std::uint64_t seed) {
  std::vector<CellSpec> cells{{"no_teacher", std::nullopt, 0.0, seed}};
  for (AuxKind k : denoisers::kAllAuxKinds) cells.push_back({denoisers::to_string(k), k, lambda, seed});
  return cells;
}

std::vector<CellSpec> lambda_grid(AuxKind aux, const std::vector<double>& lambdas, std::uint64_t seed) {
  if (lambdas.empty()) throw std::invalid_argument("lambda grid is empty");
  std::vector<CellSpec> cells;
  for (double l : lambdas) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("lambda grid values must be finite and >= 0");
    std::ostringstream name;
    name << "lambda=" << l;
    cells.push_back({name.str(), aux, l, seed});
  }
  return cells;
}

std::string ablation_csv_header() {
  return "setting,aux,lambda,seed,student_acc1,student_acc2,student_acc3,student_kid_x5000,student_diversity,"
         "teacher_acc3,teacher_kid_x5000,teacher_diversity";
}

std::string ablation_csv_row(const CellResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.spec.name << ',' << (r.spec.aux ? denoisers::to_string(*r.spec.aux) : "none") << ',' << r.spec.lambda << ','
     << r.spec.seed << ',' << r.student.mean.acc1 << ',' << r.student.mean.acc2 << ',' << r.student.mean.acc3 << ','
     << r.student.mean.kid_x5000 << ',' << r.student.mean.diversity;
  if (r.teacher) {
    os << ',' << r.teacher->mean.acc3 << ',' << r.teacher->mean.kid_x5000 << ',' << r.teacher->mean.diversity;
  } else {
    os << ",,,";
  }
  return os.str();
}

}  // namespace tshamo::pipeline
