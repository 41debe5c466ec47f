// Glue shared by the command-line tool and the acceptance suite: classifier
// training, train-then-evaluate ablation cells and their tables.
#ifndef TSHAMO_PIPELINE_HPP
#define TSHAMO_PIPELINE_HPP

#include "tshamo/cotrain.hpp"
#include "tshamo/evalkit.hpp"

#include <optional>
#include <string>
#include <vector>

namespace tshamo::pipeline {

using denoisers::AuxKind;

std::vector<motion::MotionSequence> motions(const datakit::Dataset& data, const std::vector<std::uint32_t>& ids);

// Test-split prompts; with an aux kind each prompt carries its auxiliary frames.
std::vector<evalkit::Prompt> prompts(const datakit::Dataset& data, const std::vector<std::uint32_t>& ids,
                                     std::optional<AuxKind> aux, const motion::HandSkeleton& skeleton);

evalkit::ActionClassifier train_classifier(const datakit::Dataset& data, evalkit::ClassifierConfig config);

// One training run. No aux kind means a student trained alone.
struct CellSpec {
  std::string name;
  std::optional<AuxKind> aux;
  double lambda = 0.3;
  std::uint64_t seed = 0;
};

struct Setup {
  denoisers::DenoiserConfig model;  // student config; the teacher copies it with its aux kind
  cotrain::TrainConfig train;
  evalkit::EvalConfig eval;
  bool evaluate_teacher = true;
};

struct CellResult {
  CellSpec spec;
  evalkit::EvalReport student;
  std::optional<evalkit::EvalReport> teacher;
  std::vector<cotrain::EpochLog> history;
};

// Model initialization and evaluation noise depend only on the cell seed, so
// cells with equal seeds differ only in what the table row names.
CellResult run_cell(const datakit::Dataset& data, const evalkit::ActionClassifier& classifier, const Setup& setup,
                    const CellSpec& cell);
// Runs cells on up to `workers` threads; results keep the input order.
std::vector<CellResult> run_cells(const datakit::Dataset& data, const evalkit::ActionClassifier& classifier,
                                  const Setup& setup, const std::vector<CellSpec>& cells, int workers);

// The five aux kinds at lambda plus the no-teacher baseline.
std::vector<CellSpec> cond_type_grid(double lambda, std::uint64_t seed);
// One cell per lambda for the given aux kind; lambda 0 is run with the teacher.
std::vector<CellSpec> lambda_grid(AuxKind aux, const std::vector<double>& lambdas, std::uint64_t seed);
inline const std::vector<double> kDefaultLambdas{0.0, 0.1, 0.3, 0.5, 1.0};

std::string ablation_csv_header();
std::string ablation_csv_row(const CellResult& result);

}  // namespace tshamo::pipeline

#endif
