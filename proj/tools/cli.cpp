#include "cli.hpp"

#include "CLI11.hpp"
#include "tshamo/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace tshamo::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json classifier_json(const evalkit::ClassifierConfig& c) {
  return {{"hidden", c.hidden}, {"kernel", c.kernel}, {"epochs", c.epochs},
          {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed}};
}

evalkit::ClassifierConfig classifier_from_json(const json& j) {
  evalkit::ClassifierConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.kernel = j.value("kernel", c.kernel);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::optional<denoisers::AuxKind> parse_cond(const std::string& name) {
  if (name == "none") return std::nullopt;
  return denoisers::parse_aux_kind(name);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Per-run bookkeeping: the resolved config and a deterministic log.
class Run {
 public:
  Run(const std::string& command, const std::vector<std::string>& args, const fs::path& out, const json& config)
      : out_(out) {
    fs::create_directories(out_);
    write_text(out_ / "resolved_config.json", config.dump(2) + "\n");
    log_ << "command: " << command << "\n";
    log_ << "args:";
    for (const auto& a : args) log_ << ' ' << a;
    log_ << "\n";
    flush();
  }
  void note(const std::string& line) {
    log_ << line << "\n";
    flush();
  }
  const fs::path& dir() const { return out_; }

 private:
  void flush() { write_text(out_ / "run.log", log_.str()); }
  fs::path out_;
  std::ostringstream log_;
};

struct Common {
  std::string config_path, out, data;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c, bool needs_data) {
  app->add_option("--config", c.config_path, "JSON config merged over the defaults")->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "Output directory")->required();
  app->add_option("--seed", c.seed, "Random seed");
  app->add_option("--override", c.overrides, "Dotted key=value applied to the config (repeatable)");
  if (needs_data) app->add_option("--data", c.data, "Dataset directory")->required();
}

json resolve(const Common& c) {
  json config = default_config();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    config.merge_patch(json::parse(in));
  }
  for (const auto& o : c.overrides) apply_override(config, o);
  if (c.seed) config["seed"] = *c.seed;
  return config;
}

datakit::Dataset load_data(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw std::runtime_error("no dataset found in " + dir);
  return datakit::read_dataset(dir);
}

denoisers::DenoiserConfig model_for(const json& config, const datakit::Dataset& data) {
  denoisers::DenoiserConfig m = denoisers::config_from_json(config.at("model"));
  m.role = denoisers::Role::student;
  m.aux_kind.reset();
  m.num_labels = data.manifest.num_classes;
  m.max_len = data.manifest.max_frames;
  m.validate();
  return m;
}

evalkit::EvalConfig eval_for(const json& config) {
  evalkit::EvalConfig e;
  e.runs = config.at("eval").value("runs", e.runs);
  e.sigma = config.at("eval").value("sigma", e.sigma);
  e.pair_count = config.at("eval").value("pair_count", e.pair_count);
  e.seed = config.value("seed", std::uint64_t{0});
  return e;
}

int cmd_synth(const Common& c, const std::vector<std::string>& args, std::ostream& out) {
  const json config = resolve(c);
  const auto spec = datakit::spec_from_json(config.at("data"));
  Run run("synth", args, c.out, config);
  const auto data = datakit::generate_synthetic_dataset(spec, config.at("seed").get<std::uint64_t>());
  datakit::write_dataset(data, c.out);
  run.note("sequences: " + std::to_string(data.records.size()));
  out << "wrote " << data.records.size() << " sequences to " << c.out << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::vector<std::string>& args, std::optional<double> lambda,
              std::optional<std::string> cond_type, std::optional<std::string> backbone, const std::string& resume,
              std::ostream& out) {
  json config = resolve(c);
  if (lambda) config["train"]["lambda"] = *lambda;
  if (cond_type) config["cond_type"] = *cond_type;
  if (backbone) config["model"]["backbone"] = *backbone;
  const auto data = load_data(c.data);
  const auto model = model_for(config, data);
  const auto aux = parse_cond(config.at("cond_type"));
  cotrain::TrainConfig train = cotrain::train_config_from_json(config.at("train"));
  const Rng root(config.at("seed").get<std::uint64_t>());
  train.seed = root.fork(3).next_u64();
  const int every = config.at("checkpoint_every");
  Run run("train", args, c.out, config);

  denoisers::Denoiser student(model, root.fork(1).next_u64());
  auto samples = cotrain::prepare_samples(data, data.manifest.train, aux, motion::default_skeleton());
  std::optional<denoisers::Denoiser> teacher;
  if (aux) {
    auto tc = model;
    tc.role = denoisers::Role::teacher;
    tc.aux_kind = aux;
    teacher.emplace(tc, root.fork(2).next_u64());
    const auto [mean, sd] = cotrain::aux_stats(samples);
    teacher->set_aux_stats(mean, sd);
  }
  cotrain::Trainer trainer(train, std::move(student), std::move(teacher), std::move(samples));
  if (!resume.empty()) {
    trainer.restore(datakit::load_checkpoint(resume));
    run.note("resumed at step " + std::to_string(trainer.global_step()));
  }

  const fs::path csv_path = run.dir() / "loss.csv";
  {
    std::ofstream csv(csv_path, std::ios::trunc);
    csv << cotrain::csv_header() << "\n";
    for (const auto& e : trainer.history()) csv << cotrain::csv_row(e) << "\n";
  }
  trainer.run([&](const cotrain::EpochLog& e) {
    std::ofstream(csv_path, std::ios::app) << cotrain::csv_row(e) << "\n";
    if (every > 0 && e.epoch % every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_epoch_%04d.ckpt", e.epoch);
      datakit::save_checkpoint(trainer.checkpoint(), (run.dir() / name).string());
    }
  });
  datakit::save_checkpoint(trainer.checkpoint(), (run.dir() / "final.ckpt").string());
  auto student_ck = cotrain::student_checkpoint(trainer.student(), data.manifest.stats);
  student_ck.meta["train_config"] = cotrain::to_json(trainer.config());
  datakit::save_checkpoint(student_ck, (run.dir() / "student.ckpt").string());
  const auto& last = trainer.history().back();
  run.note("steps: " + std::to_string(trainer.global_step()));
  run.note("final loss_s_gt: " + std::to_string(last.loss_s_gt));
  out << "trained " << trainer.global_step() << " steps; final L_S->GT " << last.loss_s_gt << "\n";
  return 0;
}

motion::NormStats stats_for(const datakit::Checkpoint& ck, const datakit::Dataset& data) {
  if (!ck.meta.contains("norm_mean")) return data.manifest.stats;
  motion::NormStats s;
  const auto mean = ck.meta.at("norm_mean").get<std::vector<double>>();
  const auto sd = ck.meta.at("norm_std").get<std::vector<double>>();
  if (mean.size() != motion::kFrameWidth || sd.size() != motion::kFrameWidth) {
    throw std::runtime_error("checkpoint: malformed normalization statistics");
  }
  for (int i = 0; i < motion::kFrameWidth; ++i) {
    s.mean[i] = mean[i];
    s.std[i] = sd[i];
  }
  return s;
}

int cmd_eval(const Common& c, const std::vector<std::string>& args, const std::string& checkpoint,
             std::optional<int> runs, std::optional<double> sigma, std::ostream& out) {
  json config = resolve(c);
  if (runs) config["eval"]["runs"] = *runs;
  if (sigma) config["eval"]["sigma"] = *sigma;
  const auto data = load_data(c.data);
  const auto ck = datakit::load_checkpoint(checkpoint);
  const denoisers::Denoiser student = cotrain::load_student(ck);
  if (student.config().num_labels != data.manifest.num_classes || student.config().max_len != data.manifest.max_frames) {
    throw std::runtime_error("checkpoint does not match the dataset's classes or frame count");
  }
  Run run("eval", args, c.out, config);
  const auto classifier = pipeline::train_classifier(data, classifier_from_json(config.at("classifier")));
  datakit::save_checkpoint(classifier.checkpoint(), (run.dir() / "classifier.ckpt").string());
  const auto test = pipeline::motions(data, data.manifest.test);
  run.note("classifier test acc@1: " + std::to_string(classifier.accuracy(test, 1)));

  const evalkit::EvalConfig eval = eval_for(config);
  const auto train = cotrain::train_config_from_json(ck.meta.contains("train_config") ? ck.meta.at("train_config")
                                                                                      : config.at("train"));
  const auto sched = diffusion::build_schedule(train.diffusion_steps, train.schedule);
  const auto gen = evalkit::model_generator(student, pipeline::prompts(data, data.manifest.test, {}, {}), eval.sigma,
                                            sched, stats_for(ck, data));
  const auto report = evalkit::evaluate(gen, classifier, test, eval);
  json j = evalkit::to_json(report);
  j["checkpoint"] = fs::path(checkpoint).filename().string();
  j["diffusion_steps"] = train.diffusion_steps;
  write_text(run.dir() / "eval.json", j.dump(2) + "\n");
  write_text(run.dir() / "eval.csv", evalkit::csv_header() + "\n" + evalkit::csv_rows(report));
  run.note("acc@3 mean: " + std::to_string(report.mean.acc3));
  out << "acc@1/2/3 " << report.mean.acc1 << " " << report.mean.acc2 << " " << report.mean.acc3 << ", kid_x5000 "
      << report.mean.kid_x5000 << ", diversity " << report.mean.diversity << "\n";
  return 0;
}

int cmd_ablate(const Common& c, const std::vector<std::string>& args, const std::string& kind,
               const std::string& grid_text, std::optional<std::string> cond_type, std::optional<std::string> backbone,
               std::optional<int> runs, std::optional<double> sigma, std::ostream& out) {
  json config = resolve(c);
  if (runs) config["eval"]["runs"] = *runs;
  if (sigma) config["eval"]["sigma"] = *sigma;
  if (backbone) config["model"]["backbone"] = *backbone;
  if (kind != "cond_type" && kind != "lambda") throw std::invalid_argument("unknown ablation kind '" + kind + "'");
  const auto grid = split(grid_text, ',');
  const auto base_seed = config.at("seed").get<std::uint64_t>();
  const int num_seeds = config.at("ablation").at("num_seeds");
  if (num_seeds < 1) throw std::invalid_argument("ablation.num_seeds must be positive");

  std::vector<pipeline::CellSpec> cells;
  for (int s = 0; s < num_seeds; ++s) {
    const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(s);
    if (kind == "cond_type") {
      const double lambda = config.at("train").at("lambda");
      auto all = pipeline::cond_type_grid(lambda, seed);
      if (grid.empty()) {
        cells.insert(cells.end(), all.begin(), all.end());
        continue;
      }
      for (const auto& g : grid) {
        const auto it = std::find_if(all.begin(), all.end(), [&](const auto& cell) { return cell.name == g; });
        if (it == all.end()) throw std::invalid_argument("unknown condition type '" + g + "'");
        cells.push_back(*it);
      }
    } else {
      std::vector<double> lambdas = pipeline::kDefaultLambdas;
      if (!grid.empty()) {
        lambdas.clear();
        for (const auto& g : grid) lambdas.push_back(std::stod(g));
      }
      const std::string aux_name = cond_type ? *cond_type : config.at("ablation").at("lambda_aux").get<std::string>();
      const auto aux = parse_cond(aux_name);
      if (!aux) throw std::invalid_argument("the lambda ablation needs an auxiliary condition type");
      auto cells_for_seed = pipeline::lambda_grid(*aux, lambdas, seed);
      cells.insert(cells.end(), cells_for_seed.begin(), cells_for_seed.end());
    }
  }
  const auto data = load_data(c.data);
  pipeline::Setup setup;
  setup.model = model_for(config, data);
  setup.train = cotrain::train_config_from_json(config.at("train"));
  setup.eval = eval_for(config);
  setup.evaluate_teacher = kind == "cond_type";
  Run run("ablate", args, c.out, config);
  const auto classifier = pipeline::train_classifier(data, classifier_from_json(config.at("classifier")));
  const auto results = pipeline::run_cells(data, classifier, setup, cells, evalkit::worker_count());
  std::string csv = pipeline::ablation_csv_header() + "\n";
  for (const auto& r : results) csv += pipeline::ablation_csv_row(r) + "\n";
  write_text(run.dir() / "ablation.csv", csv);
  run.note("cells: " + std::to_string(results.size()));
  out << csv;
  return 0;
}

}  // namespace

json default_config() {
  json c;
  c["seed"] = 0;
  c["data"] = datakit::to_json(datakit::SyntheticSpec{});
  c["model"] = denoisers::to_json(denoisers::DenoiserConfig{});
  c["train"] = cotrain::to_json(cotrain::TrainConfig{});
  c["eval"] = {{"runs", 20}, {"sigma", 10.0}, {"pair_count", 300}};
  c["classifier"] = classifier_json(evalkit::ClassifierConfig{});
  c["cond_type"] = "mano_plus_contact";
  c["checkpoint_every"] = 50;
  c["ablation"] = {{"num_seeds", 1}, {"lambda_aux", "joints_3d"}};
  return c;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must look like key=value: " + assignment);
  const auto keys = split(assignment.substr(0, eq), '.');
  const std::string text = assignment.substr(eq + 1);
  json* node = &config;
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->contains(keys[i])) throw std::invalid_argument("unknown config key in override: " + assignment);
    node = &(*node)[keys[i]];
  }
  if (!node->is_object() || !node->contains(keys.back())) {
    throw std::invalid_argument("unknown config key in override: " + assignment);
  }
  json value = json::parse(text, nullptr, false);
  (*node)[keys.back()] = value.is_discarded() ? json(text) : value;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text-conditioned hand motion diffusion with teacher-student co-training", "tshamo"};
  app.require_subcommand(1);
  app.allow_extras(false);

  Common synth_c, train_c, eval_c, ablate_c;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset");
  add_common(synth, synth_c, false);

  auto* train = app.add_subcommand("train", "Train a student, optionally co-trained with a teacher");
  add_common(train, train_c, true);
  std::optional<double> lambda;
  std::optional<std::string> train_cond, train_backbone;
  std::string resume;
  train->add_option("--lambda", lambda, "Weight of the student-to-teacher loss");
  train->add_option("--cond-type", train_cond, "Teacher auxiliary condition, or none");
  train->add_option("--backbone", train_backbone, "transformer_encdec or conv_unet");
  train->add_option("--resume", resume, "Training checkpoint to continue from")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluate a student checkpoint");
  add_common(eval, eval_c, true);
  std::string checkpoint;
  std::optional<int> eval_runs, ablate_runs;
  std::optional<double> eval_sigma, ablate_sigma;
  eval->add_option("--checkpoint", checkpoint, "Student or training checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--runs", eval_runs, "Evaluation runs");
  eval->add_option("--sigma", eval_sigma, "Guidance scale");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate an ablation grid");
  add_common(ablate, ablate_c, true);
  std::string kind, grid;
  std::optional<std::string> ablate_cond, ablate_backbone;
  ablate->add_option("--kind", kind, "cond_type or lambda")->required();
  ablate->add_option("--grid", grid, "Comma-separated settings; defaults to the full grid");
  ablate->add_option("--cond-type", ablate_cond, "Auxiliary condition for the lambda sweep");
  ablate->add_option("--backbone", ablate_backbone, "transformer_encdec or conv_unet");
  ablate->add_option("--runs", ablate_runs, "Evaluation runs per cell");
  ablate->add_option("--sigma", ablate_sigma, "Guidance scale");

  auto* skeleton = app.add_subcommand("skeleton", "Hand skeleton utilities");
  skeleton->require_subcommand(1);
  auto* exp = skeleton->add_subcommand("export", "Write the default skeleton as JSON");
  std::string skeleton_out;
  exp->add_option("--out", skeleton_out, "Output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_c, args, out);
    if (train->parsed()) return cmd_train(train_c, args, lambda, train_cond, train_backbone, resume, out);
    if (eval->parsed()) return cmd_eval(eval_c, args, checkpoint, eval_runs, eval_sigma, out);
    if (ablate->parsed()) {
      return cmd_ablate(ablate_c, args, kind, grid, ablate_cond, ablate_backbone, ablate_runs, ablate_sigma, out);
    }
    if (exp->parsed()) {
      fs::create_directories(skeleton_out);
      const auto path = fs::path(skeleton_out) / "hand_skeleton.json";
      motion::save_skeleton(motion::default_skeleton(), path.string());
      out << "wrote " << path.string() << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace tshamo::cli
