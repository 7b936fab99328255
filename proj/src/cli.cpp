#include "cpkd/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "cpkd/denoiser.hpp"
#include "cpkd/logic.hpp"
#include "cpkd/masking.hpp"
#include "cpkd/metrics.hpp"
#include "cpkd/pipeline.hpp"
#include "cpkd/schedule.hpp"
#include "cpkd/synth.hpp"
#include "cpkd/verify.hpp"

namespace cpkd {

namespace {

struct GenDataOpts {
  std::string out;
  std::uint64_t seed{1};
  int n_train{200}, n_val{20}, n_test{40};
  int tmin{150}, tmax{300};
  int feat_dim{16};
  double noise{0.6};
  int blur{6};
  double repeat{0.2};
  double skip{0.0};
};

struct TrainOpts {
  std::string config;
  std::string data_override;
  std::string out_override;
};

struct InferOpts {
  std::string ckpt;
  std::string features;
  std::string labels;
  std::string out;
  std::size_t steps{8};
  double eta{0.0};
  std::uint64_t seed{7};
  std::string mask{"N"};
};

struct EvalOpts {
  std::string pred;
  std::string labels;
  std::string rules;
  std::string out;
  int window{10};
};

struct CheckLogicOpts {
  std::string rules;
  std::string labels;
  std::string pred;
};

struct GradCheckOpts {
  std::string component{"all"};
  std::uint64_t seed{1};
  int trials{5};
  double tolerance{1e-4};
};

std::string fmt_real(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

void cmd_gen_data(const GenDataOpts& o) {
  WorkflowSpec spec;
  spec.frames_min = o.tmin;
  spec.frames_max = o.tmax;
  spec.feat_dim = o.feat_dim;
  spec.noise_std = o.noise;
  spec.boundary_blur_w = o.blur;
  spec.repeat_block = o.repeat;
  spec.skip_block = o.skip;
  Manifest m = gen_dataset(spec, o.n_train, o.n_val, o.n_test, o.seed, o.out);
  std::cout << "wrote " << m.entries.size() << " sequences to " << o.out << "\n"
            << "baseline_accuracy=" << fmt_real(m.baseline_accuracy) << "\n"
            << "mean_radius=" << fmt_real(m.mean_radius) << "\n";
}

void cmd_train(const TrainOpts& o) {
  ExperimentConfig cfg = parse_experiment_config(o.config);
  if (!o.data_override.empty()) cfg.data_dir = o.data_override;
  if (!o.out_override.empty()) cfg.out_dir = o.out_override;
  Report report = run_experiment(cfg);
  std::cout << format_report(report);
}

void cmd_infer(const InferOpts& o) {
  DenoiserParams params = load_checkpoint(o.ckpt);
  Mat features = read_features(o.features);
  InferConfig cfg;
  cfg.steps = o.steps;
  cfg.eta = o.eta;
  cfg.seed = o.seed;
  if (o.mask.size() != 1) throw ValidationError("infer: --mask takes a single letter (N or G)");
  cfg.mask = mask_kind_from_char(o.mask[0]);
  NoiseSchedule sched = make_schedule(static_cast<int>(params.dims.total_steps), o.eta);
  InferResult r = infer(params, features, sched, cfg);

  Ribbons rb;
  rb.pred = argmax_rows(r.probs);
  rb.probs = r.probs;
  if (!o.labels.empty()) {
    auto [labels, classes] = read_labels(o.labels);
    if (classes != static_cast<int>(params.dims.classes))
      throw ValidationError("infer: label file classes do not match the checkpoint");
    if (labels.size() != features.rows)
      throw ValidationError("infer: label file length does not match the features");
    rb.truth = std::move(labels);
  }
  write_ribbons(rb, o.out);
  std::cout << "wrote " << rb.pred.size() << " frames to " << o.out << "\n";
}

void cmd_eval(const EvalOpts& o) {
  Ribbons rb = read_ribbons(o.pred);
  std::vector<int> truth = rb.truth;
  int classes = static_cast<int>(rb.probs.cols);
  if (!o.labels.empty()) {
    auto [labels, file_classes] = read_labels(o.labels);
    truth = std::move(labels);
    classes = file_classes;
  }
  if (truth.empty()) throw ValidationError("eval: no ground truth (pass --labels or a CSV with true labels)");
  if (truth.size() != rb.pred.size())
    throw ValidationError("eval: ground truth length does not match the predictions");

  EvalReport er = relaxed_metrics(rb.pred, truth, o.window);
  Report report;
  report.emplace_back("frames", std::to_string(rb.pred.size()));
  report.emplace_back("window", std::to_string(o.window));
  report.emplace_back("accuracy", fmt_real(er.accuracy));
  report.emplace_back("macro_precision", fmt_real(er.macro_precision));
  report.emplace_back("macro_recall", fmt_real(er.macro_recall));
  report.emplace_back("macro_jaccard", fmt_real(er.macro_jaccard));
  report.emplace_back("relaxed_accuracy", fmt_real(er.relaxed_accuracy));
  report.emplace_back("relaxed_macro_precision", fmt_real(er.relaxed_macro_precision));
  report.emplace_back("relaxed_macro_recall", fmt_real(er.relaxed_macro_recall));
  report.emplace_back("relaxed_macro_jaccard", fmt_real(er.relaxed_macro_jaccard));

  std::vector<Formula> rules;
  if (!o.rules.empty()) rules = parse_formula_file(o.rules, classes == 8 ? esd_phase_table() : PhaseTable(classes));
  else if (classes == 8) rules = default_rules();
  if (!rules.empty()) {
    report.emplace_back("violations", std::to_string(count_violations(rb.pred, rules)));
    report.emplace_back("rules", std::to_string(rules.size()));
  }
  if (o.out.empty()) std::cout << format_report(report);
  else write_report(report, o.out);
}

void cmd_check_logic(const CheckLogicOpts& o) {
  if (o.labels.empty() == o.pred.empty())
    throw ValidationError("check-logic: pass exactly one of --labels or --pred");
  std::vector<int> labels;
  int classes = 8;
  if (!o.labels.empty()) {
    auto [l, c] = read_labels(o.labels);
    labels = std::move(l);
    classes = c;
  } else {
    Ribbons rb = read_ribbons(o.pred);
    labels = rb.pred;
    classes = static_cast<int>(rb.probs.cols);
  }
  PhaseTable table = classes == 8 ? esd_phase_table() : PhaseTable(classes);
  std::vector<Formula> rules = o.rules.empty() ? default_rules() : parse_formula_file(o.rules, table);
  if (o.rules.empty() && classes != 8)
    throw ValidationError("check-logic: built-in rules need 8 classes; pass --rules");

  int sat = 0;
  for (const auto& f : rules) {
    bool ok = eval_hard(f, labels, 0);
    sat += ok ? 1 : 0;
    std::cout << (ok ? "SAT   " : "UNSAT ") << to_string(f) << "\n";
  }
  std::cout << "satisfied=" << sat << "/" << rules.size() << "\n";
}

void cmd_grad_check(const GradCheckOpts& o) {
  if (o.trials < 1) throw ValidationError("grad-check: --trials must be >= 1");
  std::vector<std::string> names;
  if (o.component == "all") names = gradcheck_components();
  else names.push_back(o.component);

  bool ok = true;
  for (const auto& name : names) {
    double worst = 0.0;
    for (int i = 0; i < o.trials; ++i)
      worst = std::max(worst, gradcheck_component(name, o.seed + static_cast<std::uint64_t>(i)));
    bool pass = worst < o.tolerance;
    ok = ok && pass;
    std::cout << name << ": max_rel_err=" << fmt_real(worst) << (pass ? " ok" : " FAIL") << "\n";
  }
  if (!ok) throw ValidationError("grad-check: tolerance " + fmt_real(o.tolerance) + " exceeded");
}

struct Cli {
  CLI::App app{"Diffusion-based sequence labeler with differentiable temporal-logic rules"};
  GenDataOpts gen;
  TrainOpts train;
  InferOpts infer;
  EvalOpts eval;
  CheckLogicOpts check;
  GradCheckOpts grad;

  Cli() {
    app.require_subcommand(1);

    auto* g = app.add_subcommand("gen-data", "Generate a synthetic workflow dataset");
    g->add_option("--out", gen.out, "Output dataset directory")->required();
    g->add_option("--seed", gen.seed, "Dataset seed");
    g->add_option("--train", gen.n_train, "Training sequences");
    g->add_option("--val", gen.n_val, "Validation sequences");
    g->add_option("--test", gen.n_test, "Test sequences");
    g->add_option("--tmin", gen.tmin, "Minimum frames per sequence");
    g->add_option("--tmax", gen.tmax, "Maximum frames per sequence");
    g->add_option("--feat-dim", gen.feat_dim, "Feature dimension");
    g->add_option("--noise", gen.noise, "Feature noise standard deviation");
    g->add_option("--blur", gen.blur, "Boundary cross-fade width in frames");
    g->add_option("--repeat", gen.repeat, "Probability of repeating the dissection block");
    g->add_option("--skip", gen.skip, "Probability of skipping the dissection block");
    g->callback([this] { cmd_gen_data(gen); });

    auto* t = app.add_subcommand("train", "Train a model and evaluate it per the experiment config");
    t->add_option("--config", train.config, "Experiment config file")->required();
    t->add_option("--data", train.data_override, "Override the [data] dir from the config");
    t->add_option("--out", train.out_override, "Override the [output] dir from the config");
    t->callback([this] { cmd_train(train); });

    auto* i = app.add_subcommand("infer", "Run reverse sampling on a feature file");
    i->add_option("--ckpt", infer.ckpt, "Model checkpoint")->required();
    i->add_option("--features", infer.features, "Feature file")->required();
    i->add_option("--out", infer.out, "Output prediction CSV")->required();
    i->add_option("--labels", infer.labels, "Optional label file for the true column");
    i->add_option("--steps", infer.steps, "Reverse sampling steps");
    i->add_option("--eta", infer.eta, "Reverse-update stochasticity in [0,1]");
    i->add_option("--seed", infer.seed, "Noise seed");
    i->add_option("--mask", infer.mask, "Condition mask: N (keep) or G (hide all)");
    i->callback([this] { cmd_infer(infer); });

    auto* e = app.add_subcommand("eval", "Score a prediction CSV against ground truth");
    e->add_option("--pred", eval.pred, "Prediction CSV")->required();
    e->add_option("--labels", eval.labels, "Label file (defaults to the CSV's true column)");
    e->add_option("--rules", eval.rules, "Formula file for violation counting");
    e->add_option("--window", eval.window, "Relaxed-protocol window in frames");
    e->add_option("--out", eval.out, "Write the report here instead of stdout");
    e->callback([this] { cmd_eval(eval); });

    auto* c = app.add_subcommand("check-logic", "Evaluate formulas against a label sequence");
    c->add_option("--rules", check.rules, "Formula file (defaults to the built-in rule set)");
    c->add_option("--labels", check.labels, "Label file to check");
    c->add_option("--pred", check.pred, "Prediction CSV to check instead of a label file");
    c->callback([this] { cmd_check_logic(check); });

    auto* v = app.add_subcommand("grad-check", "Compare analytic gradients against finite differences");
    v->add_option("--component", grad.component, "ce|smooth|boundary|logic|total|denoiser|all");
    v->add_option("--seed", grad.seed, "Base seed");
    v->add_option("--trials", grad.trials, "Random instances per component");
    v->add_option("--tolerance", grad.tolerance, "Max acceptable relative error");
    v->callback([this] { cmd_grad_check(grad); });
  }
};

}  // namespace

int run_cli(int argc, const char* const* argv) {
  Cli cli;
  try {
    cli.app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return cli.app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return cli.app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\nRun with --help for usage.\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> cli_flag_table() {
  Cli cli;
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> out;
  for (const CLI::App* sub : cli.app.get_subcommands({})) {
    std::vector<std::pair<std::string, std::string>> flags;
    for (const CLI::Option* opt : sub->get_options())
      flags.emplace_back(opt->get_name(), opt->get_description());
    out.emplace_back(sub->get_name(), std::move(flags));
  }
  return out;
}

}  // namespace cpkd
