#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpkd/denoiser.hpp"
#include "cpkd/losses.hpp"
#include "cpkd/masking.hpp"
#include "cpkd/metrics.hpp"
#include "cpkd/rng.hpp"
#include "cpkd/schedule.hpp"
#include "cpkd/synth.hpp"

namespace cpkd {

struct TrainConfig {
  std::size_t total_steps{1000};
  double lr{5e-4};
  std::size_t batch{4};
  std::size_t epochs{60};
  LossWeights weights{};
  double gamma{0.5};            // smoothing temperature of the rule penalty
  double sigma_boundary{2.0};   // width of the soft boundary targets
  std::uint64_t seed{1};
  std::vector<MaskKind> mask_strategies{MaskKind::None_, MaskKind::Global, MaskKind::Transition,
                                        MaskKind::Relation};
  bool aux_supervision{true};  // encoder head trained with ce + smo + pl
  std::size_t patience{10};    // early stop on val macro-Jaccard
  std::size_t enc_layers{6};
  std::size_t dec_layers{4};
  std::size_t hidden{32};
  std::size_t val_steps{8};  // reverse steps for the validation pass
  unsigned batch_threads{0};  // parallel samples per step; 0 = hardware
};

struct InferConfig {
  std::size_t steps{8};
  double eta{0.0};
  std::uint64_t seed{7};
  MaskKind mask{MaskKind::None_};  // None_ or Global; T/R need ground truth
};

struct Sequence {
  int id{0};
  std::vector<int> labels;
  Mat features;
};

Sequence load_sequence(const std::string& dataset_dir, const DatasetEntry& entry, int classes, int feat_dim);
std::vector<Sequence> load_split(const std::string& dataset_dir, const Manifest& manifest,
                                 const std::string& split);

// --- optimization ----------------------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  std::size_t step{0};
};

// Bias-corrected adaptive-moment update, beta = (0.9, 0.999), eps = 1e-8,
// applied in place.
void optimizer_step(DenoiserParams& params, const std::vector<double>& grads, AdamState& state, double lr);

struct TrainStepResult {
  double loss{0.0};
  std::vector<double> grads;
};

// One optimization step: per sample, encode, corrupt the scaled labels at a
// uniformly drawn step, gate the condition with a sampled mask, decode, and
// accumulate the composite loss (plus the auxiliary encoder objective when
// enabled), averaged over the batch. Per-sample randomness is drawn
// sequentially (step, noise, mask) before any parallel evaluation, and
// gradients merge in sample order, so results do not depend on threading.
TrainStepResult train_step(const DenoiserParams& params, const std::vector<const Sequence*>& batch,
                           const TrainConfig& cfg, const NoiseSchedule& sched,
                           const std::vector<Formula>& rules, Rng& rng);

struct TrainResult {
  DenoiserParams params;  // best-validation parameters (final if no val set)
  double best_val_jaccard{0.0};
  std::size_t epochs_run{0};
  std::vector<double> epoch_losses;
  std::vector<double> val_jaccards;  // one entry per epoch with a val pass
};

TrainResult train(const std::vector<Sequence>& train_set, const std::vector<Sequence>& val_set,
                  const TrainConfig& cfg, const std::vector<Formula>& rules, std::size_t feat_dim,
                  std::size_t classes);

// --- inference ---------------------------------------------------------------

struct InferResult {
  Mat probs;                   // final per-frame distribution
  std::vector<Mat> trajectory; // decoded distribution at each grid step
};

// Reverse sampling from seeded standard-normal noise down the descending
// step grid; deterministic when eta == 0.
InferResult infer(const DenoiserParams& params, const Mat& features, const NoiseSchedule& sched,
                  const InferConfig& cfg);
// Analysis variant with an explicit condition mask (e.g. ground-truth-based
// transition/relation masks).
InferResult infer(const DenoiserParams& params, const Mat& features, const NoiseSchedule& sched,
                  const InferConfig& cfg, const Mask& mask);

// --- experiment harness --------------------------------------------------------

struct ExperimentConfig {
  std::string data_dir;    // [data] dir, holds manifest.txt
  std::string rules_path;  // [data] rules; empty = built-in rule set
  TrainConfig train;
  InferConfig infer;
  std::string out_dir;  // [output] dir
};

// Line-oriented config with [data]/[model]/[train]/[weights]/[infer]/[output]
// sections of key=value pairs; '#' starts a comment. Unknown keys raise.
ExperimentConfig parse_experiment_text(const std::string& text);
ExperimentConfig parse_experiment_config(const std::string& path);

// Trains on the train split with val early stopping, then writes into
// out_dir: model.ckpt, report.txt, and one ribbons_<id>.csv per test
// sequence. Test files are only read after training finishes. Returns the
// report. The report carries no timing, so equal seeds give byte-identical
// artifacts.
Report run_experiment(const ExperimentConfig& cfg);

}  // namespace cpkd
