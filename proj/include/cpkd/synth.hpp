#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cpkd/common.hpp"
#include "cpkd/rng.hpp"

namespace cpkd {

// Parameters of the synthetic workflow generator. Sequences follow
//   Preparation -> Estimation -> [Marking -> (Injection -> Incision ->
//   ESD) x k] -> Vessel_treatment -> Clips
// with lognormal per-phase durations; the bracketed dissection block repeats
// (k=2) with probability repeat_block and is skipped entirely with
// probability skip_block. Every emitted sequence satisfies the default
// ordering rules by construction.
struct PhaseDuration {
  double mu{3.0};
  double sigma{0.35};
};

struct WorkflowSpec {
  int classes{8};
  int frames_min{150};
  int frames_max{300};
  std::vector<PhaseDuration> durations;  // one per class; defaulted in ctor
  double repeat_block{0.2};
  double skip_block{0.0};
  int feat_dim{16};
  int boundary_blur_w{6};
  double noise_std{0.6};

  WorkflowSpec();
};

void validate_spec(const WorkflowSpec& spec);

// Mean of the rounded lognormal duration for one phase, exp(mu + sigma^2/2).
double duration_mean(const PhaseDuration& d);

struct SeqSample {
  std::vector<int> labels;
  Mat features;  // T x feat_dim
};

// Class feature directions on the unit sphere (rows), scaled by `radius`.
Mat class_means(const WorkflowSpec& spec, std::uint64_t mean_seed, double radius);

// Label sequence only (order + durations + resampling against the frame
// budget; at most 100 attempts, then ValidationError).
std::vector<int> gen_labels(const WorkflowSpec& spec, Rng& rng);

// Labels plus features: per-frame class mean, linearly cross-faded within
// boundary_blur_w frames of a label change, plus N(0, noise_std^2) noise.
SeqSample gen_sequence(const WorkflowSpec& spec, const Mat& means, Rng& rng);

// Accuracy of assigning each frame to the nearest class mean; the
// "per-frame linear classifier" the dataset difficulty is calibrated on.
double nearest_mean_accuracy(const std::vector<SeqSample>& samples, const Mat& means);

// --- on-disk dataset ---------------------------------------------------------

struct DatasetEntry {
  std::string split;  // "train" | "val" | "test"
  int id{0};
  std::string feat_path;   // relative to the manifest directory
  std::string label_path;  // relative to the manifest directory
};

struct Manifest {
  int classes{0};
  int feat_dim{0};
  std::uint64_t seed{0};
  std::uint64_t mean_seed{0};
  double mean_radius{0.0};
  double baseline_accuracy{0.0};
  std::vector<DatasetEntry> entries;

  std::vector<DatasetEntry> split(const std::string& name) const;
};

// Generates n_train/n_val/n_test sequences into out_dir, calibrating the
// class-mean radius so the nearest-mean baseline lands in [0.70, 0.85]
// accuracy, then writes feature/label files and "manifest.txt". Fully
// deterministic in (spec, seed); sequences are generated in parallel from
// per-index derived streams.
Manifest gen_dataset(const WorkflowSpec& spec, int n_train, int n_val, int n_test, std::uint64_t seed,
                     const std::string& out_dir);

Manifest load_manifest(const std::string& path);
void write_manifest(const Manifest& m, const std::string& path);

// Feature file: "CPKDFEAT", u32 version=1, u32 T, u32 D, T*D float32 LE.
void write_features(const Mat& features, const std::string& path);
Mat read_features(const std::string& path);

// Label file: "CPKDLABL", u32 version=1, u32 T, u32 C, T bytes of indices.
void write_labels(const std::vector<int>& labels, int classes, const std::string& path);
std::pair<std::vector<int>, int> read_labels(const std::string& path);

}  // namespace cpkd
