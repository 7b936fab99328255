#pragma once

#include <vector>

#include "cpkd/common.hpp"

namespace cpkd {

// Cumulative signal-retention schedule for the denoising process.
// lambda[t] is the fraction of signal variance kept after t corruption
// steps; lambda[0] == 1 exactly and the sequence is strictly decreasing.
struct NoiseSchedule {
  int total_steps{0};          // S
  std::vector<double> lambda;  // S+1 entries
  double eta{0.0};             // stochasticity of the reverse update, in [0,1]

  double lam(int t) const;  // bounds-checked lookup
};

// Cosine schedule with offset 0.008, normalized so lambda(0) == 1. Raw
// values are floored near 1e-5; the floor decays by a factor (1 + (S-t)*1e-6)
// so that clamping cannot introduce ties and the sequence stays strictly
// decreasing.
NoiseSchedule make_schedule(int total_steps, double eta = 0.0);

// One-hot label rows mapped to the [-1, 1] working range (2*Y0 - 1).
// Rows that are not exactly one-hot raise ValidationError.
Mat scale_labels(const Mat& y0_one_hot);

// Probability rows mapped to the same [-1, 1] range (2*P - 1); used when a
// predicted distribution re-enters the reverse update.
Mat scale_probs(const Mat& probs);

// Corrupt a scaled sequence to step t: sqrt(lam(t))*x0 + sqrt(1-lam(t))*eps.
// t == 0 is the identity endpoint and is accepted for testing.
Mat forward_diffuse(const Mat& x0_scaled, int t, const Mat& eps, const NoiseSchedule& sched);

// Deterministic-by-default reverse update from step t to t_prev (< t) given
// the current iterate and the model's scaled x0 estimate. `noise` is only
// consulted when the schedule's eta is positive.
Mat ddim_step(const Mat& y_t, const Mat& x0_pred_scaled, int t, int t_prev, const NoiseSchedule& sched,
              const Mat* noise = nullptr);

// Descending inference grid: `steps` values uniformly spaced on [1, S]
// (duplicates merged); the reverse pass finishes with a final hop to 0.
std::vector<int> inference_time_grid(int total_steps, int steps);

}  // namespace cpkd
