#pragma once

#include <vector>

#include "cpkd/common.hpp"
#include "cpkd/logic.hpp"
#include "cpkd/tensor.hpp"

namespace cpkd {

// Mixing weights of the composite training objective. A weight of exactly 0
// switches the corresponding term off entirely (it is neither evaluated nor
// taped, so it contributes no gradient and no cost).
struct LossWeights {
  double ce{0.5};
  double smo{0.025};
  double bd{0.1};
  double pl{0.1};
};

// Soft boundary supervision targets, one value per gap between adjacent
// frames (length T-1). A label change produces a Gaussian bump with peak
// exactly 1 (kernel radius ceil(4*sigma), whole-sample reflection at the
// edges); overlapping bumps are clamped into [0,1].
std::vector<double> boundary_targets(const std::vector<int>& labels, double sigma);

// Per-frame boundary indicator derived from the per-gap targets: frame i
// takes the larger of its two adjacent gap values (single gap at the ends).
// Length T for T-1 gaps; this is the input mask_transition expects.
std::vector<double> frame_boundary(const std::vector<double>& gap_targets);

// Cross-entropy, normalized over the whole T*C grid:
//   (1/(T*C)) * sum_{i,c} -Y0[i,c] * log(max(P[i,c], 1e-12)).
// Rows of P must sum to 1 within 1e-6.
Value ce_loss(const Value& probs, const Mat& y0);

// Truncated mean-squared difference of adjacent log-probabilities:
//   (1/((T-1)*C)) * sum_{i,c} min((log P[i,c] - log P[i+1,c])^2, 16),
// with the same 1e-12 floor before the log. Requires T >= 2.
Value smooth_loss(const Value& probs);

// Binary cross-entropy between the predicted boundary probability
// b_i = 1 - <P[i], P[i+1]> (clamped into [1e-7, 1-1e-7]) and the soft
// targets, averaged over the T-1 gaps.
Value boundary_loss(const Value& probs, const std::vector<double>& gap_targets);

// Component values plus their weighted sum. Terms disabled by a zero weight
// are the constant scalar 0.
struct LossTerms {
  Value ce;
  Value smo;
  Value bd;
  Value pl;
  Value total;
};

LossTerms total_loss(const Value& probs, const Mat& y0, const std::vector<double>& gap_targets,
                     const std::vector<Formula>& formulas, const LossWeights& weights, double gamma);

}  // namespace cpkd
