#include "cpkd/losses.hpp"

#include <algorithm>
#include <cmath>

namespace cpkd {

namespace {

// Whole-sample reflection of index j into [0, n). A single-element sample
// has nothing to reflect against, so every index collapses to 0.
std::size_t reflect_index(long j, long n) {
  if (n == 1) return 0;
  while (j < 0 || j >= n) {
    if (j < 0) j = -j;
    if (j >= n) j = 2 * (n - 1) - j;
  }
  return static_cast<std::size_t>(j);
}

void check_probs(const Value& probs, const char* who) {
  if (probs.shape().size() != 2)
    throw ValidationError(std::string(who) + ": probabilities must be rank-2, got " +
                          shape_str(probs.shape()));
}

}  // namespace

std::vector<double> boundary_targets(const std::vector<int>& labels, double sigma) {
  if (labels.size() < 2) throw ValidationError("boundary_targets: need at least 2 frames");
  if (!(sigma > 0.0)) throw ValidationError("boundary_targets: sigma must be positive");
  const long n = static_cast<long>(labels.size()) - 1;
  std::vector<double> change(static_cast<std::size_t>(n), 0.0);
  for (long i = 0; i < n; ++i)
    change[static_cast<std::size_t>(i)] =
        labels[static_cast<std::size_t>(i)] != labels[static_cast<std::size_t>(i) + 1] ? 1.0 : 0.0;

  const long radius = static_cast<long>(std::ceil(4.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (long d = -radius; d <= radius; ++d)
    kernel[static_cast<std::size_t>(d + radius)] =
        std::exp(-static_cast<double>(d * d) / (2.0 * sigma * sigma));

  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (long i = 0; i < n; ++i) {
    double acc = 0.0;
    for (long d = -radius; d <= radius; ++d)
      acc += kernel[static_cast<std::size_t>(d + radius)] * change[reflect_index(i + d, n)];
    out[static_cast<std::size_t>(i)] = std::min(1.0, std::max(0.0, acc));
  }
  return out;
}

std::vector<double> frame_boundary(const std::vector<double>& gap_targets) {
  if (gap_targets.empty()) throw ValidationError("frame_boundary: empty gap vector");
  const std::size_t n = gap_targets.size();
  std::vector<double> out(n + 1);
  out[0] = gap_targets[0];
  out[n] = gap_targets[n - 1];
  for (std::size_t i = 1; i < n; ++i) out[i] = std::max(gap_targets[i - 1], gap_targets[i]);
  return out;
}

Value ce_loss(const Value& probs, const Mat& y0) {
  check_probs(probs, "ce_loss");
  const std::size_t T = probs.shape()[0], C = probs.shape()[1];
  if (y0.rows != T || y0.cols != C)
    throw ValidationError("ce_loss: targets are " + std::to_string(y0.rows) + "x" + std::to_string(y0.cols) +
                          ", probabilities are " + std::to_string(T) + "x" + std::to_string(C));
  const auto& p = probs.data();
  for (std::size_t i = 0; i < T; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += p[i * C + c];
    if (std::abs(s - 1.0) > 1e-6)
      throw ValidationError("ce_loss: row " + std::to_string(i) + " sums to " + std::to_string(s));
  }
  Value y = Value::from_mat(y0);
  Value term = mul(y, log_v(max_const(probs, 1e-12)));
  return affine(sum_all(term), -1.0 / static_cast<double>(T * C), 0.0);
}

Value smooth_loss(const Value& probs) {
  check_probs(probs, "smooth_loss");
  const std::size_t T = probs.shape()[0];
  if (T < 2) throw ValidationError("smooth_loss: need at least 2 frames");
  Value lp = log_v(max_const(probs, 1e-12));
  Value d = sub(slice_rows(lp, 1, T), slice_rows(lp, 0, T - 1));
  return mean_all(min_const(mul(d, d), 16.0));
}

Value boundary_loss(const Value& probs, const std::vector<double>& gap_targets) {
  check_probs(probs, "boundary_loss");
  const std::size_t T = probs.shape()[0];
  if (T < 2) throw ValidationError("boundary_loss: need at least 2 frames");
  if (gap_targets.size() != T - 1)
    throw ValidationError("boundary_loss: " + std::to_string(gap_targets.size()) + " targets for " +
                          std::to_string(T - 1) + " gaps");
  for (std::size_t i = 0; i < gap_targets.size(); ++i)
    if (!(gap_targets[i] >= 0.0 && gap_targets[i] <= 1.0))
      throw ValidationError("boundary_loss: target " + std::to_string(i) + " outside [0,1]");

  Value a = slice_rows(probs, 0, T - 1);
  Value b_next = slice_rows(probs, 1, T);
  Value dots = sum(mul(a, b_next), 1);
  Value b = clamp(affine(dots, -1.0, 1.0), 1e-7, 1.0 - 1e-7);

  std::vector<double> g = gap_targets, gc(gap_targets.size());
  for (std::size_t i = 0; i < gc.size(); ++i) gc[i] = 1.0 - g[i];
  Value gv = Value::constant(std::move(g), {T - 1});
  Value gcv = Value::constant(std::move(gc), {T - 1});
  Value term = add(mul(gv, log_v(b)), mul(gcv, log_v(affine(b, -1.0, 1.0))));
  return affine(mean_all(term), -1.0, 0.0);
}

LossTerms total_loss(const Value& probs, const Mat& y0, const std::vector<double>& gap_targets,
                     const std::vector<Formula>& formulas, const LossWeights& weights, double gamma) {
  if (weights.ce < 0 || weights.smo < 0 || weights.bd < 0 || weights.pl < 0)
    throw ValidationError("total_loss: weights must be non-negative");
  LossTerms t;
  t.ce = weights.ce > 0 ? ce_loss(probs, y0) : Value::scalar(0.0);
  t.smo = weights.smo > 0 ? smooth_loss(probs) : Value::scalar(0.0);
  t.bd = weights.bd > 0 ? boundary_loss(probs, gap_targets) : Value::scalar(0.0);
  t.pl = weights.pl > 0 ? logic_loss(formulas, probs, gamma) : Value::scalar(0.0);
  Value total = Value::scalar(0.0);
  if (weights.ce > 0) total = add(total, affine(t.ce, weights.ce, 0.0));
  if (weights.smo > 0) total = add(total, affine(t.smo, weights.smo, 0.0));
  if (weights.bd > 0) total = add(total, affine(t.bd, weights.bd, 0.0));
  if (weights.pl > 0) total = add(total, affine(t.pl, weights.pl, 0.0));
  t.total = total;
  return t;
}

}  // namespace cpkd
