#include "cpkd/schedule.hpp"

#include <algorithm>
#include <cmath>

namespace cpkd {

double NoiseSchedule::lam(int t) const {
  if (t < 0 || t > total_steps)
    throw ValidationError("schedule: step " + std::to_string(t) + " outside [0," + std::to_string(total_steps) + "]");
  return lambda[static_cast<std::size_t>(t)];
}

NoiseSchedule make_schedule(int total_steps, double eta) {
  if (total_steps < 1) throw ValidationError("make_schedule: total_steps must be >= 1");
  if (eta < 0.0 || eta > 1.0) throw ValidationError("make_schedule: eta outside [0,1]");
  const double s = 0.008;
  const double denom_arg = (s / (1.0 + s)) * M_PI / 2.0;
  const double denom = std::cos(denom_arg) * std::cos(denom_arg);
  NoiseSchedule sc;
  sc.total_steps = total_steps;
  sc.eta = eta;
  sc.lambda.resize(static_cast<std::size_t>(total_steps) + 1);
  for (int t = 0; t <= total_steps; ++t) {
    double u = ((static_cast<double>(t) / total_steps) + s) / (1.0 + s);
    double c = std::cos(u * M_PI / 2.0);
    double raw = std::min(1.0, (c * c) / denom);
    // Graded floor: a flat 1e-5 clamp would tie the last few steps together;
    // letting the floor decay with t keeps the sequence strictly decreasing.
    double floor_t = 1e-5 * (1.0 + static_cast<double>(total_steps - t) * 1e-6);
    sc.lambda[static_cast<std::size_t>(t)] = std::max(raw, floor_t);
  }
  sc.lambda[0] = 1.0;
  return sc;
}

Mat scale_labels(const Mat& y0) {
  if (y0.rows == 0 || y0.cols == 0) throw ValidationError("scale_labels: empty input");
  for (std::size_t i = 0; i < y0.rows; ++i) {
    int ones = 0;
    for (std::size_t j = 0; j < y0.cols; ++j) {
      double v = y0(i, j);
      if (v == 1.0)
        ++ones;
      else if (v != 0.0)
        throw ValidationError("scale_labels: row " + std::to_string(i) + " is not one-hot (value " +
                              std::to_string(v) + ")");
    }
    if (ones != 1)
      throw ValidationError("scale_labels: row " + std::to_string(i) + " has " + std::to_string(ones) +
                            " ones, expected exactly 1");
  }
  Mat out(y0.rows, y0.cols);
  for (std::size_t i = 0; i < y0.v.size(); ++i) out.v[i] = 2.0 * y0.v[i] - 1.0;
  return out;
}

Mat scale_probs(const Mat& probs) {
  if (probs.rows == 0 || probs.cols == 0) throw ValidationError("scale_probs: empty input");
  Mat out(probs.rows, probs.cols);
  for (std::size_t i = 0; i < probs.v.size(); ++i) out.v[i] = 2.0 * probs.v[i] - 1.0;
  return out;
}

Mat forward_diffuse(const Mat& x0, int t, const Mat& eps, const NoiseSchedule& sched) {
  if (t < 0 || t > sched.total_steps)
    throw ValidationError("forward_diffuse: step " + std::to_string(t) + " outside [0," +
                          std::to_string(sched.total_steps) + "]");
  if (x0.rows != eps.rows || x0.cols != eps.cols)
    throw ValidationError("forward_diffuse: x0 and eps shapes disagree");
  double lam = sched.lam(t);
  double a = std::sqrt(lam), b = std::sqrt(1.0 - lam);
  Mat out(x0.rows, x0.cols);
  for (std::size_t i = 0; i < x0.v.size(); ++i) out.v[i] = a * x0.v[i] + b * eps.v[i];
  return out;
}

Mat ddim_step(const Mat& y_t, const Mat& x0_pred, int t, int t_prev, const NoiseSchedule& sched,
              const Mat* noise) {
  if (t < 1 || t > sched.total_steps)
    throw ValidationError("ddim_step: step t=" + std::to_string(t) + " outside [1," +
                          std::to_string(sched.total_steps) + "]");
  if (t_prev < 0 || t_prev >= t)
    throw ValidationError("ddim_step: t_prev=" + std::to_string(t_prev) + " must lie in [0," +
                          std::to_string(t - 1) + "]");
  if (y_t.rows != x0_pred.rows || y_t.cols != x0_pred.cols)
    throw ValidationError("ddim_step: y_t and x0 prediction shapes disagree");
  double lam_t = sched.lam(t);
  double lam_p = sched.lam(t_prev);
  double gamma = sched.eta * std::sqrt((1.0 - lam_p) / (1.0 - lam_t)) * std::sqrt(1.0 - lam_t / lam_p);
  double resid_sq = 1.0 - lam_p - gamma * gamma;
  if (resid_sq < 0.0)
    throw ValidationError("ddim_step: residual coefficient is imaginary (eta too large for this step pair)");
  double a = std::sqrt(lam_p);
  double b = std::sqrt(resid_sq);
  double scale = 1.0 / std::sqrt(1.0 - lam_t);
  if (gamma > 0.0 && noise == nullptr)
    throw ValidationError("ddim_step: stochastic update (eta > 0) requires a noise matrix");
  Mat out(y_t.rows, y_t.cols);
  double sl = std::sqrt(lam_t);
  for (std::size_t i = 0; i < y_t.v.size(); ++i) {
    double resid = (y_t.v[i] - sl * x0_pred.v[i]) * scale;
    double v = a * x0_pred.v[i] + b * resid;
    if (gamma > 0.0) v += gamma * noise->v[i];
    out.v[i] = v;
  }
  return out;
}

std::vector<int> inference_time_grid(int total_steps, int steps) {
  if (steps < 1) throw ValidationError("inference_time_grid: steps must be >= 1");
  if (total_steps < 1) throw ValidationError("inference_time_grid: total_steps must be >= 1");
  std::vector<int> grid;
  if (steps == 1) {
    grid.push_back(total_steps);
    return grid;
  }
  for (int i = steps - 1; i >= 0; --i) {
    double x = 1.0 + (static_cast<double>(total_steps) - 1.0) * i / (steps - 1);
    int t = static_cast<int>(std::lround(x));
    t = std::clamp(t, 1, total_steps);
    if (grid.empty() || grid.back() != t) grid.push_back(t);
  }
  return grid;
}

}  // namespace cpkd
