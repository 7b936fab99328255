#include "cpkd/verify.hpp"

#include <algorithm>

#include "cpkd/denoiser.hpp"
#include "cpkd/losses.hpp"
#include "cpkd/rng.hpp"
#include "cpkd/tensor.hpp"

namespace cpkd {

namespace {

constexpr double kStep = 1e-5;

struct LossInstance {
  std::size_t T, C;
  std::vector<double> logits;
  std::vector<int> labels;
  Mat y0;
  std::vector<double> gaps;
  std::vector<Formula> rules;
};

LossInstance make_instance(Rng& rng) {
  LossInstance ins;
  ins.T = 4 + rng.uniform_int(9);   // 4..12
  ins.C = 2 + rng.uniform_int(3);   // 2..4
  ins.logits.resize(ins.T * ins.C);
  for (double& x : ins.logits) x = 4.0 * rng.uniform() - 2.0;
  ins.labels.resize(ins.T);
  for (auto& l : ins.labels) l = static_cast<int>(rng.uniform_int(ins.C));
  ins.y0 = one_hot(ins.labels, static_cast<int>(ins.C));
  ins.gaps = boundary_targets(ins.labels, 2.0);
  PhaseTable table(static_cast<int>(ins.C));
  for (const char* text : {"(!P1 W P2)", "(F P1 & F P2)", "(!F P2 | (P1 S P2))"})
    ins.rules.push_back(parse_formula(text, table));
  return ins;
}

Value probs_of(const Value& logits, std::size_t T, std::size_t C) {
  return softmax(reshape(logits, {T, C}), 1);
}

double check_loss(const std::string& component, const LossInstance& ins) {
  auto fn = [&](const Value& point) -> Value {
    Value p = probs_of(point, ins.T, ins.C);
    if (component == "ce") return ce_loss(p, ins.y0);
    if (component == "smooth") return smooth_loss(p);
    if (component == "boundary") return boundary_loss(p, ins.gaps);
    if (component == "logic") return logic_loss(ins.rules, p, 0.5);
    // total
    return total_loss(p, ins.y0, ins.gaps, ins.rules, LossWeights{}, 0.5).total;
  };
  return grad_check(fn, ins.logits, kStep);
}

double check_denoiser(Rng& rng) {
  DenoiserDims dims;
  dims.feat_dim = 4;
  dims.classes = 3;
  dims.enc_layers = 1;
  dims.dec_layers = 1;
  dims.hidden = 6;
  dims.total_steps = 10;
  const std::size_t T = 8;

  DenoiserParams params = init_params(dims, rng.split(1).seed());
  Mat features(T, dims.feat_dim);
  for (double& x : features.v) x = rng.gaussian();
  Mat y_t(T, dims.classes);
  for (double& x : y_t.v) x = rng.gaussian();
  int step = 1 + static_cast<int>(rng.uniform_int(dims.total_steps));
  std::vector<double> mask_col(T);
  for (double& b : mask_col) b = rng.bernoulli(0.8) ? 1.0 : 0.0;

  // Random linear readouts give the scalar objective nonzero gradients
  // everywhere (softmax rows always sum to 1, so a plain mean would not).
  Mat w_dec(T, dims.classes), w_aux(T, dims.classes);
  for (double& x : w_dec.v) x = rng.gaussian();
  for (double& x : w_aux.v) x = rng.gaussian();

  auto fn = [&](const Value& flat) -> Value {
    EncodeResult enc = encode_graph(dims, flat, Value::from_mat(features));
    Value cond = mul(enc.cond, Value::constant(mask_col, {T, 1}));
    Value p = decode_graph(dims, flat, params.step_table, Value::from_mat(y_t), step, cond);
    return add(sum_all(mul(p, Value::from_mat(w_dec))), sum_all(mul(enc.aux_probs, Value::from_mat(w_aux))));
  };
  return grad_check(fn, params.flat, kStep);
}

}  // namespace

const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names{"ce", "smooth", "boundary", "logic", "total", "denoiser"};
  return names;
}

double gradcheck_component(const std::string& component, std::uint64_t seed) {
  const auto& names = gradcheck_components();
  if (std::find(names.begin(), names.end(), component) == names.end()) {
    std::string all;
    for (const auto& n : names) all += (all.empty() ? "" : ", ") + n;
    throw ValidationError("gradcheck: unknown component '" + component + "' (known: " + all + ")");
  }
  Rng rng(seed);
  if (component == "denoiser") return check_denoiser(rng);
  LossInstance ins = make_instance(rng);
  return check_loss(component, ins);
}

}  // namespace cpkd
