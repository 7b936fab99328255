#include "cpkd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>

#include "cpkd/logic.hpp"

namespace cpkd {

Sequence load_sequence(const std::string& dataset_dir, const DatasetEntry& entry, int classes, int feat_dim) {
  namespace fs = std::filesystem;
  Sequence s;
  s.id = entry.id;
  s.features = read_features((fs::path(dataset_dir) / entry.feat_path).string());
  auto [labels, file_classes] = read_labels((fs::path(dataset_dir) / entry.label_path).string());
  s.labels = std::move(labels);
  if (file_classes != classes)
    throw ValidationError("sequence " + std::to_string(entry.id) + ": label file has " +
                          std::to_string(file_classes) + " classes, manifest says " + std::to_string(classes));
  if (s.features.cols != static_cast<std::size_t>(feat_dim))
    throw ValidationError("sequence " + std::to_string(entry.id) + ": feature dim " +
                          std::to_string(s.features.cols) + ", manifest says " + std::to_string(feat_dim));
  if (s.features.rows != s.labels.size())
    throw ValidationError("sequence " + std::to_string(entry.id) + ": " + std::to_string(s.features.rows) +
                          " feature rows vs " + std::to_string(s.labels.size()) + " labels");
  return s;
}

std::vector<Sequence> load_split(const std::string& dataset_dir, const Manifest& manifest,
                                 const std::string& split) {
  std::vector<Sequence> out;
  for (const auto& e : manifest.split(split))
    out.push_back(load_sequence(dataset_dir, e, manifest.classes, manifest.feat_dim));
  return out;
}

// --- optimization ----------------------------------------------------------

void optimizer_step(DenoiserParams& params, const std::vector<double>& grads, AdamState& state, double lr) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const std::size_t n = params.flat.size();
  if (grads.size() != n)
    throw ValidationError("optimizer_step: " + std::to_string(grads.size()) + " gradients for " +
                          std::to_string(n) + " parameters");
  if (!all_finite(grads)) throw ValidationError("optimizer_step: non-finite gradients");
  if (!(lr > 0.0)) throw ValidationError("optimizer_step: learning rate must be positive");
  if (state.m.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
    state.step = 0;
  }
  if (state.m.size() != n) throw ValidationError("optimizer_step: state size does not match parameters");

  ++state.step;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < n; ++i) {
    state.m[i] = kBeta1 * state.m[i] + (1.0 - kBeta1) * grads[i];
    state.v[i] = kBeta2 * state.v[i] + (1.0 - kBeta2) * grads[i] * grads[i];
    double mhat = state.m[i] / bc1;
    double vhat = state.v[i] / bc2;
    params.flat[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
  }
}

// --- training ------------------------------------------------------------------

namespace {

struct SampleDraw {
  int t{1};
  Mat eps;
  Mask mask;
};

Value mask_column(const Mask& mask) {
  std::vector<double> col(mask.bits.size());
  for (std::size_t i = 0; i < col.size(); ++i) col[i] = static_cast<double>(mask.bits[i]);
  return Value::constant(std::move(col), {mask.bits.size(), 1});
}

struct SampleLoss {
  double loss{0.0};
  std::vector<double> grads;
};

SampleLoss sample_loss(const DenoiserParams& params, const Sequence& seq, const SampleDraw& draw,
                       const TrainConfig& cfg, const NoiseSchedule& sched, const std::vector<Formula>& rules,
                       std::size_t classes, double inv_batch) {
  DenoiserDims dims = params.dims;
  Value flat = Value::variable(params.flat, {params.flat.size()});

  Value features = Value::from_mat(seq.features);
  EncodeResult enc = encode_graph(dims, flat, features);
  Value cond_masked = mul(enc.cond, mask_column(draw.mask));

  Mat y0 = one_hot(seq.labels, static_cast<int>(classes));
  Mat y_t = forward_diffuse(scale_labels(y0), draw.t, draw.eps, sched);
  Value probs = decode_graph(dims, flat, params.step_table, Value::from_mat(y_t), draw.t, cond_masked);

  std::vector<double> gaps = boundary_targets(seq.labels, cfg.sigma_boundary);
  LossTerms terms = total_loss(probs, y0, gaps, rules, cfg.weights, cfg.gamma);
  Value loss = terms.total;
  if (cfg.aux_supervision) {
    LossWeights aux_w = cfg.weights;
    aux_w.bd = 0.0;  // the boundary term supervises only the decoder output
    loss = add(loss, total_loss(enc.aux_probs, y0, gaps, rules, aux_w, cfg.gamma).total);
  }

  SampleLoss out;
  out.loss = loss.item();
  if (!std::isfinite(out.loss))
    throw ValidationError("train_step: non-finite loss (sample id=" + std::to_string(seq.id) +
                          ", t=" + std::to_string(draw.t) + ", mask=" + mask_kind_name(draw.mask.kind) + ")");
  backward(affine(loss, inv_batch, 0.0));
  out.grads = flat.grad_or_zero();
  return out;
}

}  // namespace

TrainStepResult train_step(const DenoiserParams& params, const std::vector<const Sequence*>& batch,
                           const TrainConfig& cfg, const NoiseSchedule& sched,
                           const std::vector<Formula>& rules, Rng& rng) {
  if (batch.empty()) throw ValidationError("train_step: empty batch");
  if (cfg.mask_strategies.empty()) throw ValidationError("train_step: no mask strategies configured");
  const std::size_t B = batch.size();
  const std::size_t classes = params.dims.classes;

  // All randomness first, in sample order: diffusion step, corruption noise
  // (row-major), then the mask draw.
  std::vector<SampleDraw> draws(B);
  for (std::size_t b = 0; b < B; ++b) {
    const Sequence& seq = *batch[b];
    if (seq.labels.empty()) throw ValidationError("train_step: sequence without labels");
    draws[b].t = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.total_steps)));
    draws[b].eps = Mat(seq.labels.size(), classes);
    for (double& x : draws[b].eps.v) x = rng.gaussian();
    std::vector<double> fb = frame_boundary(boundary_targets(seq.labels, cfg.sigma_boundary));
    draws[b].mask = sample_mask(seq.labels, static_cast<int>(classes), fb, rng,
                                std::span<const MaskKind>(cfg.mask_strategies));
  }

  std::vector<SampleLoss> per_sample(B);
  std::mutex err_mutex;
  std::exception_ptr first_error;
  const double inv_batch = 1.0 / static_cast<double>(B);
  parallel_for(B, cfg.batch_threads, [&](std::size_t i0, std::size_t i1) {
    for (std::size_t b = i0; b < i1; ++b) {
      try {
        per_sample[b] = sample_loss(params, *batch[b], draws[b], cfg, sched, rules, classes, inv_batch);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  });
  if (first_error) std::rethrow_exception(first_error);

  TrainStepResult r;
  r.grads.assign(params.flat.size(), 0.0);
  for (std::size_t b = 0; b < B; ++b) {  // fixed merge order keeps runs bit-identical
    r.loss += per_sample[b].loss;
    for (std::size_t i = 0; i < r.grads.size(); ++i) r.grads[i] += per_sample[b].grads[i];
  }
  r.loss *= inv_batch;
  return r;
}

namespace {

double val_jaccard(const DenoiserParams& params, const std::vector<Sequence>& val_set,
                   const NoiseSchedule& sched, std::size_t steps, std::uint64_t seed) {
  InferConfig vcfg;
  vcfg.steps = steps;
  vcfg.seed = seed;
  double sum = 0.0;
  for (const auto& seq : val_set) {
    InferResult r = infer(params, seq.features, sched, vcfg);
    sum += frame_metrics(argmax_rows(r.probs), seq.labels).macro_jaccard;
  }
  return sum / static_cast<double>(val_set.size());
}

}  // namespace

TrainResult train(const std::vector<Sequence>& train_set, const std::vector<Sequence>& val_set,
                  const TrainConfig& cfg, const std::vector<Formula>& rules, std::size_t feat_dim,
                  std::size_t classes) {
  if (train_set.empty()) throw ValidationError("train: empty training set");
  if (cfg.batch < 1) throw ValidationError("train: batch must be >= 1");
  if (cfg.val_steps < 1 || cfg.val_steps > cfg.total_steps)
    throw ValidationError("train: val_steps must lie in [1, total_steps]");
  if (cfg.weights.pl > 0.0 && rules.empty())
    throw ValidationError("train: rule penalty enabled but no formulas given");

  DenoiserDims dims;
  dims.feat_dim = feat_dim;
  dims.classes = classes;
  dims.enc_layers = cfg.enc_layers;
  dims.dec_layers = cfg.dec_layers;
  dims.hidden = cfg.hidden;
  dims.total_steps = cfg.total_steps;

  DenoiserParams params = init_params(dims, cfg.seed);
  NoiseSchedule sched = make_schedule(static_cast<int>(cfg.total_steps), 0.0);
  AdamState adam;
  Rng rng = Rng(cfg.seed).split(0x7261696e);  // training stream
  const std::uint64_t val_seed = Rng(cfg.seed).split(0x76616c).seed();

  TrainResult result;
  result.params = params;
  double best = -1.0;
  std::size_t since_best = 0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)  // Fisher-Yates
      std::swap(order[i - 1], order[rng.uniform_int(i)]);

    double epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::vector<const Sequence*> batch;
      for (std::size_t b = start; b < std::min(order.size(), start + cfg.batch); ++b)
        batch.push_back(&train_set[order[b]]);
      TrainStepResult sr = train_step(params, batch, cfg, sched, rules, rng);
      optimizer_step(params, sr.grads, adam, cfg.lr);
      epoch_loss += sr.loss;
      ++steps;
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(steps));
    result.epochs_run = epoch + 1;

    if (!val_set.empty()) {
      double j = val_jaccard(params, val_set, sched, cfg.val_steps, val_seed);
      result.val_jaccards.push_back(j);
      if (j > best) {
        best = j;
        result.params = params;
        result.best_val_jaccard = j;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        break;
      }
    } else {
      result.params = params;
    }
  }
  return result;
}

// --- inference ---------------------------------------------------------------

InferResult infer(const DenoiserParams& params, const Mat& features, const NoiseSchedule& sched,
                  const InferConfig& cfg, const Mask& mask) {
  if (features.rows == 0) throw ValidationError("infer: empty feature sequence");
  if (cfg.steps < 1 || cfg.steps > static_cast<std::size_t>(sched.total_steps))
    throw ValidationError("infer: steps must lie in [1, total_steps]");
  if (mask.bits.size() != features.rows)
    throw ValidationError("infer: mask length does not match the sequence");
  if (params.dims.total_steps != static_cast<std::size_t>(sched.total_steps))
    throw ValidationError("infer: schedule steps do not match the checkpoint");

  const std::size_t T = features.rows, C = params.dims.classes;
  EncodeOut enc = encode(params, features);
  Mat cond_masked = apply_mask(enc.cond, mask);

  Rng rng(cfg.seed);
  Mat y(T, C);
  for (double& x : y.v) x = rng.gaussian();

  InferResult out;
  std::vector<int> grid = inference_time_grid(sched.total_steps, static_cast<int>(cfg.steps));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    int t = grid[i];
    int t_prev = i + 1 < grid.size() ? grid[i + 1] : 0;
    Mat probs = decode(params, y, t, cond_masked);
    if (!all_finite(probs.v))
      throw ValidationError("infer: non-finite prediction at step " + std::to_string(t));
    Mat x0 = scale_probs(probs);
    if (sched.eta > 0.0) {
      Mat noise(T, C);
      for (double& x : noise.v) x = rng.gaussian();
      y = ddim_step(y, x0, t, t_prev, sched, &noise);
    } else {
      y = ddim_step(y, x0, t, t_prev, sched, nullptr);
    }
    out.trajectory.push_back(std::move(probs));
  }
  out.probs = out.trajectory.back();
  return out;
}

InferResult infer(const DenoiserParams& params, const Mat& features, const NoiseSchedule& sched,
                  const InferConfig& cfg) {
  Mask mask;
  if (cfg.mask == MaskKind::None_) mask = mask_none(features.rows);
  else if (cfg.mask == MaskKind::Global) mask = mask_global(features.rows);
  else
    throw ValidationError(
        "infer: transition/relation masks need ground truth; pass an explicit mask for analysis");
  return infer(params, features, sched, cfg, mask);
}

// --- config files ----------------------------------------------------------------

namespace {

double parse_real(const std::string& v, const std::string& where) {
  try {
    std::size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ValidationError("config: malformed number '" + v + "' for " + where);
  }
}

std::uint64_t parse_uint(const std::string& v, const std::string& where) {
  try {
    std::size_t used = 0;
    unsigned long long x = std::stoull(v, &used);
    if (used != v.size() || v[0] == '-') throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ValidationError("config: malformed integer '" + v + "' for " + where);
  }
}

bool parse_flag(const std::string& v, const std::string& where) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ValidationError("config: malformed flag '" + v + "' for " + where);
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

}  // namespace

ExperimentConfig parse_experiment_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ValidationError("config: malformed section header on line " + std::to_string(lineno));
      section = trim(line.substr(1, line.size() - 2));
      if (section != "data" && section != "model" && section != "train" && section != "weights" &&
          section != "infer" && section != "output")
        throw ValidationError("config: unknown section [" + section + "]");
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config: line " + std::to_string(lineno) + " is not key=value");
    std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
    std::string where = "[" + section + "] " + key;
    if (section.empty()) throw ValidationError("config: key '" + key + "' before any section");

    if (section == "data") {
      if (key == "dir") cfg.data_dir = val;
      else if (key == "rules") cfg.rules_path = val;
      else throw ValidationError("config: unknown key " + where);
    } else if (section == "model") {
      if (key == "enc_layers") cfg.train.enc_layers = parse_uint(val, where);
      else if (key == "dec_layers") cfg.train.dec_layers = parse_uint(val, where);
      else if (key == "hidden") cfg.train.hidden = parse_uint(val, where);
      else throw ValidationError("config: unknown key " + where);
    } else if (section == "train") {
      if (key == "total_steps") cfg.train.total_steps = parse_uint(val, where);
      else if (key == "lr") cfg.train.lr = parse_real(val, where);
      else if (key == "batch") cfg.train.batch = parse_uint(val, where);
      else if (key == "epochs") cfg.train.epochs = parse_uint(val, where);
      else if (key == "gamma") cfg.train.gamma = parse_real(val, where);
      else if (key == "sigma_boundary") cfg.train.sigma_boundary = parse_real(val, where);
      else if (key == "seed") cfg.train.seed = parse_uint(val, where);
      else if (key == "patience") cfg.train.patience = parse_uint(val, where);
      else if (key == "val_steps") cfg.train.val_steps = parse_uint(val, where);
      else if (key == "threads") cfg.train.batch_threads = static_cast<unsigned>(parse_uint(val, where));
      else if (key == "aux") cfg.train.aux_supervision = parse_flag(val, where);
      else if (key == "masks") {
        if (val.empty()) throw ValidationError("config: empty mask set for " + where);
        cfg.train.mask_strategies.clear();
        for (char c : val) cfg.train.mask_strategies.push_back(mask_kind_from_char(c));
      } else throw ValidationError("config: unknown key " + where);
    } else if (section == "weights") {
      if (key == "ce") cfg.train.weights.ce = parse_real(val, where);
      else if (key == "smo") cfg.train.weights.smo = parse_real(val, where);
      else if (key == "bd") cfg.train.weights.bd = parse_real(val, where);
      else if (key == "pl") cfg.train.weights.pl = parse_real(val, where);
      else throw ValidationError("config: unknown key " + where);
    } else if (section == "infer") {
      if (key == "steps") cfg.infer.steps = parse_uint(val, where);
      else if (key == "eta") cfg.infer.eta = parse_real(val, where);
      else if (key == "seed") cfg.infer.seed = parse_uint(val, where);
      else throw ValidationError("config: unknown key " + where);
    } else {  // output
      if (key == "dir") cfg.out_dir = val;
      else throw ValidationError("config: unknown key " + where);
    }
  }
  return cfg;
}

ExperimentConfig parse_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config: " + path);
  log_file_read(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_experiment_text(ss.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

// --- experiment harness ------------------------------------------------------------

namespace {

std::string fmt_real(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

Report run_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.data_dir.empty()) throw ValidationError("run_experiment: [data] dir is required");
  if (cfg.out_dir.empty()) throw ValidationError("run_experiment: [output] dir is required");

  Manifest manifest = load_manifest((fs::path(cfg.data_dir) / "manifest.txt").string());
  PhaseTable table = manifest.classes == 8 ? esd_phase_table() : PhaseTable(manifest.classes);
  std::vector<Formula> rules =
      cfg.rules_path.empty() ? default_rules() : parse_formula_file(cfg.rules_path, table);

  std::vector<Sequence> train_set = load_split(cfg.data_dir, manifest, "train");
  std::vector<Sequence> val_set = load_split(cfg.data_dir, manifest, "val");
  TrainResult tr = train(train_set, val_set, cfg.train, rules,
                         static_cast<std::size_t>(manifest.feat_dim),
                         static_cast<std::size_t>(manifest.classes));

  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + cfg.out_dir + ": " + ec.message());
  save_checkpoint(tr.params, (fs::path(cfg.out_dir) / "model.ckpt").string());

  // Held-out files are only touched from here on.
  std::vector<Sequence> test_set = load_split(cfg.data_dir, manifest, "test");
  NoiseSchedule sched = make_schedule(static_cast<int>(cfg.train.total_steps), cfg.infer.eta);

  double acc = 0, mp = 0, mr = 0, mj = 0, racc = 0, rmp = 0, rmr = 0, rmj = 0;
  long violations = 0;
  for (const auto& seq : test_set) {
    InferResult ir = infer(tr.params, seq.features, sched, cfg.infer);
    std::vector<int> pred = argmax_rows(ir.probs);
    EvalReport er = relaxed_metrics(pred, seq.labels);
    acc += er.accuracy;
    mp += er.macro_precision;
    mr += er.macro_recall;
    mj += er.macro_jaccard;
    racc += er.relaxed_accuracy;
    rmp += er.relaxed_macro_precision;
    rmr += er.relaxed_macro_recall;
    rmj += er.relaxed_macro_jaccard;
    violations += count_violations(pred, rules);

    Ribbons rb{seq.labels, pred, ir.probs};
    write_ribbons(rb, (fs::path(cfg.out_dir) / ("ribbons_" + std::to_string(seq.id) + ".csv")).string());
  }
  const double n = test_set.empty() ? 1.0 : static_cast<double>(test_set.size());

  Report report;
  report.emplace_back("data_dir", cfg.data_dir);
  report.emplace_back("n_train", std::to_string(train_set.size()));
  report.emplace_back("n_val", std::to_string(val_set.size()));
  report.emplace_back("n_test", std::to_string(test_set.size()));
  report.emplace_back("baseline_accuracy", fmt_real(manifest.baseline_accuracy));
  report.emplace_back("epochs_run", std::to_string(tr.epochs_run));
  report.emplace_back("best_val_jaccard", fmt_real(tr.best_val_jaccard));
  report.emplace_back("final_train_loss", fmt_real(tr.epoch_losses.empty() ? 0.0 : tr.epoch_losses.back()));
  report.emplace_back("infer_steps", std::to_string(cfg.infer.steps));
  report.emplace_back("test_accuracy", fmt_real(acc / n));
  report.emplace_back("test_macro_precision", fmt_real(mp / n));
  report.emplace_back("test_macro_recall", fmt_real(mr / n));
  report.emplace_back("test_macro_jaccard", fmt_real(mj / n));
  report.emplace_back("relaxed_accuracy", fmt_real(racc / n));
  report.emplace_back("relaxed_macro_precision", fmt_real(rmp / n));
  report.emplace_back("relaxed_macro_recall", fmt_real(rmr / n));
  report.emplace_back("relaxed_macro_jaccard", fmt_real(rmj / n));
  report.emplace_back("mean_violations", fmt_real(static_cast<double>(violations) / n));
  report.emplace_back("total_violations", std::to_string(violations));
  write_report(report, (fs::path(cfg.out_dir) / "report.txt").string());
  return report;
}

}  // namespace cpkd
