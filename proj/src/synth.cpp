#include "cpkd/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>

#include "cpkd/logic.hpp"

namespace cpkd {

static_assert(std::endian::native == std::endian::little, "dataset IO assumes a little-endian host");

namespace {

// Phase indices of the eight-stage workflow.
constexpr int kPrep = 0, kEstimation = 1, kMarking = 2, kInjection = 3, kIncision = 4, kEsd = 5,
              kVessel = 6, kClips = 7;

// Rng stream ids: dataset sequences use their own index, so auxiliary
// streams live far above any plausible sequence count.
constexpr std::uint64_t kMeansStream = 1'000'003;
constexpr std::uint64_t kProbeStreamBase = 1'500'000;
constexpr int kMaxSequences = 1'000'000;
constexpr int kCalibrationProbes = 12;

PhaseDuration from_mean(double mean_frames, double sigma) {
  return {std::log(mean_frames) - 0.5 * sigma * sigma, sigma};
}

}  // namespace

WorkflowSpec::WorkflowSpec() {
  durations = {
      from_mean(20.0, 0.35),  // Preparation
      from_mean(15.0, 0.35),  // Estimation
      from_mean(15.0, 0.35),  // Marking
      from_mean(20.0, 0.35),  // Injection
      from_mean(25.0, 0.35),  // Incision
      from_mean(70.0, 0.35),  // ESD
      from_mean(25.0, 0.35),  // Vessel_treatment
      from_mean(20.0, 0.35),  // Clips
  };
}

void validate_spec(const WorkflowSpec& spec) {
  if (spec.classes != 8)
    throw ValidationError("workflow spec: the generator models the eight-phase workflow, got " +
                          std::to_string(spec.classes) + " classes");
  if (spec.frames_min < spec.classes)
    throw ValidationError("workflow spec: frames_min must be >= classes");
  if (spec.frames_min > spec.frames_max)
    throw ValidationError("workflow spec: frames_min > frames_max");
  if (spec.durations.size() != static_cast<std::size_t>(spec.classes))
    throw ValidationError("workflow spec: need one duration distribution per class");
  for (const auto& d : spec.durations)
    if (!(d.sigma > 0.0) || !std::isfinite(d.mu))
      throw ValidationError("workflow spec: invalid duration distribution");
  if (spec.repeat_block < 0.0 || spec.repeat_block > 1.0 || spec.skip_block < 0.0 || spec.skip_block > 1.0)
    throw ValidationError("workflow spec: block probabilities must be in [0,1]");
  if (spec.feat_dim < 1) throw ValidationError("workflow spec: feat_dim must be >= 1");
  if (spec.boundary_blur_w < 0) throw ValidationError("workflow spec: boundary_blur_w must be >= 0");
  if (spec.noise_std < 0.0) throw ValidationError("workflow spec: noise_std must be >= 0");
}

double duration_mean(const PhaseDuration& d) { return std::exp(d.mu + 0.5 * d.sigma * d.sigma); }

Mat class_means(const WorkflowSpec& spec, std::uint64_t mean_seed, double radius) {
  validate_spec(spec);
  if (!(radius > 0.0)) throw ValidationError("class_means: radius must be positive");
  Rng rng(mean_seed);
  Mat m(static_cast<std::size_t>(spec.classes), static_cast<std::size_t>(spec.feat_dim));
  for (std::size_t c = 0; c < m.rows; ++c) {
    double norm2 = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) {
      m(c, j) = rng.gaussian();
      norm2 += m(c, j) * m(c, j);
    }
    double norm = std::sqrt(norm2);
    if (norm < 1e-12) {
      m(c, 0) = 1.0;
      norm = 1.0;
    }
    for (std::size_t j = 0; j < m.cols; ++j) m(c, j) *= radius / norm;
  }
  return m;
}

std::vector<int> gen_labels(const WorkflowSpec& spec, Rng& rng) {
  validate_spec(spec);
  for (int attempt = 0; attempt < 100; ++attempt) {
    bool skip = rng.bernoulli(spec.skip_block);
    int k = rng.bernoulli(spec.repeat_block) ? 2 : 1;
    std::vector<int> order{kPrep, kEstimation};
    if (!skip) {
      order.push_back(kMarking);
      for (int rep = 0; rep < k; ++rep) {
        order.push_back(kInjection);
        order.push_back(kIncision);
        order.push_back(kEsd);
      }
    }
    order.push_back(kVessel);
    order.push_back(kClips);

    std::vector<int> labels;
    for (int phase : order) {
      const auto& d = spec.durations[static_cast<std::size_t>(phase)];
      long len = std::lround(std::exp(d.mu + d.sigma * rng.gaussian()));
      if (len < 1) len = 1;
      labels.insert(labels.end(), static_cast<std::size_t>(len), phase);
    }
    if (static_cast<int>(labels.size()) >= spec.frames_min &&
        static_cast<int>(labels.size()) <= spec.frames_max)
      return labels;
  }
  throw ValidationError("gen_labels: no duration draw fit the frame budget in 100 attempts");
}

SeqSample gen_sequence(const WorkflowSpec& spec, const Mat& means, Rng& rng) {
  validate_spec(spec);
  if (means.rows != static_cast<std::size_t>(spec.classes) ||
      means.cols != static_cast<std::size_t>(spec.feat_dim))
    throw ValidationError("gen_sequence: class-mean matrix shape does not match classes x feat_dim");

  SeqSample s;
  s.labels = gen_labels(spec, rng);
  const std::size_t T = s.labels.size();
  const std::size_t D = static_cast<std::size_t>(spec.feat_dim);
  s.features = Mat(T, D);

  std::vector<long> gaps;  // change between frames g and g+1
  for (std::size_t g = 0; g + 1 < T; ++g)
    if (s.labels[g] != s.labels[g + 1]) gaps.push_back(static_cast<long>(g));

  const double w = static_cast<double>(spec.boundary_blur_w);
  for (std::size_t i = 0; i < T; ++i) {
    int left = s.labels[i], right = s.labels[i];
    double beta = 0.0;  // weight of the right class
    if (w > 0.0 && !gaps.empty()) {
      long best_g = gaps[0];
      double best_d = std::abs(static_cast<double>(i) - (static_cast<double>(gaps[0]) + 0.5));
      for (long g : gaps) {
        double dist = std::abs(static_cast<double>(i) - (static_cast<double>(g) + 0.5));
        if (dist < best_d) {
          best_d = dist;
          best_g = g;
        }
      }
      double x = static_cast<double>(i) - (static_cast<double>(best_g) + 0.5);
      if (std::abs(x) < w) {
        left = s.labels[static_cast<std::size_t>(best_g)];
        right = s.labels[static_cast<std::size_t>(best_g) + 1];
        beta = std::min(1.0, std::max(0.0, 0.5 + x / (2.0 * w)));
      }
    }
    for (std::size_t j = 0; j < D; ++j) {
      double base = (1.0 - beta) * means(static_cast<std::size_t>(left), j) +
                    beta * means(static_cast<std::size_t>(right), j);
      s.features(i, j) = base + spec.noise_std * rng.gaussian();
    }
  }
  return s;
}

double nearest_mean_accuracy(const std::vector<SeqSample>& samples, const Mat& means) {
  if (samples.empty()) throw ValidationError("nearest_mean_accuracy: no samples");
  long correct = 0, total = 0;
  for (const auto& s : samples) {
    if (s.features.cols != means.cols)
      throw ValidationError("nearest_mean_accuracy: feature dimension does not match the means");
    for (std::size_t i = 0; i < s.features.rows; ++i) {
      int best_c = 0;
      double best_d = 0.0;
      for (std::size_t c = 0; c < means.rows; ++c) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < means.cols; ++j) {
          double diff = s.features(i, j) - means(c, j);
          d2 += diff * diff;
        }
        if (c == 0 || d2 < best_d) {
          best_d = d2;
          best_c = static_cast<int>(c);
        }
      }
      if (best_c == s.labels[i]) ++correct;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

// --- dataset generation -------------------------------------------------------

namespace {

double probe_accuracy(const WorkflowSpec& spec, const Rng& base, std::uint64_t mean_seed, double radius) {
  Mat means = class_means(spec, mean_seed, radius);
  std::vector<SeqSample> probes;
  probes.reserve(kCalibrationProbes);
  for (int i = 0; i < kCalibrationProbes; ++i) {
    Rng rng = base.split(kProbeStreamBase + static_cast<std::uint64_t>(i));
    probes.push_back(gen_sequence(spec, means, rng));
  }
  return nearest_mean_accuracy(probes, means);
}

std::string seq_name(int id, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "seq_%05d.%s", id, ext);
  return buf;
}

}  // namespace

Manifest gen_dataset(const WorkflowSpec& spec, int n_train, int n_val, int n_test, std::uint64_t seed,
                     const std::string& out_dir) {
  validate_spec(spec);
  if (n_train < 1 || n_val < 0 || n_test < 0)
    throw ValidationError("gen_dataset: need n_train >= 1 and non-negative split sizes");
  const int total = n_train + n_val + n_test;
  if (total > kMaxSequences) throw ValidationError("gen_dataset: too many sequences");

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + out_dir + ": " + ec.message());

  Rng base(seed);
  const std::uint64_t mean_seed = base.split(kMeansStream).seed();

  // Calibrate the class-mean radius so the per-frame nearest-mean baseline
  // lands in [0.70, 0.85] accuracy (bisection; accuracy grows with radius).
  double lo = 0.05, hi = 8.0, radius = 0.0, acc = 0.0;
  for (int iter = 0; iter < 60; ++iter) {
    radius = 0.5 * (lo + hi);
    acc = probe_accuracy(spec, base, mean_seed, radius);
    if (acc >= 0.72 && acc <= 0.83) break;
    if (acc < 0.775) lo = radius;
    else hi = radius;
  }
  if (acc < 0.70 || acc > 0.85)
    throw ValidationError("gen_dataset: baseline calibration stalled at accuracy " + std::to_string(acc));

  Mat means = class_means(spec, mean_seed, radius);
  const std::vector<Formula> rules = default_rules();

  Manifest m;
  m.classes = spec.classes;
  m.feat_dim = spec.feat_dim;
  m.seed = seed;
  m.mean_seed = mean_seed;
  m.mean_radius = radius;
  m.baseline_accuracy = acc;
  m.entries.resize(static_cast<std::size_t>(total));

  std::mutex err_mutex;
  std::exception_ptr first_error;
  parallel_for(static_cast<std::size_t>(total), 0, [&](std::size_t i0, std::size_t i1) {
    try {
      for (std::size_t i = i0; i < i1; ++i) {
        const int id = static_cast<int>(i);
        Rng rng = base.split(static_cast<std::uint64_t>(i));
        SeqSample s = gen_sequence(spec, means, rng);
        for (const auto& f : rules)
          if (!eval_hard(f, s.labels, 0))
            throw ValidationError("gen_dataset: sequence " + std::to_string(id) +
                                  " violates rule " + to_string(f));
        DatasetEntry e;
        e.split = id < n_train ? "train" : id < n_train + n_val ? "val" : "test";
        e.id = id;
        e.feat_path = seq_name(id, "feat");
        e.label_path = seq_name(id, "labl");
        write_features(s.features, (std::filesystem::path(out_dir) / e.feat_path).string());
        write_labels(s.labels, spec.classes, (std::filesystem::path(out_dir) / e.label_path).string());
        m.entries[i] = std::move(e);
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  });
  if (first_error) std::rethrow_exception(first_error);

  write_manifest(m, (std::filesystem::path(out_dir) / "manifest.txt").string());
  return m;
}

std::vector<DatasetEntry> Manifest::split(const std::string& name) const {
  std::vector<DatasetEntry> out;
  for (const auto& e : entries)
    if (e.split == name) out.push_back(e);
  return out;
}

void write_manifest(const Manifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open manifest for writing: " + path);
  char buf[64];
  out << "classes=" << m.classes << "\n";
  out << "feat_dim=" << m.feat_dim << "\n";
  out << "seed=" << m.seed << "\n";
  out << "mean_seed=" << m.mean_seed << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", m.mean_radius);
  out << "mean_radius=" << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", m.baseline_accuracy);
  out << "baseline_accuracy=" << buf << "\n";
  for (const auto& e : m.entries) out << e.split << " " << e.id << " " << e.feat_path << " " << e.label_path << "\n";
  if (!out) throw IoError("failed writing manifest: " + path);
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest: " + path);
  log_file_read(path);
  Manifest m;
  bool have_classes = false, have_dim = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq != std::string::npos && line.find(' ') == std::string::npos) {
      std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      try {
        if (key == "classes") {
          m.classes = std::stoi(val);
          have_classes = true;
        } else if (key == "feat_dim") {
          m.feat_dim = std::stoi(val);
          have_dim = true;
        } else if (key == "seed") m.seed = std::stoull(val);
        else if (key == "mean_seed") m.mean_seed = std::stoull(val);
        else if (key == "mean_radius") m.mean_radius = std::stod(val);
        else if (key == "baseline_accuracy") m.baseline_accuracy = std::stod(val);
        else throw ValidationError(path + ": unknown manifest key '" + key + "'");
      } catch (const std::invalid_argument&) {
        throw ValidationError(path + ": malformed value on line " + std::to_string(lineno));
      }
      continue;
    }
    std::istringstream ls(line);
    DatasetEntry e;
    if (!(ls >> e.split >> e.id >> e.feat_path >> e.label_path))
      throw ValidationError(path + ": malformed entry on line " + std::to_string(lineno));
    if (e.split != "train" && e.split != "val" && e.split != "test")
      throw ValidationError(path + ": unknown split '" + e.split + "' on line " + std::to_string(lineno));
    m.entries.push_back(std::move(e));
  }
  if (!have_classes || !have_dim) throw ValidationError(path + ": manifest misses classes/feat_dim");
  return m;
}

// --- binary files ------------------------------------------------------------

namespace {

constexpr char kFeatMagic[8] = {'C', 'P', 'K', 'D', 'F', 'E', 'A', 'T'};
constexpr char kLablMagic[8] = {'C', 'P', 'K', 'D', 'L', 'A', 'B', 'L'};
constexpr std::uint32_t kFileVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t x) {
  out.write(reinterpret_cast<const char*>(&x), sizeof(x));
}

std::uint32_t read_u32(std::ifstream& in) {
  std::uint32_t x = 0;
  in.read(reinterpret_cast<char*>(&x), sizeof(x));
  return x;
}

void check_header(std::ifstream& in, const char (&magic)[8], const std::string& path, const char* what) {
  char got[8];
  in.read(got, sizeof(got));
  std::uint32_t version = read_u32(in);
  if (!in || std::memcmp(got, magic, sizeof(got)) != 0)
    throw ValidationError("not a " + std::string(what) + " file: " + path);
  if (version != kFileVersion)
    throw ValidationError("unsupported " + std::string(what) + " file version " + std::to_string(version) +
                          ": " + path);
}

}  // namespace

void write_features(const Mat& features, const std::string& path) {
  if (features.rows == 0 || features.cols == 0) throw ValidationError("write_features: empty matrix");
  if (!all_finite(features.v)) throw ValidationError("write_features: non-finite features");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open feature file for writing: " + path);
  out.write(kFeatMagic, sizeof(kFeatMagic));
  write_u32(out, kFileVersion);
  write_u32(out, static_cast<std::uint32_t>(features.rows));
  write_u32(out, static_cast<std::uint32_t>(features.cols));
  std::vector<float> f32(features.v.size());
  for (std::size_t i = 0; i < f32.size(); ++i) f32[i] = static_cast<float>(features.v[i]);
  out.write(reinterpret_cast<const char*>(f32.data()), static_cast<std::streamsize>(f32.size() * sizeof(float)));
  if (!out) throw IoError("failed writing feature file: " + path);
}

Mat read_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature file: " + path);
  log_file_read(path);
  check_header(in, kFeatMagic, path, "feature");
  std::uint32_t T = read_u32(in), D = read_u32(in);
  if (!in || T == 0 || D == 0) throw ValidationError("malformed feature file header: " + path);
  std::vector<float> f32(static_cast<std::size_t>(T) * D);
  in.read(reinterpret_cast<char*>(f32.data()), static_cast<std::streamsize>(f32.size() * sizeof(float)));
  if (!in || in.gcount() != static_cast<std::streamsize>(f32.size() * sizeof(float)))
    throw ValidationError("truncated feature file: " + path);
  Mat m(T, D);
  for (std::size_t i = 0; i < f32.size(); ++i) m.v[i] = static_cast<double>(f32[i]);
  if (!all_finite(m.v)) throw ValidationError("feature file holds non-finite values: " + path);
  return m;
}

void write_labels(const std::vector<int>& labels, int classes, const std::string& path) {
  if (labels.empty()) throw ValidationError("write_labels: empty sequence");
  if (classes < 1 || classes > 255) throw ValidationError("write_labels: classes must be in [1,255]");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= classes)
      throw ValidationError("write_labels: label " + std::to_string(labels[i]) + " at frame " +
                            std::to_string(i) + " outside [0," + std::to_string(classes - 1) + "]");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open label file for writing: " + path);
  out.write(kLablMagic, sizeof(kLablMagic));
  write_u32(out, kFileVersion);
  write_u32(out, static_cast<std::uint32_t>(labels.size()));
  write_u32(out, static_cast<std::uint32_t>(classes));
  std::vector<std::uint8_t> bytes(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) bytes[i] = static_cast<std::uint8_t>(labels[i]);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing label file: " + path);
}

std::pair<std::vector<int>, int> read_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open label file: " + path);
  log_file_read(path);
  check_header(in, kLablMagic, path, "label");
  std::uint32_t T = read_u32(in), C = read_u32(in);
  if (!in || T == 0 || C == 0 || C > 255) throw ValidationError("malformed label file header: " + path);
  std::vector<std::uint8_t> bytes(T);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(T));
  if (!in || in.gcount() != static_cast<std::streamsize>(T))
    throw ValidationError("truncated label file: " + path);
  std::vector<int> labels(T);
  for (std::size_t i = 0; i < T; ++i) {
    if (bytes[i] >= C)
      throw ValidationError("label file entry " + std::to_string(i) + " outside [0," +
                            std::to_string(C - 1) + "]: " + path);
    labels[i] = static_cast<int>(bytes[i]);
  }
  return {std::move(labels), static_cast<int>(C)};
}

}  // namespace cpkd
