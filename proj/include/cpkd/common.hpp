#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpkd {

// Thrown for contract violations (bad arguments, malformed content).
// The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown for filesystem / serialization failures. CLI exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major matrix of doubles. The whole project runs in f64;
// on-disk feature files are f32 and get widened on load.
struct Mat {
  std::size_t rows{0};
  std::size_t cols{0};
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
  std::size_t size() const { return v.size(); }
};

// One-hot encode integer labels; validates 0 <= label < classes.
Mat one_hot(const std::vector<int>& labels, int classes);

// Argmax per row; ties resolved to the lowest index.
std::vector<int> argmax_rows(const Mat& probs);

bool all_finite(const std::vector<double>& v);

// Runs fn(i0, i1) over disjoint chunks of [0, n) on up to `threads` threads.
// Used where work items are independent by construction.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t, std::size_t)>& fn);

// Process-wide log of data files opened for reading. Every loader records
// the paths it touches, which lets tests assert that a training run never
// reads held-out files. Thread-safe.
void log_file_read(const std::string& path);
std::vector<std::string> file_read_log();
void clear_file_read_log();

}  // namespace cpkd
