#include "cpkd/common.hpp"

#include <cmath>
#include <mutex>
#include <thread>

namespace cpkd {

namespace {
std::mutex g_read_log_mutex;
std::vector<std::string> g_read_log;
}  // namespace

void log_file_read(const std::string& path) {
  std::lock_guard<std::mutex> lock(g_read_log_mutex);
  g_read_log.push_back(path);
}

std::vector<std::string> file_read_log() {
  std::lock_guard<std::mutex> lock(g_read_log_mutex);
  return g_read_log;
}

void clear_file_read_log() {
  std::lock_guard<std::mutex> lock(g_read_log_mutex);
  g_read_log.clear();
}

Mat one_hot(const std::vector<int>& labels, int classes) {
  if (classes <= 0) throw ValidationError("one_hot: classes must be positive");
  Mat m(labels.size(), static_cast<std::size_t>(classes), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    int c = labels[i];
    if (c < 0 || c >= classes)
      throw ValidationError("one_hot: label " + std::to_string(c) + " at frame " + std::to_string(i) +
                            " outside [0," + std::to_string(classes - 1) + "]");
    m(i, static_cast<std::size_t>(c)) = 1.0;
  }
  return m;
}

std::vector<int> argmax_rows(const Mat& probs) {
  std::vector<int> out(probs.rows, 0);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    double best = probs(i, 0);
    int arg = 0;
    for (std::size_t j = 1; j < probs.cols; ++j) {
      if (probs(i, j) > best) {
        best = probs(i, j);
        arg = static_cast<int>(j);
      }
    }
    out[i] = arg;
  }
  return out;
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  unsigned k = std::min<unsigned>(threads == 0 ? hw : threads, static_cast<unsigned>(n));
  if (k <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  std::size_t chunk = (n + k - 1) / k;
  for (unsigned w = 0; w < k; ++w) {
    std::size_t i0 = w * chunk;
    if (i0 >= n) break;
    std::size_t i1 = std::min(n, i0 + chunk);
    pool.emplace_back([&fn, i0, i1] { fn(i0, i1); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace cpkd
