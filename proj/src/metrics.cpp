#include "cpkd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace cpkd {

namespace {

void check_lengths(const std::vector<int>& pred, const std::vector<int>& truth, const char* who) {
  if (pred.empty()) throw ValidationError(std::string(who) + ": empty prediction");
  if (pred.size() != truth.size())
    throw ValidationError(std::string(who) + ": " + std::to_string(pred.size()) + " predictions vs " +
                          std::to_string(truth.size()) + " truth frames");
}

double safe_ratio(long num, long den) { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }

}  // namespace

EvalReport frame_metrics(const std::vector<int>& pred, const std::vector<int>& truth) {
  check_lengths(pred, truth, "frame_metrics");
  EvalReport r;
  long correct = 0;
  std::set<int> classes;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == truth[i]) ++correct;
    classes.insert(pred[i]);
    classes.insert(truth[i]);
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
  for (int c : classes) {
    PerClassStats s;
    s.cls = c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      bool p = pred[i] == c, t = truth[i] == c;
      if (p && t) ++s.tp;
      else if (p) ++s.fp;
      else if (t) ++s.fn;
    }
    s.precision = safe_ratio(s.tp, s.tp + s.fp);
    s.recall = safe_ratio(s.tp, s.tp + s.fn);
    s.jaccard = safe_ratio(s.tp, s.tp + s.fp + s.fn);
    r.per_class.push_back(s);
    r.macro_precision += s.precision;
    r.macro_recall += s.recall;
    r.macro_jaccard += s.jaccard;
  }
  double n = static_cast<double>(r.per_class.size());
  r.macro_precision /= n;
  r.macro_recall /= n;
  r.macro_jaccard /= n;
  return r;
}

EvalReport relaxed_metrics(const std::vector<int>& pred, const std::vector<int>& truth, int window) {
  check_lengths(pred, truth, "relaxed_metrics");
  if (window < 0) throw ValidationError("relaxed_metrics: window must be >= 0");
  const long T = static_cast<long>(pred.size());

  // Frames within `window` of a true label change.
  std::vector<char> near_change(pred.size(), 0);
  for (long g = 0; g + 1 < T; ++g) {
    if (truth[static_cast<std::size_t>(g)] == truth[static_cast<std::size_t>(g) + 1]) continue;
    long lo = std::max<long>(0, g - window + 1);
    long hi = std::min<long>(T - 1, g + window);
    for (long i = lo; i <= hi; ++i) near_change[static_cast<std::size_t>(i)] = 1;
  }

  std::vector<int> corrected = pred;
  for (long i = 0; i < T; ++i) {
    if (pred[static_cast<std::size_t>(i)] == truth[static_cast<std::size_t>(i)]) continue;
    if (!near_change[static_cast<std::size_t>(i)]) continue;
    long lo = std::max<long>(0, i - window);
    long hi = std::min<long>(T - 1, i + window);
    for (long j = lo; j <= hi; ++j) {
      if (truth[static_cast<std::size_t>(j)] == pred[static_cast<std::size_t>(i)]) {
        corrected[static_cast<std::size_t>(i)] = truth[static_cast<std::size_t>(i)];
        break;
      }
    }
  }

  EvalReport strict = frame_metrics(pred, truth);
  EvalReport relaxed = frame_metrics(corrected, truth);
  strict.relaxed_accuracy = relaxed.accuracy;
  strict.relaxed_macro_precision = relaxed.macro_precision;
  strict.relaxed_macro_recall = relaxed.macro_recall;
  strict.relaxed_macro_jaccard = relaxed.macro_jaccard;
  return strict;
}

int count_violations(const std::vector<int>& pred, const std::vector<Formula>& formulas) {
  if (formulas.empty()) throw ValidationError("count_violations: empty formula list");
  if (pred.empty()) throw ValidationError("count_violations: empty prediction");
  int n = 0;
  for (const auto& f : formulas)
    if (!eval_hard(f, pred, 0)) ++n;
  return n;
}

// --- report + prediction files ---------------------------------------------

std::string format_report(const Report& report) {
  std::string out;
  for (const auto& [k, v] : report) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos)
      throw ValidationError("format_report: key '" + k + "' contains a reserved character");
    if (v.find('\n') != std::string::npos)
      throw ValidationError("format_report: value for '" + k + "' contains a newline");
    out += k;
    out += "=";
    out += v;
    out += "\n";
  }
  return out;
}

void write_report(const Report& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open report for writing: " + path);
  out << format_report(report);
  if (!out) throw IoError("failed writing report: " + path);
}

Report read_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open report: " + path);
  log_file_read(path);
  Report r;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(path + ": line " + std::to_string(lineno) + " is not key=value");
    r.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return r;
}

const std::string& report_value(const Report& report, const std::string& key) {
  for (const auto& [k, v] : report)
    if (k == key) return v;
  throw ValidationError("report has no key '" + key + "'");
}

void write_ribbons(const Ribbons& r, const std::string& path) {
  const std::size_t T = r.pred.size(), C = r.probs.cols;
  if (r.probs.rows != T) throw ValidationError("write_ribbons: probability rows do not match predictions");
  if (!r.truth.empty() && r.truth.size() != T)
    throw ValidationError("write_ribbons: truth length does not match predictions");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open prediction file for writing: " + path);
  out << "frame,true,pred";
  for (std::size_t c = 0; c < C; ++c) out << ",prob_" << c;
  out << "\n";
  char buf[40];
  for (std::size_t i = 0; i < T; ++i) {
    out << i << "," << (r.truth.empty() ? -1 : r.truth[i]) << "," << r.pred[i];
    for (std::size_t c = 0; c < C; ++c) {
      std::snprintf(buf, sizeof(buf), ",%.17g", r.probs(i, c));
      out << buf;
    }
    out << "\n";
  }
  if (!out) throw IoError("failed writing prediction file: " + path);
}

Ribbons read_ribbons(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open prediction file: " + path);
  log_file_read(path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path + ": empty prediction file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::size_t C = 0;
  {
    std::istringstream hs(line);
    std::string col;
    std::vector<std::string> cols;
    while (std::getline(hs, col, ',')) cols.push_back(col);
    if (cols.size() < 4 || cols[0] != "frame" || cols[1] != "true" || cols[2] != "pred")
      throw ValidationError(path + ": unexpected header '" + line + "'");
    C = cols.size() - 3;
  }
  Ribbons r;
  std::vector<double> probs;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 3 + C)
      throw ValidationError(path + ": line " + std::to_string(lineno) + " has " +
                            std::to_string(cells.size()) + " columns, expected " + std::to_string(3 + C));
    try {
      std::size_t frame = static_cast<std::size_t>(std::stoll(cells[0]));
      if (frame != r.pred.size())
        throw ValidationError(path + ": line " + std::to_string(lineno) + " frame index out of order");
      r.truth.push_back(std::stoi(cells[1]));
      r.pred.push_back(std::stoi(cells[2]));
      for (std::size_t c = 0; c < C; ++c) probs.push_back(std::stod(cells[3 + c]));
    } catch (const std::invalid_argument&) {
      throw ValidationError(path + ": line " + std::to_string(lineno) + " has a malformed number");
    } catch (const std::out_of_range&) {
      throw ValidationError(path + ": line " + std::to_string(lineno) + " has an out-of-range number");
    }
  }
  if (r.pred.empty()) throw ValidationError(path + ": no prediction rows");
  r.probs.rows = r.pred.size();
  r.probs.cols = C;
  r.probs.v = std::move(probs);
  bool all_unknown = std::all_of(r.truth.begin(), r.truth.end(), [](int t) { return t < 0; });
  if (all_unknown) r.truth.clear();
  return r;
}

}  // namespace cpkd
