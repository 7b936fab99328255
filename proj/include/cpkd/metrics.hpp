#pragma once

#include <string>
#include <vector>

#include "cpkd/common.hpp"
#include "cpkd/logic.hpp"

namespace cpkd {

struct PerClassStats {
  int cls{0};
  long tp{0}, fp{0}, fn{0};
  double precision{0.0}, recall{0.0}, jaccard{0.0};
};

struct EvalReport {
  double accuracy{0.0};
  double macro_precision{0.0};
  double macro_recall{0.0};
  double macro_jaccard{0.0};
  std::vector<PerClassStats> per_class;  // classes present in truth or prediction
  // Filled by relaxed_metrics:
  double relaxed_accuracy{0.0};
  double relaxed_macro_precision{0.0};
  double relaxed_macro_recall{0.0};
  double relaxed_macro_jaccard{0.0};
};

// Frame accuracy plus per-class precision / recall / Jaccard, macro-averaged
// over the classes present in truth or prediction (classes absent from both
// are excluded; zero denominators score 0).
EvalReport frame_metrics(const std::vector<int>& pred, const std::vector<int>& truth);

// Relaxed protocol: a mismatched frame is forgiven when it lies within
// `window` frames of a true label change AND its predicted label occurs in
// the true sequence within +/- window frames. Implemented by correcting such
// frames to the truth and re-scoring, which makes relaxed >= strict for
// every reported metric. Returns the strict report with the relaxed fields
// filled in.
EvalReport relaxed_metrics(const std::vector<int>& pred, const std::vector<int>& truth, int window = 10);

// Number of formulas whose exact semantics are violated at frame 0.
int count_violations(const std::vector<int>& pred, const std::vector<Formula>& formulas);

// --- report + prediction files ---------------------------------------------

// Line-oriented "key=value" report. Keys keep insertion order.
using Report = std::vector<std::pair<std::string, std::string>>;

std::string format_report(const Report& report);
void write_report(const Report& report, const std::string& path);
Report read_report(const std::string& path);
// First value for `key`; throws ValidationError when missing.
const std::string& report_value(const Report& report, const std::string& key);

// Per-frame prediction table: header then one row per frame,
//   frame,true,pred,prob_0..prob_{C-1}
// `truth` may be empty (written as -1) when ground truth is unknown.
struct Ribbons {
  std::vector<int> truth;  // -1 where unknown
  std::vector<int> pred;
  Mat probs;
};

void write_ribbons(const Ribbons& r, const std::string& path);
Ribbons read_ribbons(const std::string& path);

}  // namespace cpkd
