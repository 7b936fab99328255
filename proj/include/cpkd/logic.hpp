#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "cpkd/common.hpp"
#include "cpkd/tensor.hpp"

namespace cpkd {

// Maps atom names to class indices. Atoms are always writable as P1..PC
// (1-based, matching the common notation for phase propositions); a table
// may add symbolic names. Names may not collide with grammar keywords.
class PhaseTable {
 public:
  explicit PhaseTable(int classes);
  PhaseTable(int classes, std::vector<std::string> names);
  int classes() const { return classes_; }
  // Resolves "P<k>" or a registered name; -1 when unknown.
  int resolve(const std::string& token) const;
  const std::string& name(int index) const;
  bool has_names() const { return !names_.empty(); }

 private:
  int classes_;
  std::vector<std::string> names_;
};

// The eight-phase endoscopic submucosal dissection workflow:
// P1 Preparation, P2 Estimation, P3 Marking, P4 Injection, P5 Incision,
// P6 ESD, P7 Vessel_treatment, P8 Clips.
const PhaseTable& esd_phase_table();

enum class FormulaOp : std::uint8_t {
  ConstTrue,
  ConstFalse,
  Atom,
  Not,
  And,
  Or,
  Next,
  Eventually,
  WeakUntil,
  Since,
};

struct FormulaNode {
  FormulaOp op;
  int a{-1};     // first child id
  int b{-1};     // second child id
  int atom{-1};  // class index for Atom
};

// Hash-consed arena: structurally identical subterms share one node, so a
// parsed rule set forms a DAG and per-(node, frame) memoization during
// evaluation touches each distinct subterm once.
class FormulaStore {
 public:
  int intern(FormulaNode n);
  const FormulaNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<FormulaNode> nodes_;
  struct KeyHash {
    std::size_t operator()(const FormulaNode& n) const;
  };
  struct KeyEq {
    bool operator()(const FormulaNode& x, const FormulaNode& y) const;
  };
  std::unordered_map<FormulaNode, int, KeyHash, KeyEq> interned_;
};

struct Formula {
  std::shared_ptr<FormulaStore> store;
  int root{-1};

  bool defined() const { return store != nullptr && root >= 0; }
  std::size_t node_count() const;           // distinct reachable nodes
  std::size_t operator_node_count() const;  // reachable nodes that are not leaves
};

bool structurally_equal(const Formula& f, const Formula& g);

// Grammar (binary connectives fully parenthesized, so no precedence):
//   formula := 'True' | 'False' | atom | '!' formula
//            | '(' formula '|' formula ')' | '(' formula '&' formula ')'
//            | 'X' formula | 'F' formula
//            | '(' formula 'W' formula ')' | '(' formula 'S' formula ')'
// Errors carry the byte offset of the offending token.
Formula parse_formula(const std::string& text, const PhaseTable& table);
Formula parse_formula(const std::string& text, const PhaseTable& table, std::shared_ptr<FormulaStore> store);

// One formula per non-empty line; '#' starts a comment. All formulas share
// one store.
std::vector<Formula> parse_formula_lines(const std::string& text, const PhaseTable& table);
std::vector<Formula> parse_formula_file(const std::string& path, const PhaseTable& table);

// Canonical text form; parse(to_string(f)) reproduces the same structure.
std::string to_string(const Formula& f);

// Exact boolean semantics over integer labels, evaluated at frame t.
bool eval_hard(const Formula& f, const std::vector<int>& labels, int t);

// Smoothed real-valued semantics over a score matrix (T x C, scores in
// roughly [-1,1]; satisfaction is a strictly positive value). gamma is the
// smoothing temperature: conjunction becomes
//   softmin_gamma{v} = -gamma * log(sum_i exp(-v_i / gamma))
// and disjunction its mirrored counterpart; as gamma -> 0+ both converge to
// min/max and the sign converges to the boolean semantics. Constants map to
// +/-SOFT_CONST_BOUND. Bounded-window operators pick their pivot frame k by
// a hard sign test on the (data-level) soft score of the second operand;
// gradients flow only through the smoothed window of the first operand.
inline constexpr double SOFT_CONST_BOUND = 1e4;

Value eval_soft(const Formula& f, const Value& scores, int t, double gamma);
double eval_soft_data(const Formula& f, const Mat& scores, int t, double gamma);

// +/-1 score matrix for a hard label sequence.
Mat scores_from_labels(const std::vector<int>& labels, int classes);

// Mean over formulas of softplus(-f_0(formula, 2P - 1)): differentiable
// penalty that is near zero when every formula is satisfied at frame 0.
Value logic_loss(const std::vector<Formula>& formulas, const Value& probs, double gamma);

// Workflow ordering rules for the eight-phase ESD table:
//   I.  each of {Injection, Incision, ESD, Vessel_treatment, Clips} must
//       wait for {Marking, Estimation}:   ((!(F r)) | ((!q) W r))
//   II. each of {Vessel_treatment, Clips} must wait for
//       {Injection, Incision, ESD}: same shape
//   III. {Marking, Injection, Incision, ESD} co-occur pairwise:
//       ((!(F a)) | (F b))
// Precedence formulas are guarded by the prerequisite's existence so
// sequences that legitimately omit the optional dissection block still
// satisfy the set; rule III supplies the co-occurrence strength inside the
// block. All 28 formulas share one store.
std::vector<Formula> default_rules();

}  // namespace cpkd
