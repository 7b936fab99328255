#include "cpkd/logic.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace cpkd {

// --- phase table -------------------------------------------------------------

namespace {

const char* kKeywords[] = {"True", "False", "X", "F", "W", "S"};

bool is_keyword(const std::string& s) {
  for (const char* k : kKeywords)
    if (s == k) return true;
  return false;
}

bool is_ident(const std::string& s) {
  if (s.empty() || (!std::isalpha(static_cast<unsigned char>(s[0])) && s[0] != '_')) return false;
  for (char c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
  return true;
}

}  // namespace

PhaseTable::PhaseTable(int classes) : classes_(classes) {
  if (classes < 1) throw ValidationError("PhaseTable: classes must be >= 1");
}

PhaseTable::PhaseTable(int classes, std::vector<std::string> names) : classes_(classes), names_(std::move(names)) {
  if (classes < 1) throw ValidationError("PhaseTable: classes must be >= 1");
  if (names_.size() != static_cast<std::size_t>(classes))
    throw ValidationError("PhaseTable: " + std::to_string(names_.size()) + " names for " +
                          std::to_string(classes) + " classes");
  for (const auto& n : names_) {
    if (!is_ident(n)) throw ValidationError("PhaseTable: '" + n + "' is not a valid atom name");
    if (is_keyword(n)) throw ValidationError("PhaseTable: name '" + n + "' collides with a grammar keyword");
    if (std::count(names_.begin(), names_.end(), n) != 1)
      throw ValidationError("PhaseTable: duplicate name '" + n + "'");
  }
}

int PhaseTable::resolve(const std::string& token) const {
  if (token.size() >= 2 && token[0] == 'P') {
    bool digits = true;
    for (std::size_t i = 1; i < token.size(); ++i)
      if (!std::isdigit(static_cast<unsigned char>(token[i]))) digits = false;
    if (digits) {
      long k = std::strtol(token.c_str() + 1, nullptr, 10);
      if (k >= 1 && k <= classes_) return static_cast<int>(k - 1);
      return -1;
    }
  }
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == token) return static_cast<int>(i);
  return -1;
}

const std::string& PhaseTable::name(int index) const {
  if (index < 0 || index >= classes_ || names_.empty())
    throw ValidationError("PhaseTable::name: no name for index " + std::to_string(index));
  return names_[static_cast<std::size_t>(index)];
}

const PhaseTable& esd_phase_table() {
  static const PhaseTable table(8, {"Preparation", "Estimation", "Marking", "Injection", "Incision", "ESD",
                                    "Vessel_treatment", "Clips"});
  return table;
}

// --- store ---------------------------------------------------------------------

std::size_t FormulaStore::KeyHash::operator()(const FormulaNode& n) const {
  std::size_t h = static_cast<std::size_t>(n.op);
  h = h * 1000003u ^ static_cast<std::size_t>(n.a + 1);
  h = h * 1000003u ^ static_cast<std::size_t>(n.b + 1);
  h = h * 1000003u ^ static_cast<std::size_t>(n.atom + 1);
  return h;
}

bool FormulaStore::KeyEq::operator()(const FormulaNode& x, const FormulaNode& y) const {
  return x.op == y.op && x.a == y.a && x.b == y.b && x.atom == y.atom;
}

int FormulaStore::intern(FormulaNode n) {
  auto it = interned_.find(n);
  if (it != interned_.end()) return it->second;
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(n);
  interned_.emplace(n, id);
  return id;
}

namespace {

void collect_reachable(const FormulaStore& store, int id, std::vector<char>& seen) {
  if (seen[static_cast<std::size_t>(id)]) return;
  seen[static_cast<std::size_t>(id)] = 1;
  const FormulaNode& n = store.node(id);
  if (n.a >= 0) collect_reachable(store, n.a, seen);
  if (n.b >= 0) collect_reachable(store, n.b, seen);
}

}  // namespace

std::size_t Formula::node_count() const {
  if (!defined()) throw ValidationError("Formula::node_count: undefined formula");
  std::vector<char> seen(store->size(), 0);
  collect_reachable(*store, root, seen);
  return static_cast<std::size_t>(std::count(seen.begin(), seen.end(), 1));
}

std::size_t Formula::operator_node_count() const {
  if (!defined()) throw ValidationError("Formula::operator_node_count: undefined formula");
  std::vector<char> seen(store->size(), 0);
  collect_reachable(*store, root, seen);
  std::size_t n = 0;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) continue;
    FormulaOp op = store->node(static_cast<int>(i)).op;
    if (op != FormulaOp::Atom && op != FormulaOp::ConstTrue && op != FormulaOp::ConstFalse) ++n;
  }
  return n;
}

namespace {

bool struct_eq(const FormulaStore& sa, int a, const FormulaStore& sb, int b) {
  const FormulaNode& na = sa.node(a);
  const FormulaNode& nb = sb.node(b);
  if (na.op != nb.op || na.atom != nb.atom) return false;
  if ((na.a >= 0) != (nb.a >= 0) || (na.b >= 0) != (nb.b >= 0)) return false;
  if (na.a >= 0 && !struct_eq(sa, na.a, sb, nb.a)) return false;
  if (na.b >= 0 && !struct_eq(sa, na.b, sb, nb.b)) return false;
  return true;
}

}  // namespace

bool structurally_equal(const Formula& f, const Formula& g) {
  if (!f.defined() || !g.defined()) throw ValidationError("structurally_equal: undefined formula");
  if (f.store == g.store) return f.root == g.root;  // hash-consing makes ids canonical
  return struct_eq(*f.store, f.root, *g.store, g.root);
}

// --- parser ----------------------------------------------------------------------

namespace {

struct Token {
  enum Kind { LParen, RParen, Bang, Pipe, Amp, Ident, End } kind;
  std::string text;
  std::size_t offset;
};

std::vector<Token> tokenize(const std::string& text) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    char c = text[i];
    if (c == ' ' || c == '\t' || c == '\r') {
      ++i;
      continue;
    }
    if (c == '(') out.push_back({Token::LParen, "(", i++});
    else if (c == ')') out.push_back({Token::RParen, ")", i++});
    else if (c == '!') out.push_back({Token::Bang, "!", i++});
    else if (c == '|') out.push_back({Token::Pipe, "|", i++});
    else if (c == '&') out.push_back({Token::Amp, "&", i++});
    else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < text.size() && (std::isalnum(static_cast<unsigned char>(text[j])) || text[j] == '_')) ++j;
      out.push_back({Token::Ident, text.substr(i, j - i), i});
      i = j;
    } else {
      throw ValidationError("parse: unexpected character '" + std::string(1, c) + "' at byte " +
                            std::to_string(i));
    }
  }
  out.push_back({Token::End, "", text.size()});
  return out;
}

class Parser {
 public:
  Parser(std::vector<Token> toks, const PhaseTable& table, FormulaStore& store)
      : toks_(std::move(toks)), table_(table), store_(store) {}

  int parse_top() {
    int id = parse_expr();
    if (peek().kind != Token::End)
      throw ValidationError("parse: trailing input at byte " + std::to_string(peek().offset));
    return id;
  }

 private:
  const Token& peek() const { return toks_[pos_]; }
  Token take() { return toks_[pos_++]; }

  [[noreturn]] void fail(const std::string& what, const Token& tok) {
    throw ValidationError("parse: " + what + " at byte " + std::to_string(tok.offset));
  }

  int parse_expr() {
    const Token tok = take();
    switch (tok.kind) {
      case Token::Bang: {
        int a = parse_expr();
        return store_.intern({FormulaOp::Not, a, -1, -1});
      }
      case Token::LParen: {
        int a = parse_expr();
        const Token op = take();
        FormulaOp fop;
        if (op.kind == Token::Pipe) fop = FormulaOp::Or;
        else if (op.kind == Token::Amp) fop = FormulaOp::And;
        else if (op.kind == Token::Ident && op.text == "W") fop = FormulaOp::WeakUntil;
        else if (op.kind == Token::Ident && op.text == "S") fop = FormulaOp::Since;
        else fail("expected one of '|', '&', 'W', 'S'", op);
        int b = parse_expr();
        const Token close = take();
        if (close.kind != Token::RParen) fail("expected ')'", close);
        return store_.intern({fop, a, b, -1});
      }
      case Token::Ident: {
        if (tok.text == "True") return store_.intern({FormulaOp::ConstTrue, -1, -1, -1});
        if (tok.text == "False") return store_.intern({FormulaOp::ConstFalse, -1, -1, -1});
        if (tok.text == "X") return store_.intern({FormulaOp::Next, parse_expr(), -1, -1});
        if (tok.text == "F") return store_.intern({FormulaOp::Eventually, parse_expr(), -1, -1});
        if (tok.text == "W" || tok.text == "S") fail("binary operator '" + tok.text + "' in formula position", tok);
        int atom = table_.resolve(tok.text);
        if (atom < 0)
          fail("unknown atom '" + tok.text + "' (classes=" + std::to_string(table_.classes()) + ")", tok);
        return store_.intern({FormulaOp::Atom, -1, -1, atom});
      }
      case Token::End: fail("unexpected end of input", tok);
      default: fail("unexpected token '" + tok.text + "'", tok);
    }
  }

  std::vector<Token> toks_;
  const PhaseTable& table_;
  FormulaStore& store_;
  std::size_t pos_{0};
};

}  // namespace

Formula parse_formula(const std::string& text, const PhaseTable& table, std::shared_ptr<FormulaStore> store) {
  if (!store) throw ValidationError("parse_formula: null store");
  Parser p(tokenize(text), table, *store);
  int root = p.parse_top();
  return Formula{std::move(store), root};
}

Formula parse_formula(const std::string& text, const PhaseTable& table) {
  return parse_formula(text, table, std::make_shared<FormulaStore>());
}

std::vector<Formula> parse_formula_lines(const std::string& text, const PhaseTable& table) {
  auto store = std::make_shared<FormulaStore>();
  std::vector<Formula> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    bool blank = true;
    for (char c : line)
      if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
    if (blank) continue;
    try {
      out.push_back(parse_formula(line, table, store));
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<Formula> parse_formula_file(const std::string& path, const PhaseTable& table) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open formula file: " + path);
  log_file_read(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_formula_lines(ss.str(), table);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

namespace {

void print_node(const FormulaStore& store, int id, std::string& out) {
  const FormulaNode& n = store.node(id);
  switch (n.op) {
    case FormulaOp::ConstTrue: out += "True"; return;
    case FormulaOp::ConstFalse: out += "False"; return;
    case FormulaOp::Atom: out += "P" + std::to_string(n.atom + 1); return;
    case FormulaOp::Not:
      out += "!";
      print_node(store, n.a, out);
      return;
    case FormulaOp::Next:
      out += "X ";
      print_node(store, n.a, out);
      return;
    case FormulaOp::Eventually:
      out += "F ";
      print_node(store, n.a, out);
      return;
    case FormulaOp::And:
    case FormulaOp::Or:
    case FormulaOp::WeakUntil:
    case FormulaOp::Since: {
      const char* sym = n.op == FormulaOp::And ? "&" : n.op == FormulaOp::Or ? "|"
                        : n.op == FormulaOp::WeakUntil ? "W" : "S";
      out += "(";
      print_node(store, n.a, out);
      out += " ";
      out += sym;
      out += " ";
      print_node(store, n.b, out);
      out += ")";
      return;
    }
  }
}

}  // namespace

std::string to_string(const Formula& f) {
  if (!f.defined()) throw ValidationError("to_string: undefined formula");
  std::string out;
  print_node(*f.store, f.root, out);
  return out;
}

// --- hard evaluation ----------------------------------------------------------

namespace {

struct HardCtx {
  const FormulaStore* store;
  const std::vector<int>* labels;
  int T;
  std::unordered_map<long long, bool> memo;
};

bool hd(HardCtx& c, int id, int t) {
  long long key = static_cast<long long>(id) * (c.T + 1) + t;
  auto it = c.memo.find(key);
  if (it != c.memo.end()) return it->second;
  const FormulaNode& n = c.store->node(id);
  bool r = false;
  switch (n.op) {
    case FormulaOp::ConstTrue: r = true; break;
    case FormulaOp::ConstFalse: r = false; break;
    case FormulaOp::Atom: r = (*c.labels)[static_cast<std::size_t>(t)] == n.atom; break;
    case FormulaOp::Not: r = !hd(c, n.a, t); break;
    case FormulaOp::And: r = hd(c, n.a, t) && hd(c, n.b, t); break;
    case FormulaOp::Or: r = hd(c, n.a, t) || hd(c, n.b, t); break;
    case FormulaOp::Next: r = (t + 1 < c.T) ? hd(c, n.a, t + 1) : false; break;
    case FormulaOp::Eventually: {
      for (int u = t; u < c.T && !r; ++u) r = hd(c, n.a, u);
      break;
    }
    case FormulaOp::WeakUntil: {
      int k = c.T - 1;
      for (int u = t; u < c.T; ++u)
        if (hd(c, n.b, u)) {
          k = u;
          break;
        }
      r = true;
      for (int u = t; u <= k && r; ++u) r = hd(c, n.a, u);
      break;
    }
    case FormulaOp::Since: {
      int k = -1;
      for (int u = t; u < c.T; ++u)
        if (hd(c, n.b, u)) {
          k = u;
          break;
        }
      if (k < 0) {
        r = true;
      } else {
        r = true;
        for (int u = k; u < c.T && r; ++u) r = hd(c, n.a, u);
      }
      break;
    }
  }
  c.memo.emplace(key, r);
  return r;
}

}  // namespace

bool eval_hard(const Formula& f, const std::vector<int>& labels, int t) {
  if (!f.defined()) throw ValidationError("eval_hard: undefined formula");
  if (labels.empty()) throw ValidationError("eval_hard: empty label sequence");
  if (t < 0 || t >= static_cast<int>(labels.size()))
    throw ValidationError("eval_hard: frame " + std::to_string(t) + " outside [0," +
                          std::to_string(labels.size() - 1) + "]");
  HardCtx c{f.store.get(), &labels, static_cast<int>(labels.size()), {}};
  return hd(c, f.root, t);
}

// --- soft evaluation ----------------------------------------------------------
//
// The data-level evaluator mirrors the graph evaluator's arithmetic step for
// step (same scale factors, same summation order) so the pivot-selection sign
// tests agree with the values that end up in the loss graph.

namespace {

double lse_data(const std::vector<double>& z) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : z) m = std::max(m, x);
  double s = 0.0;
  for (double x : z) s += std::exp(x - m);
  return m + std::log(s);
}

double softmin_data(const std::vector<double>& v, double gamma) {
  // A one-element softmin is the identity; returning the element unchanged
  // keeps that exact instead of paying two rounding steps for (-g)*(v*(-1/g)).
  if (v.size() == 1) return v[0];
  double r = -1.0 / gamma;
  std::vector<double> z(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) z[i] = r * v[i];
  return -gamma * lse_data(z);
}

double softmax_data(const std::vector<double>& v, double gamma) {
  std::vector<double> z(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) z[i] = -v[i];
  return -softmin_data(z, gamma);
}

struct SoftDataCtx {
  const FormulaStore* store;
  const double* s;  // row-major T x C
  int T, C;
  double gamma;
  std::unordered_map<long long, double> memo;
};

double sd(SoftDataCtx& c, int id, int t) {
  long long key = static_cast<long long>(id) * (c.T + 1) + t;
  auto it = c.memo.find(key);
  if (it != c.memo.end()) return it->second;
  const FormulaNode& n = c.store->node(id);
  double r = 0.0;
  switch (n.op) {
    case FormulaOp::ConstTrue: r = SOFT_CONST_BOUND; break;
    case FormulaOp::ConstFalse: r = -SOFT_CONST_BOUND; break;
    case FormulaOp::Atom: r = c.s[static_cast<std::size_t>(t) * c.C + n.atom]; break;
    case FormulaOp::Not: r = -sd(c, n.a, t); break;
    case FormulaOp::And: r = softmin_data({sd(c, n.a, t), sd(c, n.b, t)}, c.gamma); break;
    case FormulaOp::Or: r = softmax_data({sd(c, n.a, t), sd(c, n.b, t)}, c.gamma); break;
    case FormulaOp::Next: r = (t + 1 < c.T) ? sd(c, n.a, t + 1) : -SOFT_CONST_BOUND; break;
    case FormulaOp::Eventually: {
      std::vector<double> v;
      v.reserve(static_cast<std::size_t>(c.T - t));
      for (int u = t; u < c.T; ++u) v.push_back(sd(c, n.a, u));
      r = softmax_data(v, c.gamma);
      break;
    }
    case FormulaOp::WeakUntil: {
      int k = c.T - 1;
      for (int u = t; u < c.T; ++u)
        if (sd(c, n.b, u) > 0.0) {
          k = u;
          break;
        }
      std::vector<double> v;
      v.reserve(static_cast<std::size_t>(k - t + 1));
      for (int u = t; u <= k; ++u) v.push_back(sd(c, n.a, u));
      r = softmin_data(v, c.gamma);
      break;
    }
    case FormulaOp::Since: {
      int k = -1;
      for (int u = t; u < c.T; ++u)
        if (sd(c, n.b, u) > 0.0) {
          k = u;
          break;
        }
      if (k < 0) {
        r = SOFT_CONST_BOUND;
      } else {
        std::vector<double> v;
        v.reserve(static_cast<std::size_t>(c.T - k));
        for (int u = k; u < c.T; ++u) v.push_back(sd(c, n.a, u));
        r = softmin_data(v, c.gamma);
      }
      break;
    }
  }
  c.memo.emplace(key, r);
  return r;
}

Value softmin_value(const Value& vec, double gamma) {
  // Mirror of softmin_data: one element passes through untouched (identity
  // value and identity gradient), longer vectors go through the shared
  // max-shifted log-sum-exp kernel.
  if (vec.numel() == 1) return vec;
  return affine(logsumexp_all(affine(vec, -1.0 / gamma, 0.0)), -gamma, 0.0);
}

Value softmax_value(const Value& vec, double gamma) { return neg(softmin_value(neg(vec), gamma)); }

struct SoftGraphCtx {
  const FormulaStore* store;
  Value scores;  // rank-2 [T, C]
  int T, C;
  double gamma;
  SoftDataCtx data;
  std::unordered_map<long long, Value> memo;
};

Value sg(SoftGraphCtx& c, int id, int t);

// f_u(child) for u in [t0, t1], as a rank-1 value. Leaf-shaped children take
// a column-slice fast path; anything else concatenates memoized scalars.
// Both routes produce bitwise-identical numbers (same loads, same kernels).
Value range_values(SoftGraphCtx& c, int id, int t0, int t1) {
  const FormulaNode& n = c.store->node(id);
  if (n.op == FormulaOp::Atom)
    return slice_rows(column(c.scores, static_cast<std::size_t>(n.atom)), static_cast<std::size_t>(t0),
                      static_cast<std::size_t>(t1) + 1);
  if (n.op == FormulaOp::Not && c.store->node(n.a).op == FormulaOp::Atom)
    return neg(slice_rows(column(c.scores, static_cast<std::size_t>(c.store->node(n.a).atom)),
                          static_cast<std::size_t>(t0), static_cast<std::size_t>(t1) + 1));
  if (n.op == FormulaOp::ConstTrue || n.op == FormulaOp::ConstFalse) {
    double v = n.op == FormulaOp::ConstTrue ? SOFT_CONST_BOUND : -SOFT_CONST_BOUND;
    return Value::constant(std::vector<double>(static_cast<std::size_t>(t1 - t0 + 1), v),
                           {static_cast<std::size_t>(t1 - t0 + 1)});
  }
  std::vector<Value> parts;
  parts.reserve(static_cast<std::size_t>(t1 - t0 + 1));
  for (int u = t0; u <= t1; ++u) parts.push_back(sg(c, id, u));
  return concat(parts, 0);
}

Value sg(SoftGraphCtx& c, int id, int t) {
  long long key = static_cast<long long>(id) * (c.T + 1) + t;
  auto it = c.memo.find(key);
  if (it != c.memo.end()) return it->second;
  const FormulaNode& n = c.store->node(id);
  Value r;
  switch (n.op) {
    case FormulaOp::ConstTrue: r = Value::scalar(SOFT_CONST_BOUND); break;
    case FormulaOp::ConstFalse: r = Value::scalar(-SOFT_CONST_BOUND); break;
    case FormulaOp::Atom:
      r = element(c.scores, static_cast<std::size_t>(t), static_cast<std::size_t>(n.atom));
      break;
    case FormulaOp::Not: r = neg(sg(c, n.a, t)); break;
    case FormulaOp::And: {
      std::vector<Value> parts{sg(c, n.a, t), sg(c, n.b, t)};
      r = softmin_value(concat(parts, 0), c.gamma);
      break;
    }
    case FormulaOp::Or: {
      std::vector<Value> parts{sg(c, n.a, t), sg(c, n.b, t)};
      r = softmax_value(concat(parts, 0), c.gamma);
      break;
    }
    case FormulaOp::Next:
      r = (t + 1 < c.T) ? sg(c, n.a, t + 1) : Value::scalar(-SOFT_CONST_BOUND);
      break;
    case FormulaOp::Eventually: r = softmax_value(range_values(c, n.a, t, c.T - 1), c.gamma); break;
    case FormulaOp::WeakUntil: {
      int k = c.T - 1;
      for (int u = t; u < c.T; ++u)
        if (sd(c.data, n.b, u) > 0.0) {
          k = u;
          break;
        }
      r = softmin_value(range_values(c, n.a, t, k), c.gamma);
      break;
    }
    case FormulaOp::Since: {
      int k = -1;
      for (int u = t; u < c.T; ++u)
        if (sd(c.data, n.b, u) > 0.0) {
          k = u;
          break;
        }
      r = (k < 0) ? Value::scalar(SOFT_CONST_BOUND) : softmin_value(range_values(c, n.a, k, c.T - 1), c.gamma);
      break;
    }
  }
  c.memo.emplace(key, r);
  return r;
}

void check_scores_shape(std::size_t rows, std::size_t cols, int t, const char* who) {
  if (rows == 0 || cols == 0) throw ValidationError(std::string(who) + ": empty score matrix");
  if (t < 0 || t >= static_cast<int>(rows))
    throw ValidationError(std::string(who) + ": frame " + std::to_string(t) + " outside [0," +
                          std::to_string(rows - 1) + "]");
}

void check_atoms_fit(const FormulaStore& store, int root, int classes, const char* who) {
  std::vector<char> seen(store.size(), 0);
  collect_reachable(store, root, seen);
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) continue;
    const FormulaNode& n = store.node(static_cast<int>(i));
    if (n.op == FormulaOp::Atom && n.atom >= classes)
      throw ValidationError(std::string(who) + ": atom P" + std::to_string(n.atom + 1) +
                            " outside score matrix with " + std::to_string(classes) + " columns");
  }
}

}  // namespace

double eval_soft_data(const Formula& f, const Mat& scores, int t, double gamma) {
  if (!f.defined()) throw ValidationError("eval_soft_data: undefined formula");
  if (!(gamma > 0.0)) throw ValidationError("eval_soft_data: gamma must be positive");
  check_scores_shape(scores.rows, scores.cols, t, "eval_soft_data");
  check_atoms_fit(*f.store, f.root, static_cast<int>(scores.cols), "eval_soft_data");
  SoftDataCtx c{f.store.get(), scores.v.data(), static_cast<int>(scores.rows), static_cast<int>(scores.cols),
                gamma, {}};
  return sd(c, f.root, t);
}

Value eval_soft(const Formula& f, const Value& scores, int t, double gamma) {
  if (!f.defined()) throw ValidationError("eval_soft: undefined formula");
  if (!(gamma > 0.0)) throw ValidationError("eval_soft: gamma must be positive");
  if (scores.shape().size() != 2)
    throw ValidationError("eval_soft: score matrix must be rank-2, got " + shape_str(scores.shape()));
  std::size_t T = scores.shape()[0], C = scores.shape()[1];
  check_scores_shape(T, C, t, "eval_soft");
  check_atoms_fit(*f.store, f.root, static_cast<int>(C), "eval_soft");
  SoftGraphCtx c{f.store.get(),
                 scores,
                 static_cast<int>(T),
                 static_cast<int>(C),
                 gamma,
                 {f.store.get(), scores.data().data(), static_cast<int>(T), static_cast<int>(C), gamma, {}},
                 {}};
  return sg(c, f.root, t);
}

Mat scores_from_labels(const std::vector<int>& labels, int classes) {
  if (labels.empty()) throw ValidationError("scores_from_labels: empty label sequence");
  Mat y = one_hot(labels, classes);
  Mat s(y.rows, y.cols);
  for (std::size_t i = 0; i < y.v.size(); ++i) s.v[i] = 2.0 * y.v[i] - 1.0;
  return s;
}

Value logic_loss(const std::vector<Formula>& formulas, const Value& probs, double gamma) {
  if (formulas.empty()) throw ValidationError("logic_loss: empty formula list");
  if (!(gamma > 0.0)) throw ValidationError("logic_loss: gamma must be > 0");
  if (probs.shape().size() != 2)
    throw ValidationError("logic_loss: probability matrix must be rank-2, got " + shape_str(probs.shape()));
  Value scores = affine(probs, 2.0, -1.0);
  std::size_t T = scores.shape()[0], C = scores.shape()[1];

  // Formulas sharing a store also share one evaluation context, so common
  // subterms are evaluated once per frame across the whole rule set.
  std::vector<std::unique_ptr<SoftGraphCtx>> ctxs;
  std::unordered_map<const FormulaStore*, SoftGraphCtx*> by_store;
  std::vector<Value> penalties;
  penalties.reserve(formulas.size());
  for (const auto& f : formulas) {
    if (!f.defined()) throw ValidationError("logic_loss: undefined formula in list");
    check_atoms_fit(*f.store, f.root, static_cast<int>(C), "logic_loss");
    SoftGraphCtx* ctx = nullptr;
    auto it = by_store.find(f.store.get());
    if (it != by_store.end()) {
      ctx = it->second;
    } else {
      ctxs.push_back(std::make_unique<SoftGraphCtx>(SoftGraphCtx{
          f.store.get(),
          scores,
          static_cast<int>(T),
          static_cast<int>(C),
          gamma,
          {f.store.get(), scores.data().data(), static_cast<int>(T), static_cast<int>(C), gamma, {}},
          {}}));
      ctx = ctxs.back().get();
      by_store.emplace(f.store.get(), ctx);
    }
    penalties.push_back(softplus(neg(sg(*ctx, f.root, 0))));
  }
  return mean_all(concat(penalties, 0));
}

// --- rule set ---------------------------------------------------------------------

std::vector<Formula> default_rules() {
  auto store = std::make_shared<FormulaStore>();
  auto atom = [&](int idx) { return store->intern({FormulaOp::Atom, -1, -1, idx}); };
  auto not_ = [&](int a) { return store->intern({FormulaOp::Not, a, -1, -1}); };
  auto or_ = [&](int a, int b) { return store->intern({FormulaOp::Or, a, b, -1}); };
  auto ev = [&](int a) { return store->intern({FormulaOp::Eventually, a, -1, -1}); };
  auto wk = [&](int a, int b) { return store->intern({FormulaOp::WeakUntil, a, b, -1}); };

  // 0-based phase indices in the ESD table.
  constexpr int kEstimation = 1, kMarking = 2, kInjection = 3, kIncision = 4, kEsd = 5, kVessel = 6,
                kClips = 7;

  std::vector<Formula> out;
  auto precedence = [&](int q, int r) {
    // "q waits for r, wherever r occurs": ((!(F r)) | ((!q) W r))
    int guard = not_(ev(atom(r)));
    int wait = wk(not_(atom(q)), atom(r));
    out.push_back(Formula{store, or_(guard, wait)});
  };

  for (int q : {kInjection, kIncision, kEsd, kVessel, kClips})
    for (int r : {kMarking, kEstimation}) precedence(q, r);
  for (int q : {kVessel, kClips})
    for (int r : {kInjection, kIncision, kEsd}) precedence(q, r);
  const int cooc[] = {kMarking, kInjection, kIncision, kEsd};
  for (int a : cooc)
    for (int b : cooc) {
      if (a == b) continue;
      out.push_back(Formula{store, or_(not_(ev(atom(a))), ev(atom(b)))});
    }
  return out;
}

}  // namespace cpkd
