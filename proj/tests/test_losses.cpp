// Tests for the training losses: brute-force oracles for each term, the
// boundary-target construction, clamping behavior, weight handling, and
// finite-difference gradients taken through a softmax head.
#include <cmath>
#include <vector>

#include "cpkd/losses.hpp"
#include "cpkd/rng.hpp"
#include "doctest.h"

using namespace cpkd;

namespace {

Mat random_probs(std::size_t T, std::size_t C, Rng& rng) {
  Mat p(T, C);
  for (std::size_t i = 0; i < T; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      p(i, c) = 0.05 + rng.uniform();
      s += p(i, c);
    }
    for (std::size_t c = 0; c < C; ++c) p(i, c) /= s;
  }
  return p;
}

std::vector<int> random_labels(std::size_t T, int C, Rng& rng) {
  std::vector<int> l(T);
  for (auto& x : l) x = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(C)));
  return l;
}

// Independent reimplementation of the documented construction, kept free of
// the production code's vector plumbing.
std::vector<double> oracle_targets(const std::vector<int>& labels, double sigma) {
  const long n = static_cast<long>(labels.size()) - 1;
  auto reflect = [&](long j) {
    if (n == 1) return std::size_t{0};
    while (j < 0 || j >= n) {
      if (j < 0) j = -j;
      if (j >= n) j = 2 * (n - 1) - j;
    }
    return static_cast<std::size_t>(j);
  };
  const long radius = static_cast<long>(std::ceil(4.0 * sigma));
  std::vector<double> out(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    double acc = 0.0;
    for (long d = -radius; d <= radius; ++d) {
      std::size_t src = reflect(i + d);
      double change = labels[src] != labels[src + 1] ? 1.0 : 0.0;
      acc += std::exp(-static_cast<double>(d * d) / (2.0 * sigma * sigma)) * change;
    }
    out[static_cast<std::size_t>(i)] = std::min(1.0, std::max(0.0, acc));
  }
  return out;
}

}  // namespace

TEST_CASE("default loss weights") {
  LossWeights w;
  CHECK(w.ce == 0.5);
  CHECK(w.smo == 0.025);
  CHECK(w.bd == 0.1);
  CHECK(w.pl == 0.1);
}

TEST_CASE("classification term matches the brute-force oracle") {
  // Uniform single frame over four classes: -(1/4) log(1/4) = ln(4)/4.
  Mat uni(1, 4, 0.25);
  Mat y(1, 4);
  y(0, 2) = 1.0;
  CHECK(ce_loss(Value::from_mat(uni), y).item() ==
        doctest::Approx(std::log(4.0) / 4.0).epsilon(1e-14));

  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t T = 2 + rng.uniform_int(8), C = 2 + rng.uniform_int(4);
    Mat p = random_probs(T, C, rng);
    std::vector<int> labels = random_labels(T, static_cast<int>(C), rng);
    Mat onehot = one_hot(labels, static_cast<int>(C));
    double oracle = 0.0;
    for (std::size_t t = 0; t < T; ++t)
      oracle -= std::log(std::max(p(t, static_cast<std::size_t>(labels[t])), 1e-12));
    oracle /= static_cast<double>(T * C);
    CHECK(ce_loss(Value::from_mat(p), onehot).item() == doctest::Approx(oracle).epsilon(1e-12));
  }

  // The probability floor keeps a zero in the target cell finite.
  Mat zero(1, 2);
  zero(0, 0) = 0.0;
  zero(0, 1) = 1.0;
  Mat yz(1, 2);
  yz(0, 0) = 1.0;
  CHECK(ce_loss(Value::from_mat(zero), yz).item() ==
        doctest::Approx(-std::log(1e-12) / 2.0).epsilon(1e-12));

  // Rows that do not sum to one within 1e-6 are a contract violation.
  Mat bad(1, 2);
  bad(0, 0) = 0.6;
  bad(0, 1) = 0.6;
  CHECK_THROWS_AS(ce_loss(Value::from_mat(bad), yz), ValidationError);
  Mat wrong_shape(2, 2, 0.5);
  CHECK_THROWS_AS(ce_loss(Value::from_mat(wrong_shape), yz), ValidationError);
}

TEST_CASE("smoothness term matches the brute-force oracle and clamps at 16") {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t T = 2 + rng.uniform_int(8), C = 2 + rng.uniform_int(4);
    Mat p = random_probs(T, C, rng);
    double oracle = 0.0;
    for (std::size_t t = 0; t + 1 < T; ++t)
      for (std::size_t c = 0; c < C; ++c) {
        double d = std::log(std::max(p(t + 1, c), 1e-12)) - std::log(std::max(p(t, c), 1e-12));
        oracle += std::min(d * d, 16.0);
      }
    oracle /= static_cast<double>((T - 1) * C);
    CHECK(smooth_loss(Value::from_mat(p)).item() == doctest::Approx(oracle).epsilon(1e-12));
  }

  // A sharp flip saturates every squared log-difference at the clamp.
  Mat flip(2, 2);
  flip(0, 0) = 1e-15;
  flip(0, 1) = 1.0;
  flip(1, 0) = 1.0;
  flip(1, 1) = 1e-15;
  CHECK(smooth_loss(Value::from_mat(flip)).item() == 16.0);

  // Reversing time does not change the penalty.
  Mat p = random_probs(7, 3, rng);
  Mat r(7, 3);
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t c = 0; c < 3; ++c) r(t, c) = p(6 - t, c);
  CHECK(smooth_loss(Value::from_mat(p)).item() ==
        doctest::Approx(smooth_loss(Value::from_mat(r)).item()).epsilon(1e-14));

  Mat one(1, 3, 1.0 / 3.0);
  CHECK_THROWS_AS(smooth_loss(Value::from_mat(one)), ValidationError);
}

TEST_CASE("boundary targets form unit-peak bumps around label changes") {
  // One isolated change: exact Gaussian profile, peak exactly 1.
  std::vector<int> labels(21, 0);
  for (std::size_t i = 11; i < labels.size(); ++i) labels[i] = 1;  // change at gap 10
  double sigma = 2.0;
  std::vector<double> g = boundary_targets(labels, sigma);
  REQUIRE(g.size() == labels.size() - 1);
  CHECK(g[10] == 1.0);
  CHECK(g[11] == doctest::Approx(std::exp(-1.0 / (2.0 * sigma * sigma))).epsilon(1e-14));
  CHECK(g[9] == g[11]);
  CHECK(g[14] == doctest::Approx(std::exp(-16.0 / (2.0 * sigma * sigma))).epsilon(1e-14));
  CHECK(g[2] == doctest::Approx(std::exp(-8.0)).epsilon(1e-14));  // at the kernel radius
  CHECK(g[1] == 0.0);  // strictly outside the 4-sigma kernel radius

  // Two changes at least 8 sigma apart act independently.
  std::vector<int> two(40, 0);
  for (std::size_t i = 6; i < 26; ++i) two[i] = 1;
  for (std::size_t i = 26; i < two.size(); ++i) two[i] = 2;  // changes at gaps 5 and 25
  std::vector<double> g2 = boundary_targets(two, 2.0);
  CHECK(g2[5] == 1.0);
  CHECK(g2[25] == 1.0);
  CHECK(g2[15] == 0.0);
  CHECK(g2[6] == doctest::Approx(std::exp(-1.0 / 8.0)).epsilon(1e-14));

  // Full agreement with an independent reimplementation, including edge
  // reflection, for random sequences.
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t T = 2 + rng.uniform_int(30);
    std::vector<int> l = random_labels(T, 3, rng);
    double s = 0.5 + 2.0 * rng.uniform();
    std::vector<double> got = boundary_targets(l, s);
    std::vector<double> want = oracle_targets(l, s);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }

  // Reversal symmetry.
  std::vector<int> seq = {0, 0, 1, 1, 1, 2, 0, 0};
  std::vector<int> rev(seq.rbegin(), seq.rend());
  std::vector<double> fwd_t = boundary_targets(seq, 1.5);
  std::vector<double> rev_t = boundary_targets(rev, 1.5);
  for (std::size_t i = 0; i < fwd_t.size(); ++i)
    CHECK(fwd_t[i] == doctest::Approx(rev_t[rev_t.size() - 1 - i]).epsilon(1e-14));

  CHECK_THROWS_AS(boundary_targets({0}, 1.0), ValidationError);
  CHECK_THROWS_AS(boundary_targets({0, 1}, 0.0), ValidationError);
}

TEST_CASE("frame boundary is the max of adjacent gap targets") {
  std::vector<double> f = frame_boundary({0.2, 0.8, 0.1});
  REQUIRE(f.size() == 4);
  CHECK(f[0] == 0.2);
  CHECK(f[1] == 0.8);
  CHECK(f[2] == 0.8);
  CHECK(f[3] == 0.1);
  CHECK(frame_boundary({0.7}) == std::vector<double>{0.7, 0.7});
  CHECK_THROWS_AS(frame_boundary({}), ValidationError);
}

TEST_CASE("boundary term matches the brute-force oracle") {
  // Uniform rows over four classes: adjacent dot products are 1/4, so the
  // change indicator is 0.75 regardless of frame.
  Mat uni(2, 4, 0.25);
  CHECK(boundary_loss(Value::from_mat(uni), {1.0}).item() ==
        doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  CHECK(boundary_loss(Value::from_mat(uni), {0.0}).item() ==
        doctest::Approx(-std::log(0.25)).epsilon(1e-12));

  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t T = 2 + rng.uniform_int(8), C = 2 + rng.uniform_int(4);
    Mat p = random_probs(T, C, rng);
    std::vector<double> g(T - 1);
    for (auto& x : g) x = rng.uniform();
    double oracle = 0.0;
    for (std::size_t t = 0; t + 1 < T; ++t) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += p(t, c) * p(t + 1, c);
      double b = std::min(std::max(1.0 - dot, 1e-7), 1.0 - 1e-7);
      oracle -= g[t] * std::log(b) + (1.0 - g[t]) * std::log(1.0 - b);
    }
    oracle /= static_cast<double>(T - 1);
    CHECK(boundary_loss(Value::from_mat(p), g).item() == doctest::Approx(oracle).epsilon(1e-12));
  }

  // Identical adjacent one-hot rows would give b = 0; the clamp keeps the
  // log finite even with a target of 1.
  Mat hard(2, 2);
  hard(0, 0) = 1.0;
  hard(1, 0) = 1.0;
  CHECK(boundary_loss(Value::from_mat(hard), {1.0}).item() ==
        doctest::Approx(-std::log(1e-7)).epsilon(1e-9));

  CHECK_THROWS_AS(boundary_loss(Value::from_mat(uni), {0.5, 0.5}), ValidationError);  // arity
  CHECK_THROWS_AS(boundary_loss(Value::from_mat(uni), {1.5}), ValidationError);       // range
}

TEST_CASE("loss gradients are exact through a softmax head") {
  Rng rng(5);
  const std::size_t T = 5, C = 3;
  std::vector<int> labels = random_labels(T, static_cast<int>(C), rng);
  Mat y0 = one_hot(labels, static_cast<int>(C));
  std::vector<double> gaps = boundary_targets(labels, 1.0);
  PhaseTable table(static_cast<int>(C));
  std::vector<Formula> rules = {parse_formula("(!P1 W P2)", table), parse_formula("F P3", table)};

  for (int seed = 0; seed < 3; ++seed) {
    Rng r(100 + seed);
    std::vector<double> logits(T * C);
    for (auto& x : logits) x = 2.0 * r.uniform() - 1.0;
    auto head = [&](const Value& flat) { return softmax(reshape(flat, {T, C}), 1); };

    auto fn_ce = [&](const Value& flat) { return ce_loss(head(flat), y0); };
    auto fn_smo = [&](const Value& flat) { return smooth_loss(head(flat)); };
    auto fn_bd = [&](const Value& flat) { return boundary_loss(head(flat), gaps); };
    auto fn_total = [&](const Value& flat) {
      return total_loss(head(flat), y0, gaps, rules, LossWeights{}, 0.5).total;
    };
    CHECK(grad_check(fn_ce, logits, 1e-6) < 1e-6);
    CHECK(grad_check(fn_smo, logits, 1e-6) < 1e-6);
    CHECK(grad_check(fn_bd, logits, 1e-6) < 1e-6);
    CHECK(grad_check(fn_total, logits, 1e-6) < 1e-6);
  }
}

TEST_CASE("total loss combines weighted terms and skips disabled ones") {
  Rng rng(6);
  const std::size_t T = 6, C = 4;
  Mat p = random_probs(T, C, rng);
  std::vector<int> labels = random_labels(T, static_cast<int>(C), rng);
  Mat y0 = one_hot(labels, static_cast<int>(C));
  std::vector<double> gaps = boundary_targets(labels, 1.5);
  PhaseTable table(static_cast<int>(C));
  std::vector<Formula> rules = {parse_formula("F P1", table)};

  Value probs = Value::from_mat(p);
  LossWeights w;
  LossTerms t = total_loss(probs, y0, gaps, rules, w, 0.5);
  double expect = w.ce * t.ce.item() + w.smo * t.smo.item() + w.bd * t.bd.item() + w.pl * t.pl.item();
  CHECK(t.total.item() == doctest::Approx(expect).epsilon(1e-14));
  CHECK(t.ce.item() == ce_loss(probs, y0).item());
  CHECK(t.smo.item() == smooth_loss(probs).item());
  CHECK(t.bd.item() == boundary_loss(probs, gaps).item());
  CHECK(t.pl.item() == logic_loss(rules, probs, 0.5).item());

  // A zero weight disables its term entirely: the term is a constant zero
  // and contributes no gradient, and its inputs are never even validated.
  LossWeights off{0.0, 0.0, 0.0, 0.0};
  LossTerms none = total_loss(probs, y0, gaps, {}, off, 0.5);
  CHECK(none.total.item() == 0.0);
  CHECK_FALSE(none.total.requires_grad());
  CHECK(none.ce.item() == 0.0);
  CHECK(none.pl.item() == 0.0);

  // Disabling only the rule penalty allows an empty rule list.
  LossWeights no_pl;
  no_pl.pl = 0.0;
  CHECK_NOTHROW(total_loss(probs, y0, gaps, {}, no_pl, 0.5));
  // An enabled rule penalty with no rules is a contract violation.
  CHECK_THROWS_AS(total_loss(probs, y0, gaps, {}, w, 0.5), ValidationError);

  LossWeights negative;
  negative.ce = -0.1;
  CHECK_THROWS_AS(total_loss(probs, y0, gaps, rules, negative, 0.5), ValidationError);
}
