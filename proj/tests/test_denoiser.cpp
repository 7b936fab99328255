// Tests for the conditional denoising network: parameter layout, encoder
// and decoder shapes and invariants, step awareness, temporal locality,
// finite-difference gradients, and checkpoint serialization.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "cpkd/denoiser.hpp"
#include "cpkd/rng.hpp"
#include "cpkd/schedule.hpp"
#include "doctest.h"

using namespace cpkd;

namespace {

DenoiserDims tiny_dims() {
  DenoiserDims d;
  d.feat_dim = 4;
  d.classes = 3;
  d.enc_layers = 2;
  d.dec_layers = 1;
  d.hidden = 6;
  d.total_steps = 10;
  d.kernel = 3;
  return d;
}

Mat random_mat(std::size_t r, std::size_t c, Rng& rng) {
  Mat m(r, c);
  for (auto& v : m.v) v = rng.gaussian();
  return m;
}

// Closed-form parameter count computed independently of the implementation:
// encoder in-projection, gated blocks (filter + gate convs with biases plus
// a 1x1 out-projection), auxiliary head, decoder label projection, merge
// projection, decoder blocks, and the output head.
std::size_t oracle_count(const DenoiserDims& d) {
  std::size_t block = d.kernel * d.hidden * d.hidden + d.hidden   // filter conv + bias
                    + d.kernel * d.hidden * d.hidden + d.hidden   // gate conv + bias
                    + d.hidden * d.hidden + d.hidden;             // out projection + bias
  std::size_t n = 0;
  n += d.feat_dim * d.hidden + d.hidden;      // encoder input projection
  n += d.enc_layers * block;                  // encoder blocks
  n += d.hidden * d.classes + d.classes;      // auxiliary head
  n += d.classes * d.hidden + d.hidden;       // decoder label projection
  n += 2 * d.hidden * d.hidden + d.hidden;    // merge of label stream and conditioning
  n += d.dec_layers * block;                  // decoder blocks
  n += d.hidden * d.classes + d.classes;      // output head
  return n;
}

}  // namespace

TEST_CASE("parameter count matches the closed form") {
  CHECK(param_count(tiny_dims()) == oracle_count(tiny_dims()));
  DenoiserDims defaults;
  CHECK(param_count(defaults) == oracle_count(defaults));
  DenoiserParams p = init_params(tiny_dims(), 7);
  CHECK(p.flat.size() == param_count(tiny_dims()));
  CHECK(p.step_table.rows == tiny_dims().total_steps + 1);
  CHECK(p.step_table.cols == tiny_dims().hidden);
}

TEST_CASE("initialization is deterministic in the seed, biases start at zero") {
  DenoiserParams a = init_params(tiny_dims(), 42);
  DenoiserParams b = init_params(tiny_dims(), 42);
  DenoiserParams c = init_params(tiny_dims(), 43);
  CHECK(a.flat == b.flat);
  CHECK(a.flat != c.flat);
  CHECK(all_finite(a.flat));
  // The encoder input projection is feat_dim x hidden weights followed by a
  // zero bias row.
  const DenoiserDims d = tiny_dims();
  for (std::size_t i = 0; i < d.hidden; ++i) CHECK(a.flat[d.feat_dim * d.hidden + i] == 0.0);
  // Weight magnitudes respect the 1/sqrt(fan_in) bound of the first tensor.
  double bound = 1.0 / std::sqrt(static_cast<double>(d.feat_dim));
  for (std::size_t i = 0; i < d.feat_dim * d.hidden; ++i) {
    CHECK(a.flat[i] <= bound);
    CHECK(a.flat[i] >= -bound);
  }
}

TEST_CASE("encoder emits conditioning and normalized auxiliary rows") {
  DenoiserDims d = tiny_dims();
  DenoiserParams p = init_params(d, 1);
  Rng rng(2);
  const std::size_t T = 9;
  Mat feats = random_mat(T, d.feat_dim, rng);
  EncodeOut out = encode(p, feats);
  REQUIRE(out.cond.rows == T);
  REQUIRE(out.cond.cols == d.hidden);
  REQUIRE(out.aux_probs.rows == T);
  REQUIRE(out.aux_probs.cols == d.classes);
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < d.classes; ++c) {
      s += out.aux_probs(t, c);
      CHECK(out.aux_probs(t, c) > 0.0);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(all_finite(out.cond.v));

  Mat wrong = random_mat(T, d.feat_dim + 1, rng);
  CHECK_THROWS_AS(encode(p, wrong), ValidationError);
}

TEST_CASE("decoder emits normalized rows and is step-aware") {
  DenoiserDims d = tiny_dims();
  DenoiserParams p = init_params(d, 3);
  Rng rng(4);
  const std::size_t T = 7;
  Mat feats = random_mat(T, d.feat_dim, rng);
  Mat cond = encode(p, feats).cond;
  Mat y = random_mat(T, d.classes, rng);

  Mat probs1 = decode(p, y, 1, cond);
  REQUIRE(probs1.rows == T);
  REQUIRE(probs1.cols == d.classes);
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < d.classes; ++c) s += probs1(t, c);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }

  // The sinusoidal step row changes the output between step 1 and step S.
  Mat probsS = decode(p, y, static_cast<int>(d.total_steps), cond);
  double diff = 0.0;
  for (std::size_t i = 0; i < probs1.v.size(); ++i) diff = std::max(diff, std::abs(probs1.v[i] - probsS.v[i]));
  CHECK(diff > 1e-6);

  // Deterministic: same inputs give bitwise-equal outputs.
  Mat again = decode(p, y, 1, cond);
  CHECK(again.v == probs1.v);

  // An all-zero conditioning stream (fully hidden sequence) is legal input.
  Mat zero_cond(T, d.hidden, 0.0);
  Mat blind = decode(p, y, 5, zero_cond);
  CHECK(all_finite(blind.v));

  CHECK_THROWS_AS(decode(p, y, 0, cond), ValidationError);
  CHECK_THROWS_AS(decode(p, y, static_cast<int>(d.total_steps) + 1, cond), ValidationError);
  Mat bad_cond(T, d.hidden + 1, 0.0);
  CHECK_THROWS_AS(decode(p, y, 1, bad_cond), ValidationError);
  Mat bad_y(T, d.classes + 1, 0.0);
  CHECK_THROWS_AS(decode(p, bad_y, 1, cond), ValidationError);
}

TEST_CASE("one encoder block sees exactly its dilation-1 neighborhood") {
  DenoiserDims d = tiny_dims();
  d.enc_layers = 1;  // single block, kernel 3, dilation 1 -> radius 1
  DenoiserParams p = init_params(d, 5);
  Rng rng(6);
  const std::size_t T = 11;
  Mat a = random_mat(T, d.feat_dim, rng);
  Mat b = a;
  const std::size_t j = 5;
  for (std::size_t c = 0; c < d.feat_dim; ++c) b(j, c) += 1.0;

  EncodeOut ea = encode(p, a);
  EncodeOut eb = encode(p, b);
  for (std::size_t t = 0; t < T; ++t) {
    double delta = 0.0;
    for (std::size_t c = 0; c < d.hidden; ++c) delta += std::abs(ea.cond(t, c) - eb.cond(t, c));
    CAPTURE(t);
    if (t + 1 < j || t > j + 1)
      CHECK(delta == 0.0);  // outside the receptive field: bitwise untouched
    else
      CHECK(delta > 0.0);
  }
}

TEST_CASE("stacked dilations widen the receptive field exponentially") {
  DenoiserDims d = tiny_dims();
  d.enc_layers = 3;  // dilations 1, 2, 4 -> radius 7
  DenoiserParams p = init_params(d, 8);
  Rng rng(9);
  const std::size_t T = 21;
  Mat a = random_mat(T, d.feat_dim, rng);
  Mat b = a;
  const std::size_t j = 10;
  for (std::size_t c = 0; c < d.feat_dim; ++c) b(j, c) += 1.0;
  EncodeOut ea = encode(p, a);
  EncodeOut eb = encode(p, b);
  for (std::size_t t = 0; t < T; ++t) {
    double delta = 0.0;
    for (std::size_t c = 0; c < d.hidden; ++c) delta += std::abs(ea.cond(t, c) - eb.cond(t, c));
    if (t + 7 < j || t > j + 7)
      CHECK(delta == 0.0);
    else if (t == j)
      CHECK(delta > 0.0);
  }
}

TEST_CASE("network gradients match finite differences") {
  DenoiserDims d;
  d.feat_dim = 3;
  d.classes = 3;
  d.enc_layers = 1;
  d.dec_layers = 1;
  d.hidden = 4;
  d.total_steps = 8;
  d.kernel = 3;
  DenoiserParams p = init_params(d, 11);
  Rng rng(12);
  const std::size_t T = 5;
  Mat feats = random_mat(T, d.feat_dim, rng);
  Mat y = random_mat(T, d.classes, rng);
  // Random linear readouts: summing softmax rows directly would be constant.
  Mat w_dec = random_mat(T, d.classes, rng);
  Mat w_aux = random_mat(T, d.classes, rng);
  Mat w_cond = random_mat(T, d.hidden, rng);

  auto fn = [&](const Value& flat) {
    EncodeResult enc = encode_graph(d, flat, Value::from_mat(feats));
    Value probs = decode_graph(d, flat, p.step_table, Value::from_mat(y), 3, enc.cond);
    Value readout = add(sum_all(mul(probs, Value::from_mat(w_dec))),
                        add(sum_all(mul(enc.aux_probs, Value::from_mat(w_aux))),
                            sum_all(mul(enc.cond, Value::from_mat(w_cond)))));
    return readout;
  };
  CHECK(grad_check(fn, p.flat, 1e-5) < 1e-5);

  // Gradients also flow through the features (the conditioning path).
  auto fn_feats = [&](const Value& flat_feats) {
    Value f = reshape(flat_feats, {T, d.feat_dim});
    EncodeResult enc = encode_graph(d, Value::constant(p.flat, {p.flat.size()}), f);
    Value probs = decode_graph(d, Value::constant(p.flat, {p.flat.size()}), p.step_table,
                               Value::from_mat(y), 5, enc.cond);
    return sum_all(mul(probs, Value::from_mat(w_dec)));
  };
  CHECK(grad_check(fn_feats, feats.v, 1e-5) < 1e-5);
}

TEST_CASE("checkpoints round-trip bitwise") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "cpkd_test_ckpt";
  fs::create_directories(dir);
  fs::path path = dir / "model.ckpt";

  DenoiserParams p = init_params(tiny_dims(), 21);
  save_checkpoint(p, path.string());
  DenoiserParams q = load_checkpoint(path.string());
  CHECK(q.flat == p.flat);
  CHECK(q.dims.feat_dim == p.dims.feat_dim);
  CHECK(q.dims.classes == p.dims.classes);
  CHECK(q.dims.enc_layers == p.dims.enc_layers);
  CHECK(q.dims.dec_layers == p.dims.dec_layers);
  CHECK(q.dims.hidden == p.dims.hidden);
  CHECK(q.dims.total_steps == p.dims.total_steps);
  CHECK(q.dims.kernel == p.dims.kernel);
  CHECK(q.step_table.v == p.step_table.v);

  // Saving the loaded copy reproduces the file byte for byte.
  fs::path path2 = dir / "model2.ckpt";
  save_checkpoint(q, path2.string());
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(s1.substr(0, 8) == "CPKDCKPT");

  // Corruption is rejected: bad magic, truncation, missing file.
  fs::path badmagic = dir / "badmagic.ckpt";
  {
    std::string bytes = s1;
    bytes[0] = 'X';
    std::ofstream out(badmagic, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_checkpoint(badmagic.string()), IoError);

  fs::path trunc = dir / "trunc.ckpt";
  {
    std::ofstream out(trunc, std::ios::binary);
    out.write(s1.data(), static_cast<std::streamsize>(s1.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(trunc.string()), IoError);

  fs::path trailing = dir / "trailing.ckpt";
  {
    std::string bytes = s1 + "extra";
    std::ofstream out(trailing, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_checkpoint(trailing.string()), IoError);

  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), IoError);
  fs::remove_all(dir);
}
