#include "cpkd/denoiser.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace cpkd {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

struct Seg {
  Shape shape;
  std::size_t offset{0};
  std::size_t len{0};
  std::size_t fan_in{0};  // 0 marks a bias (initialized to zero)
};

// Declaration order of every trainable tensor. Init, checkpointing, and the
// graph builders all walk this one table.
std::vector<Seg> segment_table(const DenoiserDims& d) {
  std::vector<Seg> segs;
  auto push = [&](Shape shape, std::size_t fan_in) {
    Seg s{std::move(shape), 0, 0, fan_in};
    s.len = shape_numel(s.shape);
    segs.push_back(std::move(s));
  };
  auto push_block = [&](std::size_t h, std::size_t k) {
    push({k, h, h}, k * h);  // gate filter (tanh path)
    push({h}, 0);
    push({k, h, h}, k * h);  // gate filter (sigmoid path)
    push({h}, 0);
    push({h, h}, h);  // 1x1 out projection
    push({h}, 0);
  };

  const std::size_t H = d.hidden, C = d.classes, K = d.kernel;
  push({d.feat_dim, H}, d.feat_dim);  // encoder input projection
  push({H}, 0);
  for (std::size_t l = 0; l < d.enc_layers; ++l) push_block(H, K);
  push({H, C}, H);  // auxiliary head
  push({C}, 0);

  push({C, H}, C);  // decoder label projection
  push({H}, 0);
  push({2 * H, H}, 2 * H);  // condition-merge projection
  push({H}, 0);
  for (std::size_t l = 0; l < d.dec_layers; ++l) push_block(H, K);
  push({H, C}, H);  // output head
  push({C}, 0);

  std::size_t off = 0;
  for (auto& s : segs) {
    s.offset = off;
    off += s.len;
  }
  return segs;
}

void check_dims(const DenoiserDims& d) {
  if (d.feat_dim < 1 || d.classes < 1 || d.enc_layers < 1 || d.dec_layers < 1 || d.hidden < 1 ||
      d.total_steps < 1)
    throw ValidationError("denoiser: all dimensions must be >= 1");
  if (d.kernel % 2 == 0 || d.kernel < 1) throw ValidationError("denoiser: kernel size must be odd");
}

Mat make_step_table(std::size_t total_steps, std::size_t hidden) {
  Mat tab(total_steps + 1, hidden);
  for (std::size_t t = 0; t <= total_steps; ++t)
    for (std::size_t i = 0; i < hidden; ++i) {
      double freq = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(hidden));
      double x = static_cast<double>(t) * freq;
      tab(t, i) = (i % 2 == 0) ? std::sin(x) : std::cos(x);
    }
  return tab;
}

// Sequential reader of carved parameter views.
struct SegCursor {
  const std::vector<Seg>& segs;
  const Value& flat;
  std::size_t next{0};

  Value take() {
    const Seg& s = segs[next++];
    return reshape(slice_rows(flat, s.offset, s.offset + s.len), s.shape);
  }
};

Value gated_block(SegCursor& cur, const Value& x, std::size_t dilation) {
  Value wf = cur.take(), bf = cur.take();
  Value wg = cur.take(), bg = cur.take();
  Value wo = cur.take(), bo = cur.take();
  Value h = mul(tanh_v(add(conv1d(x, wf, dilation), bf)), sigmoid(add(conv1d(x, wg, dilation), bg)));
  return add(x, add(matmul(h, wo), bo));
}

void check_finite_mat(const std::vector<double>& v, const char* who) {
  if (!all_finite(v)) throw ValidationError(std::string(who) + ": non-finite input");
}

}  // namespace

std::size_t param_count(const DenoiserDims& dims) {
  check_dims(dims);
  std::size_t n = 0;
  for (const auto& s : segment_table(dims)) n += s.len;
  return n;
}

DenoiserParams init_params(const DenoiserDims& dims, std::uint64_t seed) {
  check_dims(dims);
  auto segs = segment_table(dims);
  std::size_t n = 0;
  for (const auto& s : segs) n += s.len;

  DenoiserParams p;
  p.dims = dims;
  p.flat.assign(n, 0.0);
  Rng rng(seed);
  for (const auto& s : segs) {
    if (s.fan_in == 0) continue;  // bias stays zero
    double a = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
    for (std::size_t i = 0; i < s.len; ++i) p.flat[s.offset + i] = (2.0 * rng.uniform() - 1.0) * a;
  }
  p.step_table = make_step_table(dims.total_steps, dims.hidden);
  return p;
}

EncodeResult encode_graph(const DenoiserDims& dims, const Value& flat, const Value& features) {
  check_dims(dims);
  if (features.shape().size() != 2 || features.shape()[1] != dims.feat_dim)
    throw ValidationError("encode: features must be T x " + std::to_string(dims.feat_dim) + ", got " +
                          shape_str(features.shape()));
  check_finite_mat(features.data(), "encode");
  if (flat.numel() != param_count(dims))
    throw ValidationError("encode: parameter vector has " + std::to_string(flat.numel()) + " entries, dims need " +
                          std::to_string(param_count(dims)));

  auto segs = segment_table(dims);
  SegCursor cur{segs, flat, 0};
  // take() advances the cursor, so every pair is bound to named locals to
  // pin the consumption order (function-argument order is unspecified).
  Value w_in = cur.take(), b_in = cur.take();
  Value x = tanh_v(add(matmul(features, w_in), b_in));
  for (std::size_t l = 0; l < dims.enc_layers; ++l) x = gated_block(cur, x, std::size_t{1} << l);
  Value w_aux = cur.take(), b_aux = cur.take();
  Value aux = softmax(add(matmul(x, w_aux), b_aux), 1);
  return {x, aux};
}

Value decode_graph(const DenoiserDims& dims, const Value& flat, const Mat& step_table, const Value& y_scaled,
                   int step, const Value& cond_masked) {
  check_dims(dims);
  const std::size_t H = dims.hidden;
  if (y_scaled.shape().size() != 2 || y_scaled.shape()[1] != dims.classes)
    throw ValidationError("decode: labels must be T x " + std::to_string(dims.classes) + ", got " +
                          shape_str(y_scaled.shape()));
  if (cond_masked.shape().size() != 2 || cond_masked.shape()[1] != H ||
      cond_masked.shape()[0] != y_scaled.shape()[0])
    throw ValidationError("decode: condition must be T x " + std::to_string(H) + " matching the label rows, got " +
                          shape_str(cond_masked.shape()));
  if (step < 1 || step > static_cast<int>(dims.total_steps))
    throw ValidationError("decode: step " + std::to_string(step) + " outside [1," +
                          std::to_string(dims.total_steps) + "]");
  if (step_table.rows != dims.total_steps + 1 || step_table.cols != H)
    throw ValidationError("decode: step table has wrong shape");
  check_finite_mat(y_scaled.data(), "decode");
  check_finite_mat(cond_masked.data(), "decode");
  if (flat.numel() != param_count(dims))
    throw ValidationError("decode: parameter vector has " + std::to_string(flat.numel()) + " entries, dims need " +
                          std::to_string(param_count(dims)));

  auto segs = segment_table(dims);
  SegCursor cur{segs, flat, 0};
  cur.next = 2 + dims.enc_layers * 6 + 2;  // skip encoder segments

  // Named locals pin the segment consumption order (see encode_graph).
  Value w_y = cur.take(), b_y = cur.take();
  Value py = add(matmul(y_scaled, w_y), b_y);
  std::vector<Value> parts{py, cond_masked};
  Value w_m = cur.take(), b_m = cur.take();
  Value z = add(matmul(concat(parts, 1), w_m), b_m);

  std::vector<double> emb(H);
  for (std::size_t i = 0; i < H; ++i) emb[i] = step_table.v[static_cast<std::size_t>(step) * H + i];
  Value x = tanh_v(add(z, Value::constant(std::move(emb), {H})));
  for (std::size_t l = 0; l < dims.dec_layers; ++l) x = gated_block(cur, x, std::size_t{1} << l);
  Value w_out = cur.take(), b_out = cur.take();
  return softmax(add(matmul(x, w_out), b_out), 1);
}

EncodeOut encode(const DenoiserParams& params, const Mat& features) {
  Value flat = Value::constant(params.flat, {params.flat.size()});
  EncodeResult r = encode_graph(params.dims, flat, Value::from_mat(features));
  return {r.cond.to_mat(), r.aux_probs.to_mat()};
}

Mat decode(const DenoiserParams& params, const Mat& y_scaled, int step, const Mat& cond_masked) {
  Value flat = Value::constant(params.flat, {params.flat.size()});
  Value out = decode_graph(params.dims, flat, params.step_table, Value::from_mat(y_scaled), step,
                           Value::from_mat(cond_masked));
  return out.to_mat();
}

namespace {

constexpr char kMagic[8] = {'C', 'P', 'K', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u64(std::ofstream& out, std::uint64_t x) {
  out.write(reinterpret_cast<const char*>(&x), sizeof(x));
}

std::uint64_t read_u64(std::ifstream& in) {
  std::uint64_t x = 0;
  in.read(reinterpret_cast<char*>(&x), sizeof(x));
  return x;
}

}  // namespace

void save_checkpoint(const DenoiserParams& params, const std::string& path) {
  if (params.flat.size() != param_count(params.dims))
    throw ValidationError("save_checkpoint: parameter vector does not match dims");
  if (!all_finite(params.flat)) throw ValidationError("save_checkpoint: non-finite parameters");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
  const DenoiserDims& d = params.dims;
  for (std::uint64_t x : {d.feat_dim, d.classes, d.enc_layers, d.dec_layers, d.hidden, d.total_steps, d.kernel,
                          params.flat.size()})
    write_u64(out, x);
  out.write(reinterpret_cast<const char*>(params.flat.data()),
            static_cast<std::streamsize>(params.flat.size() * sizeof(double)));
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

DenoiserParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  log_file_read(path);
  char magic[8];
  in.read(magic, sizeof(magic));
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("not a checkpoint file: " + path);
  if (version != kVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);

  DenoiserDims d;
  d.feat_dim = read_u64(in);
  d.classes = read_u64(in);
  d.enc_layers = read_u64(in);
  d.dec_layers = read_u64(in);
  d.hidden = read_u64(in);
  d.total_steps = read_u64(in);
  d.kernel = read_u64(in);
  std::uint64_t count = read_u64(in);
  if (!in) throw IoError("truncated checkpoint header: " + path);
  try {
    check_dims(d);
  } catch (const ValidationError& e) {
    throw IoError("checkpoint holds invalid dims (" + std::string(e.what()) + "): " + path);
  }
  if (count != param_count(d))
    throw IoError("checkpoint parameter count " + std::to_string(count) + " does not match dims: " + path);

  DenoiserParams p;
  p.dims = d;
  p.flat.assign(count, 0.0);
  in.read(reinterpret_cast<char*>(p.flat.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in || in.gcount() != static_cast<std::streamsize>(count * sizeof(double)))
    throw IoError("truncated checkpoint payload: " + path);
  if (in.peek() != std::ifstream::traits_type::eof())
    throw IoError("trailing bytes after checkpoint payload: " + path);
  if (!all_finite(p.flat)) throw IoError("checkpoint holds non-finite parameters: " + path);
  p.step_table = make_step_table(d.total_steps, d.hidden);
  return p;
}

}  // namespace cpkd
