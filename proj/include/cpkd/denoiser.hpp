#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cpkd/common.hpp"
#include "cpkd/rng.hpp"
#include "cpkd/tensor.hpp"

namespace cpkd {

// Step-aware conditional denoising network over frame sequences.
//
// Encoder: per-frame tanh input projection, then `enc_layers` gated dilated
// temporal-conv blocks (kernel 3, dilation 2^l, residual); the top block's
// activation is the conditioning stream, and an auxiliary linear head emits
// per-frame class probabilities.
//
// Decoder: linear projection of the scaled noisy labels, concatenated with
// the (masked) conditioning stream, projected back to `hidden` channels,
// plus a sinusoidal step embedding broadcast over frames, tanh, then
// `dec_layers` gated blocks and a softmax output head.
struct DenoiserDims {
  std::size_t feat_dim{8};
  std::size_t classes{8};
  std::size_t enc_layers{6};
  std::size_t dec_layers{4};
  std::size_t hidden{32};
  std::size_t total_steps{1000};  // sizes the step-embedding table (rows 0..S)
  std::size_t kernel{3};
};

struct DenoiserParams {
  DenoiserDims dims;
  std::vector<double> flat;  // all trainable tensors, declaration order
  Mat step_table;            // (S+1) x hidden, sinusoidal, not trained
};

// Closed-form size of `flat` for the given dims.
std::size_t param_count(const DenoiserDims& dims);

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn in declaration order,
// biases zero; deterministic in `seed`.
DenoiserParams init_params(const DenoiserDims& dims, std::uint64_t seed);

// --- graph builders (training path; `flat` may be a variable) -------------

struct EncodeResult {
  Value cond;       // T x hidden
  Value aux_probs;  // T x classes, rows sum to 1
};

EncodeResult encode_graph(const DenoiserDims& dims, const Value& flat, const Value& features);

// y_scaled: T x classes in [-1, 1] space; step must satisfy 1 <= step <= S.
Value decode_graph(const DenoiserDims& dims, const Value& flat, const Mat& step_table, const Value& y_scaled,
                   int step, const Value& cond_masked);

// --- data-level wrappers (inference path; no gradients) -------------------

struct EncodeOut {
  Mat cond;
  Mat aux_probs;
};

EncodeOut encode(const DenoiserParams& params, const Mat& features);
Mat decode(const DenoiserParams& params, const Mat& y_scaled, int step, const Mat& cond_masked);

// --- checkpoints -----------------------------------------------------------
// Binary format: magic "CPKDCKPT", u32 version, dims header, then the flat
// parameter array as 64-bit little-endian doubles in declaration order.

void save_checkpoint(const DenoiserParams& params, const std::string& path);
DenoiserParams load_checkpoint(const std::string& path);

}  // namespace cpkd
