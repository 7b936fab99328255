#include "cpkd/masking.hpp"

#include <algorithm>

namespace cpkd {

const char* mask_kind_name(MaskKind k) {
  switch (k) {
    case MaskKind::None_: return "none";
    case MaskKind::Global: return "global";
    case MaskKind::Transition: return "transition";
    case MaskKind::Relation: return "relation";
  }
  return "?";
}

MaskKind mask_kind_from_char(char c) {
  switch (c) {
    case 'N': return MaskKind::None_;
    case 'G': return MaskKind::Global;
    case 'T': return MaskKind::Transition;
    case 'R': return MaskKind::Relation;
  }
  throw ValidationError(std::string("mask kind '") + c + "' unknown (expected one of N,G,T,R)");
}

Mask mask_none(std::size_t frames) {
  if (frames == 0) throw ValidationError("mask_none: empty sequence");
  return {std::vector<std::uint8_t>(frames, 1), MaskKind::None_};
}

Mask mask_global(std::size_t frames) {
  if (frames == 0) throw ValidationError("mask_global: empty sequence");
  return {std::vector<std::uint8_t>(frames, 0), MaskKind::Global};
}

Mask mask_transition(const std::vector<double>& frame_boundary) {
  if (frame_boundary.empty()) throw ValidationError("mask_transition: empty boundary vector");
  Mask m;
  m.kind = MaskKind::Transition;
  m.bits.resize(frame_boundary.size());
  for (std::size_t i = 0; i < frame_boundary.size(); ++i) {
    double b = frame_boundary[i];
    if (!(b >= 0.0 && b <= 1.0))
      throw ValidationError("mask_transition: boundary value " + std::to_string(b) + " at frame " +
                            std::to_string(i) + " outside [0,1]");
    m.bits[i] = b < 0.5 ? 1 : 0;
  }
  return m;
}

Mask mask_relation(const std::vector<int>& labels, int classes, int chosen_class) {
  if (labels.empty()) throw ValidationError("mask_relation: empty sequence");
  if (chosen_class < 0 || chosen_class >= classes)
    throw ValidationError("mask_relation: class " + std::to_string(chosen_class) + " outside [0," +
                          std::to_string(classes - 1) + "]");
  Mask m;
  m.kind = MaskKind::Relation;
  m.bits.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes)
      throw ValidationError("mask_relation: label " + std::to_string(labels[i]) + " at frame " +
                            std::to_string(i) + " outside [0," + std::to_string(classes - 1) + "]");
    m.bits[i] = labels[i] == chosen_class ? 0 : 1;
  }
  return m;
}

Mask sample_mask(const std::vector<int>& labels, int classes, const std::vector<double>& frame_boundary,
                 Rng& rng) {
  static const MaskKind all[4] = {MaskKind::None_, MaskKind::Global, MaskKind::Transition, MaskKind::Relation};
  return sample_mask(labels, classes, frame_boundary, rng, std::span<const MaskKind>(all, 4));
}

Mask sample_mask(const std::vector<int>& labels, int classes, const std::vector<double>& frame_boundary,
                 Rng& rng, std::span<const MaskKind> allowed) {
  if (allowed.empty()) throw ValidationError("sample_mask: no mask kinds enabled");
  if (labels.size() != frame_boundary.size())
    throw ValidationError("sample_mask: labels and frame_boundary lengths disagree");
  MaskKind kind = allowed[rng.uniform_int(allowed.size())];
  switch (kind) {
    case MaskKind::None_: return mask_none(labels.size());
    case MaskKind::Global: return mask_global(labels.size());
    case MaskKind::Transition: return mask_transition(frame_boundary);
    case MaskKind::Relation: {
      std::vector<int> present;
      for (int l : labels)
        if (std::find(present.begin(), present.end(), l) == present.end()) present.push_back(l);
      std::sort(present.begin(), present.end());
      int chosen = present[rng.uniform_int(present.size())];
      return mask_relation(labels, classes, chosen);
    }
  }
  throw ValidationError("sample_mask: unreachable kind");
}

Mat apply_mask(const Mat& features, const Mask& mask) {
  if (features.rows != mask.bits.size())
    throw ValidationError("apply_mask: mask length " + std::to_string(mask.bits.size()) +
                          " does not match frame count " + std::to_string(features.rows));
  Mat out = features;
  for (std::size_t i = 0; i < out.rows; ++i)
    if (!mask.bits[i])
      for (std::size_t j = 0; j < out.cols; ++j) out(i, j) = 0.0;
  return out;
}

}  // namespace cpkd
