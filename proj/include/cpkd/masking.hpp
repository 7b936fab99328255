#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cpkd/common.hpp"
#include "cpkd/rng.hpp"

namespace cpkd {

enum class MaskKind : std::uint8_t { None_, Global, Transition, Relation };

const char* mask_kind_name(MaskKind k);
MaskKind mask_kind_from_char(char c);  // N/G/T/R

// Frame-gating mask for the conditioning stream: bit i scales every feature
// of frame i (1 keeps the frame, 0 hides it).
struct Mask {
  std::vector<std::uint8_t> bits;
  MaskKind kind{MaskKind::None_};
};

Mask mask_none(std::size_t frames);
Mask mask_global(std::size_t frames);

// Hides frames whose smoothed per-frame boundary indicator is >= 0.5, i.e.
// keeps only frames far from a label change. Values outside [0,1] raise.
Mask mask_transition(const std::vector<double>& frame_boundary);

// Hides every frame labeled `chosen_class`.
Mask mask_relation(const std::vector<int>& labels, int classes, int chosen_class);

// Draws one of the four kinds uniformly; a Relation draw picks its class
// uniformly from the classes present in `labels`. Draw order is fixed
// (kind first, then class) so traces are reproducible.
Mask sample_mask(const std::vector<int>& labels, int classes, const std::vector<double>& frame_boundary,
                 Rng& rng);

// Same, restricted to an allowed subset of kinds (used by training configs).
Mask sample_mask(const std::vector<int>& labels, int classes, const std::vector<double>& frame_boundary,
                 Rng& rng, std::span<const MaskKind> allowed);

// Elementwise frame gating of a [T, D] matrix.
Mat apply_mask(const Mat& features, const Mask& mask);

}  // namespace cpkd
