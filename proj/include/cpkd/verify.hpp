#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cpkd {

// Names accepted by gradcheck_component: ce, smooth, boundary, logic, total,
// denoiser.
const std::vector<std::string>& gradcheck_components();

// Builds one random instance of the named component (sized T <= 20, C <= 4),
// runs the finite-difference comparison against the analytic gradient, and
// returns the max relative error. Deterministic in `seed`.
double gradcheck_component(const std::string& component, std::uint64_t seed);

}  // namespace cpkd
