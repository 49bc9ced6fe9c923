#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace qsynth {

// One q-space sample: unit gradient direction plus diffusion weighting.
// Convention: b == 0 stores g = (0,0,0), which makes the b0 branch of the
// reconstruction target rule detectable from the coordinate alone.
struct QSpacePoint {
  std::array<double, 3> g{0.0, 0.0, 0.0};
  double b = 0.0;       // s/mm^2
  double b_norm = 0.0;  // b scaled by the scheme maximum, in [0, 1]
};

struct SamplingScheme {
  std::vector<QSpacePoint> points;
  double b_max = 0.0;

  std::size_t size() const { return points.size(); }
  bool has_b0() const;
  // Indices of all points whose b matches `b` within a relative tolerance.
  std::vector<std::size_t> shell_indices(double b, double rel_tol = 1e-6) const;
};

// Physics convention: theta is the polar angle from +z, phi the azimuth.
// theta in [0, pi], phi in [0, 2*pi).
std::array<double, 3> sphere_to_cart(double theta, double phi);

// Deterministic, approximately uniform directions on the unit sphere
// (golden-angle lattice).
std::vector<std::array<double, 3>> fibonacci_directions(int n);

// Renormalizes directions of b>0 entries to unit length, zeroes b=0
// directions, and populates b_norm = b / max(b). Input order is preserved.
SamplingScheme normalize_scheme(
    const std::vector<std::pair<std::array<double, 3>, double>>& raw);

// One scheme point per b=0 shell, `dirs_per_shell` golden-angle directions
// per nonzero shell, shells laid out in the order given.
SamplingScheme make_shell_scheme(const std::vector<double>& shells, int dirs_per_shell);

// FSL gradient tables. bvals: one whitespace-separated line of N values.
// bvecs: three lines (x, y, z rows); column i pairs with bvals entry i.
SamplingScheme load_fsl_tables(const std::string& bvals_text, const std::string& bvecs_text);
std::pair<std::string, std::string> save_fsl_tables(const SamplingScheme& scheme);

}  // namespace qsynth
