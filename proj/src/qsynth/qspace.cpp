#include "qsynth/qspace.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "qsynth/errors.hpp"

namespace qsynth {

namespace {

constexpr double kPi = 3.14159265358979323846;

double norm3(const std::array<double, 3>& v) {
  return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

std::vector<std::string> nonempty_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur)) {
    bool blank = true;
    for (char c : cur)
      if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
    if (!blank) lines.push_back(cur);
  }
  return lines;
}

std::vector<double> parse_reals(const std::string& line) {
  std::vector<double> vals;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) {
    char* end = nullptr;
    double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0')
      throw format_error("non-numeric token '" + tok + "' in gradient table");
    vals.push_back(v);
  }
  return vals;
}

std::string format_real_line(const std::vector<double>& vals) {
  std::string out;
  char buf[40];
  for (std::size_t i = 0; i < vals.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g", vals[i]);
    if (i) out += ' ';
    out += buf;
  }
  out += '\n';
  return out;
}

}  // namespace

bool SamplingScheme::has_b0() const {
  for (const auto& p : points)
    if (p.b == 0.0) return true;
  return false;
}

std::vector<std::size_t> SamplingScheme::shell_indices(double b, double rel_tol) const {
  std::vector<std::size_t> idx;
  const double tol = rel_tol * std::max(1.0, std::abs(b));
  for (std::size_t i = 0; i < points.size(); ++i)
    if (std::abs(points[i].b - b) <= tol) idx.push_back(i);
  return idx;
}

std::array<double, 3> sphere_to_cart(double theta, double phi) {
  if (!(theta >= 0.0 && theta <= kPi))
    throw validation_error("sphere_to_cart: theta must lie in [0, pi]");
  if (!(phi >= 0.0 && phi < 2.0 * kPi))
    throw validation_error("sphere_to_cart: phi must lie in [0, 2*pi)");
  const double st = std::sin(theta);
  return {st * std::cos(phi), st * std::sin(phi), std::cos(theta)};
}

std::vector<std::array<double, 3>> fibonacci_directions(int n) {
  if (n < 1) throw validation_error("fibonacci_directions: n must be >= 1");
  const double golden_angle = kPi * (3.0 - std::sqrt(5.0));
  std::vector<std::array<double, 3>> dirs;
  dirs.resize(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden_angle * i;
    std::array<double, 3> v{r * std::cos(phi), r * std::sin(phi), z};
    const double nv = norm3(v);
    for (double& c : v) c /= nv;
    dirs[std::size_t(i)] = v;
  }
  return dirs;
}

SamplingScheme normalize_scheme(
    const std::vector<std::pair<std::array<double, 3>, double>>& raw) {
  if (raw.empty()) throw validation_error("normalize_scheme: empty scheme");
  double b_max = 0.0;
  for (const auto& [g, b] : raw) {
    (void)g;
    if (b < 0.0) throw validation_error("normalize_scheme: negative b-value");
    b_max = std::max(b_max, b);
  }
  if (b_max <= 0.0)
    throw validation_error("normalize_scheme: at least one b-value must be positive");

  SamplingScheme scheme;
  scheme.b_max = b_max;
  scheme.points.reserve(raw.size());
  for (const auto& [g, b] : raw) {
    QSpacePoint p;
    p.b = b;
    p.b_norm = b / b_max;
    if (b > 0.0) {
      const double n = norm3(g);
      if (n <= 1e-12)
        throw validation_error("normalize_scheme: zero-length direction with b > 0");
      p.g = {g[0] / n, g[1] / n, g[2] / n};
    } else {
      p.g = {0.0, 0.0, 0.0};
    }
    scheme.points.push_back(p);
  }
  return scheme;
}

SamplingScheme make_shell_scheme(const std::vector<double>& shells, int dirs_per_shell) {
  if (shells.empty()) throw validation_error("make_shell_scheme: no shells given");
  if (dirs_per_shell < 1)
    throw validation_error("make_shell_scheme: dirs_per_shell must be >= 1");
  std::vector<std::pair<std::array<double, 3>, double>> raw;
  bool b0_done = false;
  for (double b : shells) {
    if (b < 0.0) throw validation_error("make_shell_scheme: negative shell b-value");
    if (b == 0.0) {
      if (!b0_done) raw.push_back({{0.0, 0.0, 0.0}, 0.0});
      b0_done = true;
      continue;
    }
    for (const auto& g : fibonacci_directions(dirs_per_shell)) raw.push_back({g, b});
  }
  return normalize_scheme(raw);
}

SamplingScheme load_fsl_tables(const std::string& bvals_text, const std::string& bvecs_text) {
  const auto blines = nonempty_lines(bvals_text);
  if (blines.size() != 1)
    throw format_error("bvals must contain exactly one non-empty line, got " +
                       std::to_string(blines.size()));
  const auto vlines = nonempty_lines(bvecs_text);
  if (vlines.size() != 3)
    throw format_error("bvecs must contain exactly three non-empty lines, got " +
                       std::to_string(vlines.size()));

  const auto bvals = parse_reals(blines[0]);
  std::array<std::vector<double>, 3> rows;
  for (int r = 0; r < 3; ++r) {
    rows[std::size_t(r)] = parse_reals(vlines[std::size_t(r)]);
    if (rows[std::size_t(r)].size() != bvals.size())
      throw format_error("bvecs row " + std::to_string(r) + " has " +
                         std::to_string(rows[std::size_t(r)].size()) +
                         " entries, bvals has " + std::to_string(bvals.size()));
  }

  std::vector<std::pair<std::array<double, 3>, double>> raw;
  raw.reserve(bvals.size());
  for (std::size_t i = 0; i < bvals.size(); ++i)
    raw.push_back({{rows[0][i], rows[1][i], rows[2][i]}, bvals[i]});
  return normalize_scheme(raw);
}

std::pair<std::string, std::string> save_fsl_tables(const SamplingScheme& scheme) {
  std::vector<double> bvals;
  std::array<std::vector<double>, 3> rows;
  for (const auto& p : scheme.points) {
    bvals.push_back(p.b);
    for (int r = 0; r < 3; ++r) rows[std::size_t(r)].push_back(p.g[std::size_t(r)]);
  }
  std::string bvecs;
  for (int r = 0; r < 3; ++r) bvecs += format_real_line(rows[std::size_t(r)]);
  return {format_real_line(bvals), bvecs};
}

}  // namespace qsynth
