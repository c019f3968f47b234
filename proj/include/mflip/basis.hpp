#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mflip {

/// Smooth cutoff envelope: 1 at d=0, value and slope 0 at d=r_cut.
inline double cutoff_envelope(double d, double r_cut) {
  return 0.5 * (std::cos(std::numbers::pi * d / r_cut) + 1.0);
}

/// Gaussians centered uniformly on [0, r_cut] (width = spacing), damped by
/// the cutoff envelope. Components lie in [0, 1] and vanish smoothly at
/// the cutoff.
inline Eigen::VectorXd radial_basis(double d, double r_cut, int n) {
  if (n < 1) throw std::invalid_argument("radial basis needs n >= 1");
  if (!(d > 0.0) || d > r_cut)
    throw std::invalid_argument("radial basis requires 0 < d <= r_cut");
  const double width = n > 1 ? r_cut / (n - 1) : r_cut;
  const double env = cutoff_envelope(d, r_cut);
  Eigen::VectorXd out(n);
  for (int k = 0; k < n; ++k) {
    const double t = (d - k * width) / width;
    out(k) = std::exp(-t * t) * env;
  }
  return out;
}

/// Fourier functions cos(k*theta), k = 0..n-1, evaluated from cos(theta)
/// by the Chebyshev recurrence (no acos, stable at |cos| -> 1). Values lie
/// in [-1, 1]; inputs slightly outside are clamped within a 1e-9 slack.
inline Eigen::VectorXd angular_basis(double cos_theta, int n) {
  if (n < 1) throw std::invalid_argument("angular basis needs n >= 1");
  if (cos_theta > 1.0 + 1e-9 || cos_theta < -1.0 - 1e-9)
    throw std::invalid_argument("cos(theta) out of [-1,1]");
  const double c = std::clamp(cos_theta, -1.0, 1.0);
  Eigen::VectorXd out(n);
  out(0) = 1.0;
  if (n > 1) out(1) = c;
  for (int k = 2; k < n; ++k) out(k) = 2.0 * c * out(k - 1) - out(k - 2);
  return out;
}

}  // namespace mflip
