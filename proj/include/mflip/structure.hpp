#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mflip/random.hpp"

namespace mflip {

using Mat3 = Eigen::Matrix3d;
using MatX3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using VecX = Eigen::VectorXd;

/// Number of chemical elements tracked by composition vectors (Z = 1..94).
inline constexpr int kNumElements = 94;

/// Conversion factor for stress reporting: 1 eV/A^3 = 160.21766208 GPa.
inline constexpr double kEvPerA3ToGPa = 160.21766208;

/// Periodic crystal cell. Lattice rows are the cell vectors in Angstrom,
/// positions are Cartesian. Immutable by convention after construction.
struct Structure {
  Mat3 lattice;
  std::vector<int> species;  // atomic numbers, 1..94
  MatX3 positions;

  int n_atoms() const { return static_cast<int>(species.size()); }
  double volume() const { return lattice.determinant(); }

  void validate() const {
    if (species.empty()) throw std::invalid_argument("structure has no atoms");
    if (positions.rows() != static_cast<Eigen::Index>(species.size()))
      throw std::invalid_argument("species/positions length mismatch");
    if (!(volume() > 0.0))
      throw std::invalid_argument("cell volume must be positive");
    for (int z : species)
      if (z < 1 || z > kNumElements)
        throw std::invalid_argument("atomic number out of range [1,94]: " +
                                    std::to_string(z));
  }

  /// Fractional coordinates (rows), positions = frac * lattice.
  MatX3 fractional() const {
    Mat3 inv = lattice.inverse();
    MatX3 f(positions.rows(), 3);
    for (Eigen::Index i = 0; i < positions.rows(); ++i)
      f.row(i) = positions.row(i) * inv;
    return f;
  }

  /// Copy with all positions wrapped into the unit cell.
  Structure wrapped() const {
    Structure s = *this;
    MatX3 f = fractional();
    for (Eigen::Index i = 0; i < f.rows(); ++i)
      for (int d = 0; d < 3; ++d) f(i, d) -= std::floor(f(i, d));
    for (Eigen::Index i = 0; i < f.rows(); ++i)
      s.positions.row(i) = f.row(i) * lattice;
    return s;
  }
};

/// A training/test sample: structure plus labels at a given fidelity.
/// Low-fidelity frames legitimately lack magmom labels.
struct LabeledFrame {
  Structure structure;
  int fidelity = 1;
  double energy = 0.0;               // eV per cell
  MatX3 forces;                      // eV/A
  Mat3 stress = Mat3::Zero();        // eV/A^3
  std::optional<VecX> magmoms;       // mu_B

  void validate(int n_fidelities) const {
    structure.validate();
    if (fidelity < 1 || fidelity > n_fidelities)
      throw std::invalid_argument("fidelity " + std::to_string(fidelity) +
                                  " outside [1," +
                                  std::to_string(n_fidelities) + "]");
    if (forces.rows() != structure.positions.rows())
      throw std::invalid_argument("forces row count differs from atom count");
    if (magmoms && magmoms->size() != structure.n_atoms())
      throw std::invalid_argument("magmoms length differs from atom count");
  }
};

/// Symmetrize an ingested stress tensor; reject matrices that are too far
/// from symmetric to be label noise.
inline Mat3 symmetrize_stress(const Mat3& s, double max_asymmetry = 1e-6) {
  const double asym = (s - s.transpose()).cwiseAbs().maxCoeff();
  if (asym > max_asymmetry)
    throw std::invalid_argument("stress asymmetry " + std::to_string(asym) +
                                " exceeds tolerance");
  return 0.5 * (s + s.transpose());
}

/// Atomic fractions indexed by atomic number; entries sum to 1.
struct CompositionVector {
  VecX x = VecX::Zero(kNumElements);

  double fraction(int z) const { return x(z - 1); }
};

inline CompositionVector composition_vector(const Structure& s) {
  if (s.species.empty()) throw std::invalid_argument("empty structure");
  CompositionVector c;
  for (int z : s.species) c.x(z - 1) += 1.0;
  c.x /= static_cast<double>(s.species.size());
  return c;
}

/// Deterministic split into (train, test). Test gets round(fraction * n)
/// frames; both sides keep the input's relative order.
inline std::pair<std::vector<LabeledFrame>, std::vector<LabeledFrame>>
split_dataset(const std::vector<LabeledFrame>& frames, double test_fraction,
              std::uint64_t seed) {
  if (test_fraction < 0.0 || test_fraction >= 1.0)
    throw std::invalid_argument("test_fraction must be in [0,1)");
  const std::size_t n = frames.size();
  const std::size_t n_test = static_cast<std::size_t>(
      std::llround(test_fraction * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  std::vector<bool> is_test(n, false);
  for (std::size_t i = 0; i < n_test; ++i) is_test[idx[i]] = true;
  std::vector<LabeledFrame> train, test;
  train.reserve(n - n_test);
  test.reserve(n_test);
  for (std::size_t i = 0; i < n; ++i)
    (is_test[i] ? test : train).push_back(frames[i]);
  return {std::move(train), std::move(test)};
}

}  // namespace mflip
