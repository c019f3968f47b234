#pragma once

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "mflip/basis.hpp"
#include "mflip/graph.hpp"
#include "mflip/random.hpp"
#include "mflip/structure.hpp"

namespace mflip {

/// Parameters of the analytic reference potential that stands in for the
/// ab-initio labeler: per-pair Lennard-Jones wells with a smooth cutoff,
/// a Stillinger-Weber-like three-body term, per-element reference
/// energies, and a coordination-based magmom map.
struct OracleParams {
  struct PairPot {
    double eps = 0.1;    // eV
    double sigma = 2.0;  // A
  };
  std::map<std::pair<int, int>, PairPot> pairs;  // key: (min Z, max Z)
  std::map<int, double> mu;                      // eV/atom reference energy
  double lambda = 0.12;                          // eV, three-body strength
  double r_pair = 4.0;                           // A
  double r_three = 3.0;                          // A

  std::map<int, double> magmom_base;             // mu_B
  std::map<int, double> magmom_coord_coef;       // mu_B per weighted neighbor
  double r_mag = 3.0;

  const PairPot& pair(int za, int zb) const {
    auto it = pairs.find({std::min(za, zb), std::max(za, zb)});
    if (it == pairs.end())
      throw std::invalid_argument("oracle has no pair parameters for (" +
                                  std::to_string(za) + "," + std::to_string(zb) + ")");
    return it->second;
  }
};

// Species palette: Li (3), O (8), Mn (25), Fe (26) on a rock-salt motif.
inline OracleParams high_fidelity_oracle() {
  OracleParams p;
  const double s_nn = 2.10 / std::pow(2.0, 1.0 / 6.0);   // cation-anion shell
  const double s_nnn = 2.97 / std::pow(2.0, 1.0 / 6.0);  // like-like shell
  auto set = [&](int a, int b, double eps, double sigma) {
    p.pairs[{std::min(a, b), std::max(a, b)}] = {eps, sigma};
  };
  set(3, 8, 0.35, s_nn);
  set(25, 8, 0.45, s_nn);
  set(26, 8, 0.42, s_nn);
  set(8, 8, 0.08, s_nnn);
  set(3, 3, 0.05, s_nnn);
  set(25, 25, 0.09, s_nnn);
  set(26, 26, 0.09, s_nnn);
  set(3, 25, 0.06, s_nnn);
  set(3, 26, 0.06, s_nnn);
  set(25, 26, 0.09, s_nnn);
  p.mu = {{3, -1.90}, {8, -4.76}, {25, -7.10}, {26, -6.45}};
  p.lambda = 0.12;
  p.magmom_base = {{3, 0.0}, {8, 0.10}, {25, 4.00}, {26, 3.60}};
  p.magmom_coord_coef = {{3, 0.0}, {8, -0.02}, {25, -0.12}, {26, -0.10}};
  return p;
}

/// Same functional form with every pair interaction perturbed by <= 10%
/// relative plus shifted reference energies: correlated with the
/// high-fidelity surface but systematically offset.
inline OracleParams low_fidelity_oracle() {
  OracleParams p = high_fidelity_oracle();
  int k = 0;
  for (auto& [key, pot] : p.pairs) {
    const double se = 0.04 + 0.03 * ((k % 3) - 1);  // 1%..7%
    pot.eps *= 1.0 + se;
    pot.sigma *= (k % 2 == 0) ? 0.995 : 1.005;
    ++k;
  }
  p.lambda *= 0.92;
  p.mu[3] += 0.55;
  p.mu[8] -= 0.38;
  p.mu[25] += 0.71;
  p.mu[26] -= 0.24;
  return p;
}

struct OracleLabels {
  double energy = 0.0;
  MatX3 forces;
  Mat3 stress = Mat3::Zero();
};

/// Analytic energy/forces/stress of the reference potential. Derivatives
/// are closed-form; a finite-difference self-check lives in the tests.
inline OracleLabels oracle_label(const Structure& structure, const OracleParams& p) {
  structure.validate();
  const Structure s = structure.wrapped();
  const int n = s.n_atoms();
  OracleLabels out;
  out.forces = MatX3::Zero(n, 3);
  Mat3 virial = Mat3::Zero();

  double energy = 0.0;
  for (int i = 0; i < n; ++i) energy += p.mu.at(s.species[i]);

  const auto edges = build_neighbor_list(s, p.r_pair);
  for (const auto& e : edges) {
    if (e.d < 0.5)
      throw std::invalid_argument("oracle domain: atoms closer than 0.5 A");
    const auto& pot = p.pair(s.species[e.i], s.species[e.j]);
    const double sr6 = std::pow(pot.sigma / e.d, 6.0);
    const double lj = 4.0 * pot.eps * (sr6 * sr6 - sr6);
    const double dlj = 4.0 * pot.eps * (-12.0 * sr6 * sr6 + 6.0 * sr6) / e.d;
    const double env = cutoff_envelope(e.d, p.r_pair);
    const double denv = -0.5 * std::numbers::pi / p.r_pair *
                        std::sin(std::numbers::pi * e.d / p.r_pair);
    // half per directed edge; each undirected pair appears twice
    energy += 0.5 * lj * env;
    const double g = 0.5 * (dlj * env + lj * denv);
    out.forces.row(e.i) += g * e.unit.transpose();
    out.forces.row(e.j) -= g * e.unit.transpose();
    virial += g * e.d * (e.unit * e.unit.transpose());
  }

  // Three-body over ordered pairs of short edges sharing a center.
  std::vector<std::vector<int>> short_edges(n);
  for (std::size_t k = 0; k < edges.size(); ++k)
    if (edges[k].d <= p.r_three) short_edges[edges[k].i].push_back(static_cast<int>(k));
  for (int center = 0; center < n; ++center) {
    for (int k1 : short_edges[center]) {
      for (int k2 : short_edges[center]) {
        if (k1 == k2) continue;
        const auto& e1 = edges[k1];
        const auto& e2 = edges[k2];
        const double c = e1.unit.dot(e2.unit);
        const double s1 = cutoff_envelope(e1.d, p.r_three);
        const double s2 = cutoff_envelope(e2.d, p.r_three);
        const double ds1 = -0.5 * std::numbers::pi / p.r_three *
                           std::sin(std::numbers::pi * e1.d / p.r_three);
        const double ds2 = -0.5 * std::numbers::pi / p.r_three *
                           std::sin(std::numbers::pi * e2.d / p.r_three);
        const double q = c + 1.0 / 3.0;
        energy += 0.5 * p.lambda * s1 * s2 * q * q;

        const double dc = p.lambda * s1 * s2 * q;  // dE/dcos
        const Eigen::Vector3d dci = (e2.unit - c * e1.unit) / e1.d;
        const Eigen::Vector3d dck = (e1.unit - c * e2.unit) / e2.d;
        out.forces.row(e1.j) -= dc * dci.transpose();
        out.forces.row(e2.j) -= dc * dck.transpose();
        out.forces.row(center) += dc * (dci + dck).transpose();

        const double g1 = 0.5 * p.lambda * ds1 * s2 * q * q;
        const double g2 = 0.5 * p.lambda * s1 * ds2 * q * q;
        out.forces.row(e1.j) -= g1 * e1.unit.transpose();
        out.forces.row(center) += g1 * e1.unit.transpose();
        out.forces.row(e2.j) -= g2 * e2.unit.transpose();
        out.forces.row(center) += g2 * e2.unit.transpose();

        Mat3 dce = Mat3::Zero();
        dce += e1.unit * e2.unit.transpose() + e2.unit * e1.unit.transpose();
        dce -= c * (e1.unit * e1.unit.transpose() + e2.unit * e2.unit.transpose());
        virial += dc * dce;
        virial += g1 * e1.d * (e1.unit * e1.unit.transpose());
        virial += g2 * e2.d * (e2.unit * e2.unit.transpose());
      }
    }
  }

  out.energy = energy;
  out.stress = virial / s.volume();
  return out;
}

/// Deterministic magmoms: species base value plus a coefficient times the
/// smoothly weighted coordination number within r_mag.
inline VecX oracle_magmom(const Structure& structure, const OracleParams& p) {
  structure.validate();
  const Structure s = structure.wrapped();
  const int n = s.n_atoms();
  VecX coord = VecX::Zero(n);
  for (const auto& e : build_neighbor_list(s, p.r_mag))
    coord(e.i) += cutoff_envelope(e.d, p.r_mag);
  VecX m(n);
  for (int i = 0; i < n; ++i)
    m(i) = p.magmom_base.at(s.species[i]) +
           p.magmom_coord_coef.at(s.species[i]) * coord(i);
  return m;
}

/// Rock-salt-motif generator settings.
struct StructureTemplate {
  double a0 = 4.2;  // conventional cell parameter, A
  std::vector<int> cations = {3, 25, 26};
  int anion = 8;
  std::vector<std::array<int, 3>> supercells = {{1, 1, 1}, {1, 1, 2}};
  double jitter_std = 0.1;          // A
  double vacancy_fraction_max = 0.25;  // of the cation sublattice
  double strain_amplitude = 0.03;
  double min_distance = 1.2;  // A
};

/// Perturbed rock-salt cells: random cation mixing, random vacancies on
/// the cation sublattice, Gaussian jitter, and a random symmetric cell
/// strain. Deterministic per seed; rejects candidates with atoms closer
/// than the template minimum distance.
inline std::vector<Structure> gen_structures(const StructureTemplate& tpl, int n,
                                             std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("gen_structures: n must be >= 1");
  static const std::array<Eigen::Vector3d, 4> cation_frac = {
      Eigen::Vector3d{0.0, 0.0, 0.0}, {0.5, 0.5, 0.0}, {0.5, 0.0, 0.5}, {0.0, 0.5, 0.5}};
  static const std::array<Eigen::Vector3d, 4> anion_frac = {
      Eigen::Vector3d{0.5, 0.0, 0.0}, {0.0, 0.5, 0.0}, {0.0, 0.0, 0.5}, {0.5, 0.5, 0.5}};

  Rng master(seed);
  std::vector<Structure> out;
  out.reserve(n);
  for (int idx = 0; idx < n; ++idx) {
    Rng rng = master.fork(idx);
    bool accepted = false;
    for (int attempt = 0; attempt < 1000 && !accepted; ++attempt) {
      const auto& sc = tpl.supercells[rng.uniform_index(tpl.supercells.size())];
      Structure s;
      Mat3 base = Mat3::Zero();
      base(0, 0) = tpl.a0 * sc[0];
      base(1, 1) = tpl.a0 * sc[1];
      base(2, 2) = tpl.a0 * sc[2];

      std::vector<Eigen::Vector3d> pos;
      std::vector<int> species;
      std::vector<std::size_t> cation_sites;
      for (int ax = 0; ax < sc[0]; ++ax)
        for (int ay = 0; ay < sc[1]; ++ay)
          for (int az = 0; az < sc[2]; ++az) {
            const Eigen::Vector3d shift(ax, ay, az);
            for (const auto& fr : cation_frac) {
              pos.push_back((fr + shift) * tpl.a0);
              species.push_back(
                  tpl.cations[rng.uniform_index(tpl.cations.size())]);
              cation_sites.push_back(pos.size() - 1);
            }
            for (const auto& fr : anion_frac) {
              pos.push_back((fr + shift) * tpl.a0);
              species.push_back(tpl.anion);
            }
          }

      const std::size_t n_vac = static_cast<std::size_t>(
          rng.uniform() * tpl.vacancy_fraction_max * cation_sites.size());
      rng.shuffle(cation_sites);
      std::vector<bool> removed(pos.size(), false);
      for (std::size_t v = 0; v < n_vac; ++v) removed[cation_sites[v]] = true;

      Mat3 strain = Mat3::Zero();
      for (int a = 0; a < 3; ++a)
        for (int b = a; b < 3; ++b) {
          const double e = rng.uniform(-tpl.strain_amplitude, tpl.strain_amplitude);
          strain(a, b) = e;
          strain(b, a) = e;
        }
      const Mat3 map = Mat3::Identity() + strain;

      s.lattice = base * map;
      for (std::size_t i = 0; i < pos.size(); ++i) {
        if (removed[i]) continue;
        Eigen::Vector3d r = pos[i];
        for (int c = 0; c < 3; ++c) r(c) += tpl.jitter_std * rng.gaussian();
        s.positions.conservativeResize(s.positions.rows() + 1, 3);
        s.positions.row(s.positions.rows() - 1) = (map.transpose() * r).transpose();
        s.species.push_back(species[i]);
      }

      // any edge within min_distance means the candidate is too dense
      if (!build_neighbor_list(s, tpl.min_distance).empty()) continue;
      s.validate();
      out.push_back(std::move(s));
      accepted = true;
    }
    if (!accepted)
      throw std::runtime_error("gen_structures: rejection sampling failed after "
                               "1000 attempts");
  }
  return out;
}

/// Two-fidelity synthetic dataset: fidelity 2 frames from the
/// high-fidelity oracle with magmoms, fidelity 1 frames from the
/// low-fidelity oracle with added label noise and no magmoms.
inline std::vector<LabeledFrame> make_dataset(int n_lf, int n_hf,
                                              std::uint64_t seed,
                                              const StructureTemplate& tpl = {}) {
  if (n_lf < 0 || n_hf < 0) throw std::invalid_argument("negative frame count");
  const OracleParams hf = high_fidelity_oracle();
  const OracleParams lf = low_fidelity_oracle();
  std::vector<LabeledFrame> frames;
  frames.reserve(n_lf + n_hf);

  if (n_lf > 0) {
    Rng noise(seed ^ 0xd01e5ULL);
    for (auto& s : gen_structures(tpl, n_lf, seed ^ 0x1f5ULL)) {
      LabeledFrame fr;
      auto lab = oracle_label(s, lf);
      fr.fidelity = 1;
      fr.energy = lab.energy + 0.002 * s.n_atoms() * noise.gaussian();
      fr.forces = lab.forces;
      for (Eigen::Index i = 0; i < fr.forces.rows(); ++i)
        for (int c = 0; c < 3; ++c) fr.forces(i, c) += 0.02 * noise.gaussian();
      fr.stress = lab.stress;
      fr.structure = std::move(s);
      frames.push_back(std::move(fr));
    }
  }
  if (n_hf > 0) {
    for (auto& s : gen_structures(tpl, n_hf, seed ^ 0x8fALL)) {
      LabeledFrame fr;
      auto lab = oracle_label(s, hf);
      fr.fidelity = 2;
      fr.energy = lab.energy;
      fr.forces = lab.forces;
      fr.stress = lab.stress;
      fr.magmoms = oracle_magmom(s, hf);
      fr.structure = std::move(s);
      frames.push_back(std::move(fr));
    }
  }
  return frames;
}

}  // namespace mflip
