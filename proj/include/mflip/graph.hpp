#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "mflip/basis.hpp"
#include "mflip/structure.hpp"

namespace mflip {

/// Directed periodic bond: from atom i to the image of atom j shifted by
/// integer lattice offsets. Every edge has a partner (j, i, -image).
struct Edge {
  int i = 0;
  int j = 0;
  std::array<int, 3> image{0, 0, 0};
  double d = 0.0;                          // bond length, Angstrom
  Eigen::Vector3d unit = Eigen::Vector3d::Zero();
};

struct AtomGraph {
  std::vector<Edge> edges;
  Eigen::MatrixXd radial_features;  // n_edges x n_radial
};

/// Angle between two bonds sharing a center atom: edges e1 = (j -> i) and
/// e2 = (j -> k), both within r_bond. Ordered pairs, e1 != e2.
struct Triplet {
  int e1 = 0;
  int e2 = 0;
  int center = 0;
  double cos_theta = 0.0;
};

struct BondGraph {
  std::vector<Triplet> triplets;
  Eigen::MatrixXd angular_features;  // n_triplets x n_angular
};

struct CrystalGraph {
  AtomGraph atom_graph;
  BondGraph bond_graph;
  int n_atoms = 0;
  int fidelity = 1;
  double r_atom = 0.0;
  double r_bond = 0.0;
  Structure structure;  // wrapped copy the graph was built from

  int n_edges() const { return static_cast<int>(atom_graph.edges.size()); }
  int n_triplets() const { return static_cast<int>(bond_graph.triplets.size()); }
};

/// All directed pairs (i, j, image) with 0 < |r_j + image*L - r_i| <= r_cut,
/// including periodic self-images (i == j, image != 0). Positions are
/// wrapped into the cell first so the edge multiset is wrap-invariant.
inline std::vector<Edge> build_neighbor_list(const Structure& structure,
                                             double r_cut,
                                             int max_images_per_axis = 8) {
  if (!(r_cut > 0.0)) throw std::invalid_argument("r_cut must be positive");
  structure.validate();
  const Structure s = structure.wrapped();
  const Mat3& lat = s.lattice;
  const double volume = s.volume();

  // Perpendicular widths of the cell; images needed per axis follow from
  // how many cell widths fit inside the cutoff.
  std::array<int, 3> n_img;
  for (int a = 0; a < 3; ++a) {
    const Eigen::Vector3d b = lat.row((a + 1) % 3);
    const Eigen::Vector3d c = lat.row((a + 2) % 3);
    const double width = volume / b.cross(c).norm();
    n_img[a] = static_cast<int>(std::ceil(r_cut / width)) + 1;
    if (n_img[a] > max_images_per_axis)
      throw std::runtime_error(
          "periodic image search needs " + std::to_string(n_img[a]) +
          " images on axis " + std::to_string(a) +
          " (bound " + std::to_string(max_images_per_axis) +
          "); use a larger cell or a smaller cutoff");
  }

  const int n = s.n_atoms();
  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(n) * 16);
  const double r2 = r_cut * r_cut;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const Eigen::Vector3d base =
          s.positions.row(j).transpose() - s.positions.row(i).transpose();
      for (int ta = -n_img[0]; ta <= n_img[0]; ++ta)
        for (int tb = -n_img[1]; tb <= n_img[1]; ++tb)
          for (int tc = -n_img[2]; tc <= n_img[2]; ++tc) {
            if (i == j && ta == 0 && tb == 0 && tc == 0) continue;
            const Eigen::Vector3d v = base + ta * lat.row(0).transpose() +
                                      tb * lat.row(1).transpose() +
                                      tc * lat.row(2).transpose();
            const double d2 = v.squaredNorm();
            if (d2 > r2 || d2 == 0.0) continue;
            Edge e;
            e.i = i;
            e.j = j;
            e.image = {ta, tb, tc};
            e.d = std::sqrt(d2);
            e.unit = v / e.d;
            edges.push_back(e);
          }
    }
  }
  return edges;
}

/// Atom graph within r_atom plus all ordered bond-angle triplets whose two
/// member edges are within r_bond, with basis-expanded features.
inline CrystalGraph build_crystal_graph(const Structure& structure,
                                        double r_atom, double r_bond,
                                        int n_radial = 31, int n_angular = 31,
                                        int fidelity = 1,
                                        int max_images_per_axis = 8) {
  if (!(r_bond > 0.0) || r_bond > r_atom)
    throw std::invalid_argument("need 0 < r_bond <= r_atom");
  CrystalGraph g;
  g.structure = structure.wrapped();
  g.n_atoms = structure.n_atoms();
  g.fidelity = fidelity;
  g.r_atom = r_atom;
  g.r_bond = r_bond;
  g.atom_graph.edges = build_neighbor_list(structure, r_atom, max_images_per_axis);

  const auto& edges = g.atom_graph.edges;
  const int n_edges = static_cast<int>(edges.size());
  g.atom_graph.radial_features.resize(n_edges, n_radial);
  for (int e = 0; e < n_edges; ++e)
    g.atom_graph.radial_features.row(e) =
        radial_basis(edges[e].d, r_atom, n_radial).transpose();

  // Short edges grouped by source atom; triplet order is deterministic
  // (by e1 then e2 index).
  std::vector<std::vector<int>> short_edges(g.n_atoms);
  for (int e = 0; e < n_edges; ++e)
    if (edges[e].d <= r_bond) short_edges[edges[e].i].push_back(e);

  auto& triplets = g.bond_graph.triplets;
  for (int center = 0; center < g.n_atoms; ++center) {
    for (int e1 : short_edges[center]) {
      for (int e2 : short_edges[center]) {
        if (e1 == e2) continue;
        Triplet t;
        t.e1 = e1;
        t.e2 = e2;
        t.center = center;
        t.cos_theta =
            std::clamp(edges[e1].unit.dot(edges[e2].unit), -1.0, 1.0);
        triplets.push_back(t);
      }
    }
  }
  const int n_trip = static_cast<int>(triplets.size());
  g.bond_graph.angular_features.resize(n_trip, n_angular);
  for (int t = 0; t < n_trip; ++t)
    g.bond_graph.angular_features.row(t) =
        angular_basis(triplets[t].cos_theta, n_angular).transpose();
  return g;
}

}  // namespace mflip
