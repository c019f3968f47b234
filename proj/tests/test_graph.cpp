#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>
#include <tuple>

#include "mflip/graph.hpp"
#include "test_support.hpp"

using namespace mflip;

namespace {

/// Brute-force neighbor enumeration over a generous image range,
/// independent of the production image-bound logic.
std::vector<Edge> brute_force_edges(const Structure& structure, double r_cut,
                                    int range = 5) {
  const Structure s = structure.wrapped();
  std::vector<Edge> out;
  const int n = s.n_atoms();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int ta = -range; ta <= range; ++ta)
        for (int tb = -range; tb <= range; ++tb)
          for (int tc = -range; tc <= range; ++tc) {
            if (i == j && ta == 0 && tb == 0 && tc == 0) continue;
            Eigen::Vector3d v = s.positions.row(j) - s.positions.row(i) +
                                ta * s.lattice.row(0) + tb * s.lattice.row(1) +
                                tc * s.lattice.row(2);
            const double d = v.norm();
            if (d == 0.0 || d > r_cut) continue;
            Edge e;
            e.i = i;
            e.j = j;
            e.image = {ta, tb, tc};
            e.d = d;
            e.unit = v / d;
            out.push_back(e);
          }
  return out;
}

using EdgeKey = std::tuple<int, int, int, int, int>;
EdgeKey key(const Edge& e) { return {e.i, e.j, e.image[0], e.image[1], e.image[2]}; }

std::map<EdgeKey, double> edge_map(const std::vector<Edge>& edges) {
  std::map<EdgeKey, double> m;
  for (const auto& e : edges) m[key(e)] = e.d;
  return m;
}

Structure cubic_cell(double a, std::vector<int> species,
                     std::vector<Eigen::Vector3d> pos) {
  Structure s;
  s.lattice = a * Mat3::Identity();
  s.species = std::move(species);
  s.positions.resize(static_cast<Eigen::Index>(pos.size()), 3);
  for (std::size_t i = 0; i < pos.size(); ++i) s.positions.row(i) = pos[i];
  return s;
}

}  // namespace

TEST_CASE("simple cubic self-images", "[graph]") {
  auto s = cubic_cell(3.0, {26}, {{0.1, 0.2, 0.3}});
  auto edges = build_neighbor_list(s, 3.5);
  REQUIRE(edges.size() == 6);
  for (const auto& e : edges) {
    CHECK(e.i == 0);
    CHECK(e.j == 0);
    CHECK(e.d == Catch::Approx(3.0).margin(1e-12));
  }
  CHECK(build_neighbor_list(s, 2.9).empty());
}

TEST_CASE("neighbor list matches brute-force enumeration", "[graph]") {
  Rng rng(21);
  for (int rep = 0; rep < 5; ++rep) {
    Structure s = testing::random_structure(rng, 12, 6.5);
    auto fast = edge_map(build_neighbor_list(s, 5.0));
    auto slow = edge_map(brute_force_edges(s, 5.0));
    REQUIRE(fast.size() == slow.size());
    for (const auto& [k, d] : slow) {
      REQUIRE(fast.count(k) == 1);
      CHECK(std::abs(fast[k] - d) <= 1e-12);
    }
  }
}

TEST_CASE("neighbor list rejects cutoffs beyond the image bound", "[graph]") {
  auto s = cubic_cell(1.0, {1}, {{0.0, 0.0, 0.0}});
  CHECK_THROWS_WITH(build_neighbor_list(s, 20.0),
                    Catch::Matchers::ContainsSubstring("larger cell"));
  CHECK_THROWS(build_neighbor_list(s, -1.0));
}

TEST_CASE("edges come in image-negated pairs", "[graph]") {
  Rng rng(22);
  Structure s = testing::random_structure(rng, 8, 6.0);
  auto edges = build_neighbor_list(s, 5.0);
  auto m = edge_map(edges);
  for (const auto& e : edges) {
    EdgeKey partner{e.j, e.i, -e.image[0], -e.image[1], -e.image[2]};
    REQUIRE(m.count(partner) == 1);
    CHECK(m[partner] == e.d);  // bitwise: negated vector has identical norm
  }
}

TEST_CASE("dimer graph has two edges and no triplets", "[graph]") {
  auto s = cubic_cell(50.0, {26, 8}, {{10, 10, 10}, {12, 10, 10}});
  auto g = build_crystal_graph(s, 5.0, 3.0);
  CHECK(g.n_edges() == 2);
  CHECK(g.n_triplets() == 0);
}

TEST_CASE("equilateral triangle has six edges and six 60-degree triplets", "[graph]") {
  const double side = 2.0;
  auto s = cubic_cell(60.0, {8, 8, 8},
                      {{10, 10, 10},
                       {10 + side, 10, 10},
                       {10 + side / 2, 10 + side * std::sqrt(3.0) / 2, 10}});
  auto g = build_crystal_graph(s, 5.0, 3.0);
  CHECK(g.n_edges() == 6);
  REQUIRE(g.n_triplets() == 6);
  for (const auto& t : g.bond_graph.triplets)
    CHECK(t.cos_theta == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("triplets match brute-force enumeration over edge pairs", "[graph]") {
  Rng rng(23);
  Structure s = testing::random_structure(rng, 16, 7.0);
  auto g = build_crystal_graph(s, 5.0, 3.0);
  const auto& edges = g.atom_graph.edges;

  std::set<std::pair<int, int>> expected;
  for (int a = 0; a < static_cast<int>(edges.size()); ++a)
    for (int b = 0; b < static_cast<int>(edges.size()); ++b) {
      if (a == b) continue;
      if (edges[a].i != edges[b].i) continue;
      if (edges[a].d > 3.0 || edges[b].d > 3.0) continue;
      expected.insert({a, b});
    }
  REQUIRE(g.n_triplets() == static_cast<int>(expected.size()));
  for (const auto& t : g.bond_graph.triplets) {
    REQUIRE(expected.count({t.e1, t.e2}) == 1);
    CHECK(t.center == edges[t.e1].i);
    const double c = edges[t.e1].unit.dot(edges[t.e2].unit);
    CHECK(std::abs(t.cos_theta - std::clamp(c, -1.0, 1.0)) <= 1e-12);
    CHECK(t.cos_theta >= -1.0);
    CHECK(t.cos_theta <= 1.0);
  }
}

TEST_CASE("graph is invariant to translation, rotation, and wrapping", "[graph]") {
  Rng rng(24);
  auto fingerprint = [](const CrystalGraph& g) {
    std::vector<std::tuple<int, int, double>> pair_fp;
    for (const auto& e : g.atom_graph.edges)
      pair_fp.push_back({g.structure.species[e.i], g.structure.species[e.j],
                         std::round(e.d * 1e9)});
    std::sort(pair_fp.begin(), pair_fp.end());
    std::vector<std::tuple<int, double>> trip_fp;
    for (const auto& t : g.bond_graph.triplets)
      trip_fp.push_back({g.structure.species[t.center],
                         std::round(t.cos_theta * 1e9)});
    std::sort(trip_fp.begin(), trip_fp.end());
    return std::make_pair(pair_fp, trip_fp);
  };

  for (int rep = 0; rep < 3; ++rep) {
    Structure s = testing::random_structure(rng, 10, 6.0);
    auto base = fingerprint(build_crystal_graph(s, 5.0, 3.0));

    Structure translated = s;
    Eigen::RowVector3d shift(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
    for (int i = 0; i < translated.n_atoms(); ++i) translated.positions.row(i) += shift;
    CHECK(fingerprint(build_crystal_graph(translated, 5.0, 3.0)) == base);

    // rotation about z applied to lattice and positions together
    const double ang = rng.uniform(0, 2 * std::numbers::pi);
    Mat3 q;
    q << std::cos(ang), -std::sin(ang), 0, std::sin(ang), std::cos(ang), 0, 0, 0, 1;
    Structure rotated = s;
    rotated.lattice = s.lattice * q.transpose();
    for (int i = 0; i < rotated.n_atoms(); ++i)
      rotated.positions.row(i) = s.positions.row(i) * q.transpose();
    auto rot_fp = fingerprint(build_crystal_graph(rotated, 5.0, 3.0));
    REQUIRE(rot_fp.first.size() == base.first.size());
    for (std::size_t k = 0; k < base.first.size(); ++k) {
      CHECK(std::get<0>(rot_fp.first[k]) == std::get<0>(base.first[k]));
      CHECK(std::abs(std::get<2>(rot_fp.first[k]) - std::get<2>(base.first[k])) <= 32);
    }

    Structure shifted_cells = s;
    for (int i = 0; i < shifted_cells.n_atoms(); ++i)
      shifted_cells.positions.row(i) +=
          (i % 2 ? 2.0 : -1.0) * s.lattice.row(0) + (i % 3 ? 1.0 : 0.0) * s.lattice.row(2);
    CHECK(fingerprint(build_crystal_graph(shifted_cells, 5.0, 3.0)) == base);
  }
}

TEST_CASE("atom relabeling permutes the graph consistently", "[graph]") {
  Rng rng(25);
  Structure s = testing::random_structure(rng, 8, 6.0);
  std::vector<int> perm(8);
  for (int i = 0; i < 8; ++i) perm[i] = i;
  rng.shuffle(perm);
  Structure p;
  p.lattice = s.lattice;
  p.positions.resize(8, 3);
  p.species.resize(8);
  for (int i = 0; i < 8; ++i) {
    p.positions.row(perm[i]) = s.positions.row(i);
    p.species[perm[i]] = s.species[i];
  }
  auto ga = build_crystal_graph(s, 5.0, 3.0);
  auto gb = build_crystal_graph(p, 5.0, 3.0);
  REQUIRE(ga.n_edges() == gb.n_edges());
  REQUIRE(ga.n_triplets() == gb.n_triplets());

  auto canon = [&](const CrystalGraph& g, const std::vector<int>* map) {
    std::vector<std::tuple<int, int, int, int, int, double>> fp;
    for (const auto& e : g.atom_graph.edges) {
      int i = map ? (*map)[e.i] : e.i;
      int j = map ? (*map)[e.j] : e.j;
      fp.push_back({i, j, 0, 0, 0, std::round(e.d * 1e10)});
    }
    std::sort(fp.begin(), fp.end());
    return fp;
  };
  CHECK(canon(ga, &perm) == canon(gb, nullptr));
}

TEST_CASE("radial basis shape, cutoff and derivative", "[graph]") {
  CHECK(radial_basis(2.0, 5.0, 31).size() == 31);
  CHECK(radial_basis(5.0, 5.0, 31).cwiseAbs().maxCoeff() == Catch::Approx(0.0).margin(1e-30));
  CHECK_THROWS(radial_basis(5.1, 5.0, 31));
  CHECK_THROWS(radial_basis(0.0, 5.0, 31));

  Rng rng(26);
  for (int rep = 0; rep < 10; ++rep) {
    const double d = rng.uniform(0.5, 4.5);
    const double h = 1e-6;
    auto up = radial_basis(d + h, 5.0, 31);
    auto dn = radial_basis(d - h, 5.0, 31);
    auto mid = radial_basis(d, 5.0, 31);
    CHECK(mid.maxCoeff() <= 1.0);
    CHECK(mid.minCoeff() >= 0.0);
    // smoothness proxy: finite differences at two nearby points agree
    auto up2 = radial_basis(d + 2 * h, 5.0, 31);
    for (int k = 0; k < 31; ++k) {
      const double d1 = (up(k) - dn(k)) / (2 * h);
      const double d2 = (up2(k) - mid(k)) / (2 * h);
      CHECK(testing::close(d1, d2, 1e-3, 1e-6));
    }
  }
}

TEST_CASE("radial basis vanishes smoothly at the cutoff", "[graph]") {
  const double rc = 5.0;
  for (double delta : {1e-4, 1e-5, 1e-6}) {
    auto v = radial_basis(rc - delta, rc, 31);
    CHECK(v.cwiseAbs().maxCoeff() <= 2.5 * delta * delta);  // quadratic approach
    auto v2 = radial_basis(rc - 2 * delta, rc, 31);
    const double slope = (v2 - v).cwiseAbs().maxCoeff() / delta;
    CHECK(slope <= 10 * delta);
  }
}

TEST_CASE("angular basis shape, endpoints and derivative", "[graph]") {
  CHECK(angular_basis(0.3, 31).size() == 31);
  auto ones = angular_basis(1.0, 31);
  for (int k = 0; k < 31; ++k) CHECK(ones(k) == Catch::Approx(1.0).margin(1e-12));
  CHECK_THROWS(angular_basis(1.0 + 1e-6, 31));
  CHECK_NOTHROW(angular_basis(1.0 + 1e-10, 31));

  Rng rng(27);
  for (int rep = 0; rep < 10; ++rep) {
    const double c = rng.uniform(-0.95, 0.95);
    const double h = 1e-6;
    auto up = angular_basis(c + h, 11);
    auto dn = angular_basis(c - h, 11);
    auto mid = angular_basis(c, 11);
    CHECK(mid.maxCoeff() <= 1.0 + 1e-12);
    CHECK(mid.minCoeff() >= -1.0 - 1e-12);
    // cos(k theta) derivative w.r.t. cos(theta): k sin(k theta)/sin(theta)
    const double theta = std::acos(c);
    for (int k = 0; k < 11; ++k) {
      const double analytic = k == 0 ? 0.0 : k * std::sin(k * theta) / std::sin(theta);
      const double fd = (up(k) - dn(k)) / (2 * h);
      CHECK(testing::close(fd, analytic, 1e-6, 1e-6));
    }
  }
}

TEST_CASE("crystal graph features match the basis functions", "[graph]") {
  Rng rng(28);
  Structure s = testing::random_structure(rng, 6, 6.0);
  auto g = build_crystal_graph(s, 5.0, 3.0, 13, 9);
  REQUIRE(g.atom_graph.radial_features.cols() == 13);
  REQUIRE(g.bond_graph.angular_features.cols() == 9);
  for (int e = 0; e < g.n_edges(); ++e) {
    auto expect = radial_basis(g.atom_graph.edges[e].d, 5.0, 13);
    CHECK((g.atom_graph.radial_features.row(e).transpose() - expect).cwiseAbs().maxCoeff() <= 1e-15);
  }
  for (int t = 0; t < g.n_triplets(); ++t) {
    auto expect = angular_basis(g.bond_graph.triplets[t].cos_theta, 9);
    CHECK((g.bond_graph.angular_features.row(t).transpose() - expect).cwiseAbs().maxCoeff() <= 1e-15);
  }
}
