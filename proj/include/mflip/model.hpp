#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mflip/graph.hpp"
#include "mflip/random.hpp"
#include "mflip/structure.hpp"
#include "mflip/tape.hpp"

namespace mflip {

struct ModelDims {
  int feature_dim = 64;   // atom/bond/angle feature width
  int hidden_dim = 64;    // gated-MLP and readout hidden width
  int n_layers = 4;       // graph convolution layers
  int n_radial = 31;
  int n_angular = 31;
  double r_atom = 5.0;    // atom-graph cutoff, Angstrom
  double r_bond = 3.0;    // bond-graph (three-body) cutoff
  int max_images = 8;

  void validate() const {
    if (feature_dim < 1 || hidden_dim < 1) throw std::invalid_argument("bad feature dims");
    if (n_layers < 2) throw std::invalid_argument("need n_layers >= 2");
    if (n_radial < 1 || n_angular < 1) throw std::invalid_argument("bad basis sizes");
    if (!(r_bond > 0.0) || r_bond > r_atom) throw std::invalid_argument("need 0 < r_bond <= r_atom");
  }
};

/// Which fidelity-dependent mechanisms are active. With all four off the
/// model is the plain single-fidelity network regardless of n_fidelities.
struct FidelityConfig {
  int n_fidelities = 2;
  bool fid_embedding = true;    // fidelity embedding added to atom embedding
  bool fid_messages = true;     // fidelity columns in conv message layers
  bool fid_readout = true;      // per-fidelity readout head
  bool fid_composition = true;  // per-fidelity composition model

  static FidelityConfig single_fidelity() { return {1, false, false, false, false}; }

  static FidelityConfig all_off(int n_f) { return {n_f, false, false, false, false}; }

  void validate() const {
    if (n_fidelities < 1) throw std::invalid_argument("n_fidelities must be >= 1");
  }

  void check_fidelity(int f) const {
    if (f < 1 || f > n_fidelities)
      throw std::invalid_argument("fidelity " + std::to_string(f) +
                                  " outside [1," + std::to_string(n_fidelities) + "]");
  }
};

/// One-hot fidelity encoding, entry f-1 set.
inline VecX one_hot_fidelity(int f, int n_fidelities) {
  if (f < 1 || f > n_fidelities)
    throw std::invalid_argument("fidelity out of range for one-hot");
  VecX v = VecX::Zero(n_fidelities);
  v(f - 1) = 1.0;
  return v;
}

// Parameter tensors. W matrices act on feature rows as y = x * W^T + b,
// with W shaped (out x in) and biases shaped (1 x out).
struct BranchParams {
  Mat w1, b1, wf, w2, b2;  // wf: hidden x n_fidelities, first-layer fidelity columns
};

struct GatedMlpParams {
  BranchParams core, gate;
};

struct ReadoutHeadParams {
  Mat w1, b1, w2, b2;  // feature -> hidden -> scalar
};

struct ModelParams {
  ModelDims dims;
  FidelityConfig fidelity;

  Mat elem_embed;    // 94 x d
  Mat fid_embed;     // n_F x d
  Mat bond_embed;    // d x n_radial
  Mat angle_embed;   // d x n_angular
  std::vector<GatedMlpParams> phi_v;  // n_layers
  std::vector<GatedMlpParams> phi_e;  // n_layers - 1
  std::vector<GatedMlpParams> phi_a;  // n_layers - 1
  std::vector<ReadoutHeadParams> readout;  // n_F heads
  Mat magmom_w;      // 1 x d
  Mat magmom_b;      // 1 x 1
  Mat composition;   // 94 x n_F, eV/atom, fit separately and frozen
};

/// Visit every tensor with a stable name, in a fixed canonical order.
template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  fn("elem_embed", p.elem_embed);
  fn("fid_embed", p.fid_embed);
  fn("bond_embed", p.bond_embed);
  fn("angle_embed", p.angle_embed);
  auto visit_mlp = [&](const std::string& base, auto& mlp) {
    auto visit_branch = [&](const std::string& bb, auto& br) {
      fn(bb + ".w1", br.w1);
      fn(bb + ".b1", br.b1);
      fn(bb + ".wf", br.wf);
      fn(bb + ".w2", br.w2);
      fn(bb + ".b2", br.b2);
    };
    visit_branch(base + ".core", mlp.core);
    visit_branch(base + ".gate", mlp.gate);
  };
  for (std::size_t l = 0; l < p.phi_v.size(); ++l)
    visit_mlp("conv" + std::to_string(l) + ".atom", p.phi_v[l]);
  for (std::size_t l = 0; l < p.phi_e.size(); ++l)
    visit_mlp("conv" + std::to_string(l) + ".bond", p.phi_e[l]);
  for (std::size_t l = 0; l < p.phi_a.size(); ++l)
    visit_mlp("conv" + std::to_string(l) + ".angle", p.phi_a[l]);
  for (std::size_t h = 0; h < p.readout.size(); ++h) {
    const std::string base = "readout" + std::to_string(h + 1);
    fn(base + ".w1", p.readout[h].w1);
    fn(base + ".b1", p.readout[h].b1);
    fn(base + ".w2", p.readout[h].w2);
    fn(base + ".b2", p.readout[h].b2);
  }
  fn("magmom.w", p.magmom_w);
  fn("magmom.b", p.magmom_b);
  fn("composition", p.composition);
}

namespace detail {

inline GatedMlpParams make_gated_mlp_shape(int in_dim, int hidden, int out,
                                           int n_f) {
  GatedMlpParams m;
  for (BranchParams* br : {&m.core, &m.gate}) {
    br->w1 = Mat::Zero(hidden, in_dim);
    br->b1 = Mat::Zero(1, hidden);
    br->wf = Mat::Zero(hidden, n_f);
    br->w2 = Mat::Zero(out, hidden);
    br->b2 = Mat::Zero(1, out);
  }
  return m;
}

inline double glorot_bound(const Mat& w) {
  return std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
}

}  // namespace detail

/// Allocate parameters with fidelity-neutral initialization: zero fidelity
/// embeddings and fidelity columns, readout heads cloned from head 1, zero
/// composition weights. Shared weights are uniform +-sqrt(6/(fan_in+fan_out)).
inline ModelParams init_params(const ModelDims& dims, const FidelityConfig& fc,
                               std::uint64_t seed) {
  dims.validate();
  fc.validate();
  const int d = dims.feature_dim;
  const int h = dims.hidden_dim;
  const int nf = fc.n_fidelities;

  ModelParams p;
  p.dims = dims;
  p.fidelity = fc;
  p.elem_embed = Mat::Zero(kNumElements, d);
  p.fid_embed = Mat::Zero(nf, d);
  p.bond_embed = Mat::Zero(d, dims.n_radial);
  p.angle_embed = Mat::Zero(d, dims.n_angular);
  p.phi_v.assign(dims.n_layers, detail::make_gated_mlp_shape(3 * d, h, d, nf));
  p.phi_e.assign(dims.n_layers - 1, detail::make_gated_mlp_shape(4 * d, h, d, nf));
  p.phi_a.assign(dims.n_layers - 1, detail::make_gated_mlp_shape(4 * d, h, d, nf));
  p.readout.resize(nf);
  for (auto& head : p.readout) {
    head.w1 = Mat::Zero(h, d);
    head.b1 = Mat::Zero(1, h);
    head.w2 = Mat::Zero(1, h);
    head.b2 = Mat::Zero(1, 1);
  }
  p.magmom_w = Mat::Zero(1, d);
  p.magmom_b = Mat::Zero(1, 1);
  p.composition = Mat::Zero(kNumElements, nf);

  // Fill weight matrices in canonical order. Fidelity tensors, biases and
  // clones draw nothing, so the shared weights depend only on the seed.
  Rng rng(seed);
  auto fill = [&](Mat& w) {
    const double b = detail::glorot_bound(w);
    for (Eigen::Index i = 0; i < w.size(); ++i)
      w.data()[i] = rng.uniform(-b, b);
  };
  fill(p.elem_embed);
  fill(p.bond_embed);
  fill(p.angle_embed);
  for (auto* stack : {&p.phi_v, &p.phi_e, &p.phi_a})
    for (auto& mlp : *stack)
      for (BranchParams* br : {&mlp.core, &mlp.gate}) {
        fill(br->w1);
        fill(br->w2);
      }
  fill(p.readout[0].w1);
  fill(p.readout[0].w2);
  for (int f = 1; f < nf; ++f) p.readout[f] = p.readout[0];
  fill(p.magmom_w);
  return p;
}

// ---------------------------------------------------------------------------
// Taped forward pass
// ---------------------------------------------------------------------------

/// Tape leaves for every parameter tensor, in for_each_tensor order.
struct BoundParams {
  std::vector<std::string> names;
  std::vector<Var> leaves;

  Var find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return leaves[i];
    throw std::invalid_argument("no parameter tensor named " + name);
  }
};

inline BoundParams bind_params(Tape& t, const ModelParams& p) {
  BoundParams b;
  for_each_tensor(p, [&](const std::string& name, const Mat& m) {
    b.names.push_back(name);
    b.leaves.push_back(t.leaf(m));
  });
  return b;
}

struct BoundBranch {
  Var w1, b1, wf, w2, b2;
};
struct BoundGatedMlp {
  BoundBranch core, gate;
};

/// Graph index lists registered on a tape plus the taped geometry-derived
/// quantities every conv layer consumes.
struct GraphWiring {
  int n_atoms = 0;
  int n_edges = 0;
  int n_triplets = 0;
  int idx_edge_src = -1;    // edge -> source atom i
  int idx_edge_dst = -1;    // edge -> destination atom j
  int idx_trip_e1 = -1;     // triplet -> first member edge (j -> i)
  int idx_trip_e2 = -1;     // triplet -> second member edge (j -> k), message target
  int idx_trip_center = -1; // triplet -> center atom j
  Var lengths;              // E x 1, bond lengths under strain
  Var cos_theta;            // T x 1
  Var env_atom;             // E x 1, cutoff envelope at r_atom
  Var trip_weight;          // T x 1, product of r_bond envelopes of both member edges
};

/// y = x W^T + b (+ W_F f_g when fidelity messages are enabled). The
/// fidelity one-hot picks a single column of W_F, so gradients w.r.t.
/// every other column are exactly zero.
inline Var fidelity_linear(Tape& t, Var x, Var w, Var b, Var wf,
                           Var f_onehot_row, bool enable_messages) {
  const int r = t.rows(x);
  Var y = t.matmul(x, t.transpose(w));
  y = t.add(y, t.bcast_row(b, r));
  if (enable_messages) {
    Var fid_row = t.matmul(f_onehot_row, t.transpose(wf));  // 1 x hidden
    y = t.add(y, t.bcast_row(fid_row, r));
  }
  return y;
}

/// sigmoid(gate branch) * silu(core branch); each branch is one hidden
/// layer of silu units with the fidelity insertion on its first layer.
inline Var gated_mlp(Tape& t, Var x, const BoundGatedMlp& m, Var f_onehot_row,
                     bool enable_messages) {
  const int r = t.rows(x);
  Var hc = t.silu(fidelity_linear(t, x, m.core.w1, m.core.b1, m.core.wf,
                                  f_onehot_row, enable_messages));
  Var core = t.silu(t.add(t.matmul(hc, t.transpose(m.core.w2)), t.bcast_row(m.core.b2, r)));
  Var hg = t.silu(fidelity_linear(t, x, m.gate.w1, m.gate.b1, m.gate.wf,
                                  f_onehot_row, enable_messages));
  Var gate = t.sigmoid(t.add(t.matmul(hg, t.transpose(m.gate.w2)), t.bcast_row(m.gate.b2, r)));
  return t.mul(core, gate);
}

/// Initial atom features: element embedding plus (optionally) the shared
/// fidelity embedding row.
inline Var embed(Tape& t, Var elem_embed, Var fid_embed, int species_idx_list,
                 int n_atoms, int fid_idx_list, bool enable_embedding) {
  Var v = t.gather_rows(elem_embed, species_idx_list);
  if (enable_embedding) {
    Var frow = t.gather_rows(fid_embed, fid_idx_list);  // 1 x d
    v = t.add(v, t.bcast_row(frow, n_atoms));
  }
  return v;
}

/// Residual atom update: per-edge messages from (v_i + v_j + e_ij + f_g),
/// envelope-weighted and summed onto the source atom.
inline Var atom_conv(Tape& t, const GraphWiring& g, Var v, Var e,
                     const BoundGatedMlp& mlp, Var f_onehot,
                     bool enable_messages) {
  const int d = t.cols(v);
  Var x = t.concat_cols({t.gather_rows(v, g.idx_edge_src),
                         t.gather_rows(v, g.idx_edge_dst), e});
  Var msg = gated_mlp(t, x, mlp, f_onehot, enable_messages);
  msg = t.mul(msg, t.bcast_col(g.env_atom, d));
  return t.add(v, t.scatter_rows(msg, g.idx_edge_src, g.n_atoms));
}

/// Residual bond update: per-triplet messages accumulated onto the second
/// member edge; bonds in no triplet pass through unchanged.
inline Var bond_conv(Tape& t, const GraphWiring& g, Var e, Var a, Var v_new,
                     const BoundGatedMlp& mlp, Var f_onehot,
                     bool enable_messages) {
  if (g.n_triplets == 0) return e;
  const int d = t.cols(e);
  Var x = t.concat_cols({t.gather_rows(e, g.idx_trip_e1),
                         t.gather_rows(e, g.idx_trip_e2), a,
                         t.gather_rows(v_new, g.idx_trip_center)});
  Var msg = gated_mlp(t, x, mlp, f_onehot, enable_messages);
  msg = t.mul(msg, t.bcast_col(g.trip_weight, d));
  return t.add(e, t.scatter_rows(msg, g.idx_trip_e2, g.n_edges));
}

/// Replacement angle update from the already-updated bond and atom features.
inline Var angle_update(Tape& t, const GraphWiring& g, Var a, Var e_new,
                        Var v_new, const BoundGatedMlp& mlp, Var f_onehot,
                        bool enable_messages) {
  if (g.n_triplets == 0) return a;
  Var x = t.concat_cols({t.gather_rows(e_new, g.idx_trip_e1),
                         t.gather_rows(e_new, g.idx_trip_e2), a,
                         t.gather_rows(v_new, g.idx_trip_center)});
  return gated_mlp(t, x, mlp, f_onehot, enable_messages);
}

/// Sum of per-atom readout MLP outputs through the head for fidelity f
/// (head 1 when per-fidelity readout is disabled).
inline Var readout_energy(Tape& t, Var v_final,
                          std::span<const Var> head_w1, std::span<const Var> head_b1,
                          std::span<const Var> head_w2, std::span<const Var> head_b2,
                          int f, bool enable_readout) {
  const int head = enable_readout ? f - 1 : 0;
  const int n = t.rows(v_final);
  Var h = t.silu(t.add(t.matmul(v_final, t.transpose(head_w1[head])),
                       t.bcast_row(head_b1[head], n)));
  Var s = t.add(t.matmul(h, t.transpose(head_w2[head])), t.bcast_row(head_b2[head], n));
  return t.sum_all(s);
}

/// Per-atom magnetic moments from penultimate-layer features; the head is
/// shared across fidelities.
inline Var magmom_head(Tape& t, Var v_penultimate, Var w, Var b) {
  const int n = t.rows(v_penultimate);
  return t.add(t.matmul(v_penultimate, t.transpose(w)), t.bcast_row(b, n));
}

/// Composition reference energy in eV/atom for one fidelity column.
inline double composition_energy(const CompositionVector& x, int f,
                                 const ModelParams& p) {
  p.fidelity.check_fidelity(f);
  const int col = p.fidelity.fid_composition ? f - 1 : 0;
  return p.composition.col(col).dot(x.x);
}

struct ForwardResult {
  Var positions;  // leaf, N x 3 (wrapped Cartesian)
  Var strain;     // leaf, 3 x 3, evaluated at zero
  Var energy;     // 1 x 1, eV
  Var forces;     // N x 3, eV/A
  Var stress;     // 3 x 3, eV/A^3
  Var magmoms;    // N x 1, mu_B
  GraphWiring wiring;
};

namespace detail {

inline BoundGatedMlp bound_mlp(const BoundParams& b, const std::string& base) {
  auto branch = [&](const std::string& bb) {
    return BoundBranch{b.find(bb + ".w1"), b.find(bb + ".b1"), b.find(bb + ".wf"),
                       b.find(bb + ".w2"), b.find(bb + ".b2")};
  };
  return BoundGatedMlp{branch(base + ".core"), branch(base + ".gate")};
}

/// Taped radial features with the r_atom envelope applied: E x n_radial.
inline Var taped_radial_features(Tape& t, Var d, Var env, double r_cut, int n) {
  const int n_edges = t.rows(d);
  const double width = n > 1 ? r_cut / (n - 1) : r_cut;
  Mat centers(n_edges, n);
  for (int k = 0; k < n; ++k) centers.col(k).setConstant(k * width);
  Var dd = t.bcast_col(d, n);
  Var tt = t.scale(t.sub(dd, t.constant(std::move(centers))), 1.0 / width);
  Var gauss = t.exp(t.neg(t.mul(tt, tt)));
  return t.mul(gauss, t.bcast_col(env, n));
}

/// Taped Fourier features cos(k*theta) via the Chebyshev recurrence.
inline Var taped_angular_features(Tape& t, Var cos_theta, int n) {
  std::vector<Var> cols;
  cols.reserve(n);
  cols.push_back(t.ones(t.rows(cos_theta), 1));
  if (n > 1) cols.push_back(cos_theta);
  for (int k = 2; k < n; ++k)
    cols.push_back(t.sub(t.scale(t.mul(cos_theta, cols[k - 1]), 2.0), cols[k - 2]));
  return t.concat_cols(std::span<const Var>(cols.data(), cols.size()));
}

}  // namespace detail

/// Record the full model on `t`: energy, derivative-based forces and
/// stress, and magmoms, as functions of position/strain leaves and every
/// parameter leaf in `bound`.
inline ForwardResult forward_model(Tape& t, const CrystalGraph& graph, int f,
                                   const ModelParams& p, const BoundParams& bound) {
  p.dims.validate();
  p.fidelity.check_fidelity(f);
  const auto& edges = graph.atom_graph.edges;
  const auto& trips = graph.bond_graph.triplets;
  const int n_atoms = graph.n_atoms;
  const int n_edges = static_cast<int>(edges.size());
  const int d = p.dims.feature_dim;

  ForwardResult r;
  GraphWiring& g = r.wiring;
  g.n_atoms = n_atoms;
  g.n_edges = n_edges;
  g.n_triplets = static_cast<int>(trips.size());

  // Leaves for geometry.
  Mat pos(n_atoms, 3);
  for (int i = 0; i < n_atoms; ++i)
    pos.row(i) = graph.structure.positions.row(i);
  r.positions = t.leaf(std::move(pos));
  r.strain = t.leaf(Mat::Zero(3, 3));

  // Index lists.
  std::vector<int> src(n_edges), dst(n_edges);
  Mat offsets(std::max(n_edges, 1), 3);
  for (int e = 0; e < n_edges; ++e) {
    src[e] = edges[e].i;
    dst[e] = edges[e].j;
    Eigen::Vector3d off = Eigen::Vector3d::Zero();
    for (int ax = 0; ax < 3; ++ax)
      off += edges[e].image[ax] * graph.structure.lattice.row(ax).transpose();
    offsets.row(e) = off.transpose();
  }
  g.idx_edge_src = t.add_index_list(std::move(src));
  g.idx_edge_dst = t.add_index_list(std::move(dst));
  std::vector<int> t_e1(trips.size()), t_e2(trips.size()), t_c(trips.size());
  for (std::size_t k = 0; k < trips.size(); ++k) {
    t_e1[k] = trips[k].e1;
    t_e2[k] = trips[k].e2;
    t_c[k] = trips[k].center;
  }
  g.idx_trip_e1 = t.add_index_list(std::move(t_e1));
  g.idx_trip_e2 = t.add_index_list(std::move(t_e2));
  g.idx_trip_center = t.add_index_list(std::move(t_c));
  std::vector<int> species_idx(n_atoms);
  for (int i = 0; i < n_atoms; ++i) species_idx[i] = graph.structure.species[i] - 1;
  const int idx_species = t.add_index_list(std::move(species_idx));
  const int idx_fid = t.add_index_list({f - 1});

  // Geometry under symmetric strain: every edge vector u -> u (1 + strain).
  // An edgeless structure (isolated atoms) flows through with empty edge
  // matrices; its energy is embedding readout plus composition only.
  Var strain_map = t.add(t.constant(Mat::Identity(3, 3)), r.strain);
  Var u_raw = t.add(t.sub(t.gather_rows(r.positions, g.idx_edge_dst),
                          t.gather_rows(r.positions, g.idx_edge_src)),
                    t.constant(std::move(offsets)));
  Var u = t.matmul(u_raw, strain_map);
  g.lengths = t.sqrt(t.row_sum(t.mul(u, u)));
  g.env_atom = t.scale_add(t.cos(t.scale(g.lengths, std::numbers::pi / graph.r_atom)), 0.5, 0.5);

  Var f_onehot = t.constant([&] {
    Mat m = Mat::Zero(1, p.fidelity.n_fidelities);
    m(0, f - 1) = 1.0;
    return m;
  }());

  // Initial features.
  Var radial = detail::taped_radial_features(t, g.lengths, g.env_atom,
                                             graph.r_atom, p.dims.n_radial);
  Var e_feat = t.matmul(radial, t.transpose(bound.find("bond_embed")));
  Var v_feat = embed(t, bound.find("elem_embed"), bound.find("fid_embed"),
                     idx_species, n_atoms, idx_fid, p.fidelity.fid_embedding);

  Var a_feat{};
  if (g.n_triplets > 0) {
    Var u1 = t.gather_rows(u, g.idx_trip_e1);
    Var u2 = t.gather_rows(u, g.idx_trip_e2);
    Var dot = t.row_sum(t.mul(u1, u2));
    Var dprod = t.mul(t.gather_rows(g.lengths, g.idx_trip_e1),
                      t.gather_rows(g.lengths, g.idx_trip_e2));
    g.cos_theta = t.mul(dot, t.recip(dprod));
    Var env_bond = t.scale_add(t.cos(t.scale(g.lengths, std::numbers::pi / graph.r_bond)), 0.5, 0.5);
    g.trip_weight = t.mul(t.gather_rows(env_bond, g.idx_trip_e1),
                          t.gather_rows(env_bond, g.idx_trip_e2));
    Var angular = detail::taped_angular_features(t, g.cos_theta, p.dims.n_angular);
    a_feat = t.matmul(angular, t.transpose(bound.find("angle_embed")));
  }

  // Message passing; the last layer updates atoms only.
  Var v_penultimate{};
  for (int l = 0; l < p.dims.n_layers; ++l) {
    const std::string ln = "conv" + std::to_string(l);
    v_feat = atom_conv(t, g, v_feat, e_feat, detail::bound_mlp(bound, ln + ".atom"),
                       f_onehot, p.fidelity.fid_messages);
    if (l < p.dims.n_layers - 1) {
      e_feat = bond_conv(t, g, e_feat, a_feat, v_feat,
                         detail::bound_mlp(bound, ln + ".bond"), f_onehot,
                         p.fidelity.fid_messages);
      if (g.n_triplets > 0)
        a_feat = angle_update(t, g, a_feat, e_feat, v_feat,
                              detail::bound_mlp(bound, ln + ".angle"), f_onehot,
                              p.fidelity.fid_messages);
    }
    if (l == p.dims.n_layers - 2) v_penultimate = v_feat;
  }

  // Readout + composition energy.
  const int nf = p.fidelity.n_fidelities;
  std::vector<Var> hw1, hb1, hw2, hb2;
  for (int hh = 1; hh <= nf; ++hh) {
    const std::string base = "readout" + std::to_string(hh);
    hw1.push_back(bound.find(base + ".w1"));
    hb1.push_back(bound.find(base + ".b1"));
    hw2.push_back(bound.find(base + ".w2"));
    hb2.push_back(bound.find(base + ".b2"));
  }
  Var e_read = readout_energy(t, v_feat, hw1, hb1, hw2, hb2, f, p.fidelity.fid_readout);

  const CompositionVector comp = composition_vector(graph.structure);
  Mat comp_row(1, kNumElements);
  for (int a = 0; a < kNumElements; ++a) comp_row(0, a) = comp.x(a);
  Var e_per_fid = t.matmul(t.constant(std::move(comp_row)), bound.find("composition"));
  Mat pick = Mat::Zero(nf, 1);
  pick(p.fidelity.fid_composition ? f - 1 : 0, 0) = 1.0;
  Var e_comp = t.scale(t.matmul(e_per_fid, t.constant(std::move(pick))),
                       static_cast<double>(n_atoms));

  r.energy = t.add(e_read, e_comp);
  r.magmoms = magmom_head(t, v_penultimate, bound.find("magmom.w"), bound.find("magmom.b"));
  r.forces = t.neg(grad_wrt_positions(t, r.energy, r.positions));
  r.stress = t.scale(grad_wrt_strain(t, r.energy, r.strain),
                     1.0 / graph.structure.volume());
  return r;
}

struct Prediction {
  double energy = 0.0;  // eV per cell
  MatX3 forces;         // eV/A
  Mat3 stress;          // eV/A^3
  VecX magmoms;         // mu_B
};

/// One evaluated frame: tape plus handles, kept together so training can
/// extend the recording with loss terms.
struct ModelEval {
  Tape tape;
  BoundParams bound;
  ForwardResult out;
};

inline ModelEval evaluate_model(const CrystalGraph& graph, int f,
                                const ModelParams& params) {
  ModelEval ev;
  ev.bound = bind_params(ev.tape, params);
  ev.out = forward_model(ev.tape, graph, f, params, ev.bound);
  return ev;
}

inline Prediction extract_prediction(const ModelEval& ev) {
  Prediction pr;
  pr.energy = ev.tape.value(ev.out.energy)(0, 0);
  const Mat& fm = ev.tape.value(ev.out.forces);
  pr.forces.resize(fm.rows(), 3);
  for (Eigen::Index i = 0; i < fm.rows(); ++i) pr.forces.row(i) = fm.row(i);
  const Mat& sm = ev.tape.value(ev.out.stress);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) pr.stress(a, b) = sm(a, b);
  const Mat& mm = ev.tape.value(ev.out.magmoms);
  pr.magmoms = VecX(mm.rows());
  for (Eigen::Index i = 0; i < mm.rows(); ++i) pr.magmoms(i) = mm(i, 0);
  return pr;
}

inline CrystalGraph graph_for_model(const Structure& s, const ModelParams& p,
                                    int fidelity = 1) {
  return build_crystal_graph(s, p.dims.r_atom, p.dims.r_bond, p.dims.n_radial,
                             p.dims.n_angular, fidelity, p.dims.max_images);
}

/// Full prediction for one structure at fidelity f.
inline Prediction predict(const Structure& s, int f, const ModelParams& params) {
  params.fidelity.check_fidelity(f);
  const CrystalGraph graph = graph_for_model(s, params, f);
  return extract_prediction(evaluate_model(graph, f, params));
}

/// Least-squares fit of per-atom reference energies against composition,
/// one column per fidelity, via minimum-norm pseudo-inverse (handles
/// rank-deficient composition matrices). Fits the listed fidelities;
/// others keep zero columns.
inline Mat fit_composition(std::span<const LabeledFrame> frames, int n_fidelities,
                           std::vector<int> fidelities = {}) {
  if (fidelities.empty()) {
    for (const auto& fr : frames)
      if (std::find(fidelities.begin(), fidelities.end(), fr.fidelity) ==
          fidelities.end())
        fidelities.push_back(fr.fidelity);
    std::sort(fidelities.begin(), fidelities.end());
  }
  Mat w = Mat::Zero(kNumElements, n_fidelities);
  for (int f : fidelities) {
    if (f < 1 || f > n_fidelities)
      throw std::invalid_argument("fit_composition: fidelity out of range");
    std::vector<const LabeledFrame*> group;
    for (const auto& fr : frames)
      if (fr.fidelity == f) group.push_back(&fr);
    if (group.empty())
      throw std::invalid_argument("fit_composition: no frames at fidelity " +
                                  std::to_string(f));
    Eigen::MatrixXd a(group.size(), kNumElements);
    Eigen::VectorXd y(group.size());
    for (std::size_t r = 0; r < group.size(); ++r) {
      a.row(r) = composition_vector(group[r]->structure).x.transpose();
      y(r) = group[r]->energy / group[r]->structure.n_atoms();
    }
    Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    w.col(f - 1) = svd.solve(y);
  }
  return w;
}

}  // namespace mflip
