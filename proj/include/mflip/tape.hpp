#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mflip {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Define-by-run reverse-mode tape over dense real matrices.
///
/// Ops execute eagerly and record enough to (a) replay the forward pass
/// bit-exactly via recompute(), and (b) emit the adjoint computation of any
/// recorded scalar as further tape ops. Because the adjoint pass is itself
/// made of recorded ops, gradients can be taken through gradients: grad()
/// on a loss that contains a previous grad() result yields exact
/// second-order derivatives.
class Tape {
 public:
  enum class Op {
    kLeaf,
    kConstant,
    kAdd,
    kSub,
    kMul,        // elementwise
    kScaleAdd,   // a*x + b, a = s0, b = s1
    kMatMul,
    kTranspose,
    kSigmoid,
    kExp,
    kSin,
    kCos,
    kSqrt,
    kRecip,
    kHuber,      // elementwise, delta = s0
    kClamp,      // lo = s0, hi = s1
    kSumAll,     // -> 1x1
    kRowSum,     // -> r x 1
    kColSum,     // -> 1 x c
    kBcastCol,   // r x 1 -> r x c, c = s0
    kBcastRow,   // 1 x c -> r x c, r = s0
    kBcastScalar,// 1 x 1 -> r x c, r = s0, c = s1
    kGatherRows, // rows picked by index list
    kScatterRows,// rows accumulated into s0 output rows by index list
    kConcatCols,
    kSliceCols,  // begin = s0, len = s1
    kPadCols,    // place into zero matrix: begin = s0, total = s1
  };

  int size() const { return static_cast<int>(nodes_.size()); }

  const Mat& value(Var v) const { return nodes_.at(check(v)).val; }

  bool is_leaf(Var v) const { return nodes_.at(check(v)).op == Op::kLeaf; }

  int rows(Var v) const { return static_cast<int>(value(v).rows()); }
  int cols(Var v) const { return static_cast<int>(value(v).cols()); }

  /// Register an index list shared by gather/scatter nodes.
  int add_index_list(std::vector<int> idx) {
    index_lists_.push_back(std::move(idx));
    return static_cast<int>(index_lists_.size()) - 1;
  }

  const std::vector<int>& index_list(int id) const { return index_lists_.at(id); }

  Var leaf(Mat m) { return push(Op::kLeaf, -1, -1, std::move(m)); }

  Var constant(Mat m) { return push(Op::kConstant, -1, -1, std::move(m)); }

  Var constant_scalar(double x) {
    Mat m(1, 1);
    m(0, 0) = x;
    return constant(std::move(m));
  }

  Var zeros(int r, int c) { return constant(Mat::Zero(r, c)); }
  Var ones(int r, int c) { return constant(Mat::Ones(r, c)); }

  /// Overwrite a leaf's value; recompute() propagates the change.
  void set_leaf_value(Var v, Mat m) {
    Node& n = nodes_.at(check(v));
    if (n.op != Op::kLeaf) throw std::invalid_argument("set_leaf_value: not a leaf");
    if (m.rows() != n.val.rows() || m.cols() != n.val.cols())
      throw std::invalid_argument("set_leaf_value: shape mismatch");
    n.val = std::move(m);
  }

  Var add(Var a, Var b) {
    require_same_shape(a, b, "add");
    return push(Op::kAdd, a.id, b.id, value(a) + value(b));
  }

  Var sub(Var a, Var b) {
    require_same_shape(a, b, "sub");
    return push(Op::kSub, a.id, b.id, value(a) - value(b));
  }

  Var mul(Var a, Var b) {
    require_same_shape(a, b, "mul");
    return push(Op::kMul, a.id, b.id, value(a).cwiseProduct(value(b)));
  }

  Var scale_add(Var a, double s, double offset = 0.0) {
    Node n(Op::kScaleAdd, a.id, -1, (value(a).array() * s + offset).matrix());
    n.s0 = s;
    n.s1 = offset;
    return push(std::move(n));
  }

  Var scale(Var a, double s) { return scale_add(a, s, 0.0); }
  Var neg(Var a) { return scale_add(a, -1.0, 0.0); }

  Var matmul(Var a, Var b) {
    if (cols(a) != rows(b))
      throw std::invalid_argument("matmul: inner dimensions differ");
    Mat out(rows(a), cols(b));
    out.noalias() = value(a) * value(b);
    return push(Op::kMatMul, a.id, b.id, std::move(out));
  }

  Var transpose(Var a) {
    return push(Op::kTranspose, a.id, -1, value(a).transpose());
  }

  Var sigmoid(Var a) {
    return push(Op::kSigmoid, a.id, -1,
                (1.0 / (1.0 + (-value(a).array()).exp())).matrix());
  }

  Var exp(Var a) { return push(Op::kExp, a.id, -1, value(a).array().exp().matrix()); }
  Var sin(Var a) { return push(Op::kSin, a.id, -1, value(a).array().sin().matrix()); }
  Var cos(Var a) { return push(Op::kCos, a.id, -1, value(a).array().cos().matrix()); }
  Var sqrt(Var a) { return push(Op::kSqrt, a.id, -1, value(a).array().sqrt().matrix()); }
  Var recip(Var a) { return push(Op::kRecip, a.id, -1, value(a).array().inverse().matrix()); }

  /// x * sigmoid(x), the smooth activation used by the gated MLPs.
  Var silu(Var a) { return mul(a, sigmoid(a)); }

  Var huber(Var a, double delta) {
    if (!(delta > 0.0)) throw std::invalid_argument("huber: delta must be positive");
    Node n(Op::kHuber, a.id, -1, huber_eval(value(a), delta));
    n.s0 = delta;
    return push(std::move(n));
  }

  Var clamp(Var a, double lo, double hi) {
    Node n(Op::kClamp, a.id, -1,
           value(a).array().max(lo).min(hi).matrix());
    n.s0 = lo;
    n.s1 = hi;
    return push(std::move(n));
  }

  Var sum_all(Var a) {
    Mat m(1, 1);
    m(0, 0) = value(a).sum();
    return push(Op::kSumAll, a.id, -1, std::move(m));
  }

  Var row_sum(Var a) {
    return push(Op::kRowSum, a.id, -1, value(a).rowwise().sum());
  }

  Var col_sum(Var a) {
    return push(Op::kColSum, a.id, -1, value(a).colwise().sum());
  }

  Var bcast_col(Var a, int n_cols) {
    if (cols(a) != 1) throw std::invalid_argument("bcast_col: input must be r x 1");
    Node n(Op::kBcastCol, a.id, -1, value(a).replicate(1, n_cols));
    n.s0 = n_cols;
    return push(std::move(n));
  }

  Var bcast_row(Var a, int n_rows) {
    if (rows(a) != 1) throw std::invalid_argument("bcast_row: input must be 1 x c");
    Node n(Op::kBcastRow, a.id, -1, value(a).replicate(n_rows, 1));
    n.s0 = n_rows;
    return push(std::move(n));
  }

  Var bcast_scalar(Var a, int r, int c) {
    if (rows(a) != 1 || cols(a) != 1)
      throw std::invalid_argument("bcast_scalar: input must be 1 x 1");
    Node n(Op::kBcastScalar, a.id, -1, Mat::Constant(r, c, value(a)(0, 0)));
    n.s0 = r;
    n.s1 = c;
    return push(std::move(n));
  }

  Var gather_rows(Var a, int idx_id) {
    const auto& idx = index_list(idx_id);
    const Mat& src = value(a);
    Mat out(static_cast<Eigen::Index>(idx.size()), src.cols());
    for (std::size_t t = 0; t < idx.size(); ++t) out.row(t) = src.row(idx[t]);
    Node n(Op::kGatherRows, a.id, -1, std::move(out));
    n.list_id = idx_id;
    return push(std::move(n));
  }

  Var scatter_rows(Var a, int idx_id, int n_out_rows) {
    const auto& idx = index_list(idx_id);
    if (static_cast<Eigen::Index>(idx.size()) != value(a).rows())
      throw std::invalid_argument("scatter_rows: index list length mismatch");
    Mat out = Mat::Zero(n_out_rows, value(a).cols());
    const Mat& src = value(a);
    for (std::size_t t = 0; t < idx.size(); ++t) out.row(idx[t]) += src.row(t);
    Node n(Op::kScatterRows, a.id, -1, std::move(out));
    n.list_id = idx_id;
    n.s0 = n_out_rows;
    return push(std::move(n));
  }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int r = rows(parts[0]);
    int total = 0;
    for (Var p : parts) {
      if (rows(p) != r) throw std::invalid_argument("concat_cols: row mismatch");
      total += cols(p);
    }
    Mat out(r, total);
    int at = 0;
    std::vector<int> in_ids;
    in_ids.reserve(parts.size());
    for (Var p : parts) {
      out.middleCols(at, cols(p)) = value(p);
      at += cols(p);
      in_ids.push_back(p.id);
    }
    Node n(Op::kConcatCols, -1, -1, std::move(out));
    n.list_id = add_index_list(std::move(in_ids));
    return push(std::move(n));
  }

  Var concat_cols(std::initializer_list<Var> parts) {
    return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
  }

  Var slice_cols(Var a, int begin, int len) {
    if (begin < 0 || len < 0 || begin + len > cols(a))
      throw std::invalid_argument("slice_cols: range out of bounds");
    Node n(Op::kSliceCols, a.id, -1, value(a).middleCols(begin, len));
    n.s0 = begin;
    n.s1 = len;
    return push(std::move(n));
  }

  Var pad_cols(Var a, int begin, int total) {
    if (begin < 0 || begin + cols(a) > total)
      throw std::invalid_argument("pad_cols: range out of bounds");
    Mat out = Mat::Zero(rows(a), total);
    out.middleCols(begin, cols(a)) = value(a);
    Node n(Op::kPadCols, a.id, -1, std::move(out));
    n.s0 = begin;
    n.s1 = total;
    return push(std::move(n));
  }

  /// Emit the adjoint computation of a recorded scalar with respect to the
  /// given leaves, as further tape ops. Returns one gradient Var per leaf
  /// (zero constants for leaves the scalar does not depend on). May be
  /// called repeatedly; later calls differentiate through earlier ones.
  std::vector<Var> grad(Var target, std::span<const Var> wrt) {
    const Node& tn = nodes_.at(check(target));
    if (tn.val.rows() != 1 || tn.val.cols() != 1)
      throw std::invalid_argument("grad: target must be a 1x1 scalar");
    const int snapshot = size();
    for (Var w : wrt)
      if (!is_leaf(w))
        throw std::invalid_argument("grad: wrt variable is not a tape leaf");

    // Active = on a path from some wrt leaf to the target.
    std::vector<char> active(snapshot, 0);
    for (Var w : wrt)
      if (w.id <= target.id) active[w.id] = 1;
    for (int id = 0; id <= target.id; ++id) {
      if (active[id]) continue;
      const Node& n = nodes_[id];
      bool a = (n.a >= 0 && active[n.a]) || (n.b >= 0 && active[n.b]);
      if (!a && n.op == Op::kConcatCols)
        for (int in : index_list(n.list_id)) a = a || active[in];
      active[id] = a ? 1 : 0;
    }
    if (!active[target.id]) {
      std::vector<Var> out;
      out.reserve(wrt.size());
      for (Var w : wrt) out.push_back(zeros(rows(w), cols(w)));
      return out;
    }

    std::vector<Var> adj(snapshot, Var{});
    adj[target.id] = ones(1, 1);
    for (int id = target.id; id >= 0; --id) {
      if (!adj[id].valid() || !active[id]) continue;
      emit_vjp(id, adj[id], adj, active);
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (Var w : wrt)
      out.push_back(w.id < snapshot && adj[w.id].valid()
                        ? adj[w.id]
                        : zeros(rows(w), cols(w)));
    return out;
  }

  std::vector<Var> grad(Var target, std::initializer_list<Var> wrt) {
    return grad(target, std::span<const Var>(wrt.begin(), wrt.size()));
  }

  /// Re-execute every recorded op in order from current leaf/constant
  /// values. With unchanged leaves this reproduces all values bit-exactly.
  void recompute() {
    for (int id = 0; id < size(); ++id) recompute_node(id);
  }

 private:
  struct Node {
    Node(Op o, int ain, int bin, Mat v) : op(o), a(ain), b(bin), val(std::move(v)) {}
    Op op;
    int a = -1;
    int b = -1;
    int list_id = -1;
    double s0 = 0.0;
    double s1 = 0.0;
    Mat val;
  };

  static Mat huber_eval(const Mat& x, double delta) {
    Mat out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double r = x.data()[i];
      const double a = std::abs(r);
      out.data()[i] = a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
    }
    return out;
  }

  int check(Var v) const {
    if (v.id < 0 || v.id >= size()) throw std::invalid_argument("invalid Var");
    return v.id;
  }

  Var push(Op op, int a, int b, Mat v) { return push(Node(op, a, b, std::move(v))); }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void require_same_shape(Var a, Var b, const char* what) const {
    if (rows(a) != rows(b) || cols(a) != cols(b))
      throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }

  void accumulate(std::vector<Var>& adj, int id, Var term) {
    adj[id] = adj[id].valid() ? add(adj[id], term) : term;
  }

  // Plain-data view of a node; safe to hold across push() reallocation.
  struct NodeMeta {
    Op op;
    int a, b, list_id;
    double s0, s1;
  };

  void emit_vjp(int id, Var g, std::vector<Var>& adj, const std::vector<char>& active) {
    const NodeMeta n{nodes_[id].op, nodes_[id].a, nodes_[id].b,
                     nodes_[id].list_id, nodes_[id].s0, nodes_[id].s1};
    const bool act_a = n.a >= 0 && active[n.a];
    const bool act_b = n.b >= 0 && active[n.b];
    const Var va{n.a}, vb{n.b};
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd:
        if (act_a) accumulate(adj, n.a, g);
        if (act_b) accumulate(adj, n.b, g);
        break;
      case Op::kSub:
        if (act_a) accumulate(adj, n.a, g);
        if (act_b) accumulate(adj, n.b, neg(g));
        break;
      case Op::kMul:
        if (act_a) accumulate(adj, n.a, mul(g, vb));
        if (act_b) accumulate(adj, n.b, mul(g, va));
        break;
      case Op::kScaleAdd:
        if (act_a) accumulate(adj, n.a, scale(g, n.s0));
        break;
      case Op::kMatMul:
        if (act_a) accumulate(adj, n.a, matmul(g, transpose(vb)));
        if (act_b) accumulate(adj, n.b, matmul(transpose(va), g));
        break;
      case Op::kTranspose:
        if (act_a) accumulate(adj, n.a, transpose(g));
        break;
      case Op::kSigmoid:
        if (act_a) {
          const Var y{id};
          accumulate(adj, n.a, mul(mul(g, y), scale_add(y, -1.0, 1.0)));
        }
        break;
      case Op::kExp:
        if (act_a) accumulate(adj, n.a, mul(g, Var{id}));
        break;
      case Op::kSin:
        if (act_a) accumulate(adj, n.a, mul(g, cos(va)));
        break;
      case Op::kCos:
        if (act_a) accumulate(adj, n.a, neg(mul(g, sin(va))));
        break;
      case Op::kSqrt:
        if (act_a) accumulate(adj, n.a, scale(mul(g, recip(Var{id})), 0.5));
        break;
      case Op::kRecip:
        if (act_a) {
          const Var y{id};
          accumulate(adj, n.a, neg(mul(g, mul(y, y))));
        }
        break;
      case Op::kHuber:
        if (act_a) accumulate(adj, n.a, mul(g, clamp(va, -n.s0, n.s0)));
        break;
      case Op::kClamp:
        if (act_a) {
          const Mat& x = value(va);
          Mat mask(x.rows(), x.cols());
          for (Eigen::Index i = 0; i < x.size(); ++i)
            mask.data()[i] =
                (x.data()[i] > n.s0 && x.data()[i] < n.s1) ? 1.0 : 0.0;
          accumulate(adj, n.a, mul(g, constant(std::move(mask))));
        }
        break;
      case Op::kSumAll:
        if (act_a) accumulate(adj, n.a, bcast_scalar(g, rows(va), cols(va)));
        break;
      case Op::kRowSum:
        if (act_a) accumulate(adj, n.a, bcast_col(g, cols(va)));
        break;
      case Op::kColSum:
        if (act_a) accumulate(adj, n.a, bcast_row(g, rows(va)));
        break;
      case Op::kBcastCol:
        if (act_a) accumulate(adj, n.a, row_sum(g));
        break;
      case Op::kBcastRow:
        if (act_a) accumulate(adj, n.a, col_sum(g));
        break;
      case Op::kBcastScalar:
        if (act_a) accumulate(adj, n.a, sum_all(g));
        break;
      case Op::kGatherRows:
        if (act_a) accumulate(adj, n.a, scatter_rows(g, n.list_id, rows(va)));
        break;
      case Op::kScatterRows:
        if (act_a) accumulate(adj, n.a, gather_rows(g, n.list_id));
        break;
      case Op::kConcatCols: {
        int at = 0;
        for (int in : index_list(n.list_id)) {
          const int w = cols(Var{in});
          if (active[in]) accumulate(adj, in, slice_cols(g, at, w));
          at += w;
        }
        break;
      }
      case Op::kSliceCols:
        if (act_a)
          accumulate(adj, n.a,
                     pad_cols(g, static_cast<int>(n.s0), cols(va)));
        break;
      case Op::kPadCols:
        if (act_a)
          accumulate(adj, n.a,
                     slice_cols(g, static_cast<int>(n.s0), cols(va)));
        break;
    }
  }

  void recompute_node(int id) {
    Node& n = nodes_[id];
    const auto val = [&](int i) -> const Mat& { return nodes_[i].val; };
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd: n.val = val(n.a) + val(n.b); break;
      case Op::kSub: n.val = val(n.a) - val(n.b); break;
      case Op::kMul: n.val = val(n.a).cwiseProduct(val(n.b)); break;
      case Op::kScaleAdd: n.val = (val(n.a).array() * n.s0 + n.s1).matrix(); break;
      case Op::kMatMul: n.val.noalias() = val(n.a) * val(n.b); break;
      case Op::kTranspose: n.val = val(n.a).transpose(); break;
      case Op::kSigmoid: n.val = (1.0 / (1.0 + (-val(n.a).array()).exp())).matrix(); break;
      case Op::kExp: n.val = val(n.a).array().exp().matrix(); break;
      case Op::kSin: n.val = val(n.a).array().sin().matrix(); break;
      case Op::kCos: n.val = val(n.a).array().cos().matrix(); break;
      case Op::kSqrt: n.val = val(n.a).array().sqrt().matrix(); break;
      case Op::kRecip: n.val = val(n.a).array().inverse().matrix(); break;
      case Op::kHuber: n.val = huber_eval(val(n.a), n.s0); break;
      case Op::kClamp: n.val = val(n.a).array().max(n.s0).min(n.s1).matrix(); break;
      case Op::kSumAll: n.val(0, 0) = val(n.a).sum(); break;
      case Op::kRowSum: n.val = val(n.a).rowwise().sum(); break;
      case Op::kColSum: n.val = val(n.a).colwise().sum(); break;
      case Op::kBcastCol: n.val = val(n.a).replicate(1, static_cast<int>(n.s0)); break;
      case Op::kBcastRow: n.val = val(n.a).replicate(static_cast<int>(n.s0), 1); break;
      case Op::kBcastScalar:
        n.val = Mat::Constant(static_cast<int>(n.s0), static_cast<int>(n.s1),
                              val(n.a)(0, 0));
        break;
      case Op::kGatherRows: {
        const auto& idx = index_list(n.list_id);
        for (std::size_t t = 0; t < idx.size(); ++t)
          n.val.row(t) = val(n.a).row(idx[t]);
        break;
      }
      case Op::kScatterRows: {
        const auto& idx = index_list(n.list_id);
        n.val.setZero();
        for (std::size_t t = 0; t < idx.size(); ++t)
          n.val.row(idx[t]) += val(n.a).row(t);
        break;
      }
      case Op::kConcatCols: {
        int at = 0;
        for (int in : index_list(n.list_id)) {
          n.val.middleCols(at, val(in).cols()) = val(in);
          at += val(in).cols();
        }
        break;
      }
      case Op::kSliceCols:
        n.val = val(n.a).middleCols(static_cast<int>(n.s0), static_cast<int>(n.s1));
        break;
      case Op::kPadCols:
        n.val.setZero();
        n.val.middleCols(static_cast<int>(n.s0), val(n.a).cols()) = val(n.a);
        break;
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<int>> index_lists_;
};

/// Exact dE/dpositions of a recorded scalar energy (N x 3).
inline Var grad_wrt_positions(Tape& t, Var energy, Var positions) {
  return t.grad(energy, {positions})[0];
}

/// Exact dE/dstrain at the recorded strain leaf, symmetrized over the six
/// independent components.
inline Var grad_wrt_strain(Tape& t, Var energy, Var strain) {
  Var g = t.grad(energy, {strain})[0];
  return t.scale(t.add(g, t.transpose(g)), 0.5);
}

/// Exact dloss/dparam for every parameter leaf, including through any
/// embedded grad() results the loss contains.
inline std::vector<Var> grad_loss_wrt_params(Tape& t, Var loss,
                                             std::span<const Var> params) {
  return t.grad(loss, params);
}

}  // namespace mflip
