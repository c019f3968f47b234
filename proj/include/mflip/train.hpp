#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mflip/checkpoint.hpp"
#include "mflip/model.hpp"
#include "mflip/structure.hpp"

namespace mflip {

/// Training hyperparameters. Defaults follow the tuned recipe: batch 4,
/// 60 epochs, lr 0.005 with cosine decay, Adam, Huber loss, target
/// weights energy:force:stress:magmom = 1:1:0.1:0.1.
struct TrainConfig {
  int batch_size = 4;
  int epochs = 60;
  double learning_rate = 0.005;
  double huber_delta = 0.1;
  double w_energy = 1.0;
  double w_force = 1.0;
  double w_stress = 0.1;
  double w_magmom = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double val_fraction = 0.1;
  double clip_norm = 0.0;  // global-norm gradient clip; 0 disables
  std::uint64_t seed = 0;
  int n_threads = 0;  // per-batch frame parallelism; 0 = hardware

  ModelDims dims;
  FidelityConfig fidelity;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (w_energy < 0 || w_force < 0 || w_stress < 0 || w_magmom < 0)
      throw std::invalid_argument("target weights must be non-negative");
    if (!(huber_delta > 0)) throw std::invalid_argument("huber_delta must be positive");
    if (val_fraction < 0 || val_fraction >= 1)
      throw std::invalid_argument("val_fraction must be in [0,1)");
    dims.validate();
    fidelity.validate();
  }
};

inline double huber(double residual, double delta) {
  const double a = std::abs(residual);
  return a <= delta ? 0.5 * residual * residual : delta * (a - 0.5 * delta);
}

/// Cosine-annealed learning rate: lr0 at epoch 0, 0 at the last epoch.
inline double cosine_lr(int epoch, int total_epochs, double lr0) {
  if (epoch < 0 || epoch >= total_epochs)
    throw std::invalid_argument("epoch out of range");
  if (total_epochs == 1) return lr0;
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * epoch / (total_epochs - 1)));
}

/// Weighted multi-target Huber loss for one frame. The magmom term is
/// omitted entirely (value and gradient exactly zero) when the label
/// carries no magmoms.
inline double frame_loss(const Prediction& pred, const LabeledFrame& label,
                         const TrainConfig& cfg) {
  const int n = label.structure.n_atoms();
  if (pred.forces.rows() != n)
    throw std::invalid_argument("frame_loss: prediction/label shape mismatch");
  const double de = (pred.energy - label.energy) / n;
  double loss = cfg.w_energy * huber(de, cfg.huber_delta);
  double facc = 0.0;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c)
      facc += huber(pred.forces(i, c) - label.forces(i, c), cfg.huber_delta);
  loss += cfg.w_force * facc / (3.0 * n);
  double sacc = 0.0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      sacc += huber(pred.stress(a, b) - label.stress(a, b), cfg.huber_delta);
  loss += cfg.w_stress * sacc / 9.0;
  if (label.magmoms) {
    if (pred.magmoms.size() != n)
      throw std::invalid_argument("frame_loss: magmom shape mismatch");
    double macc = 0.0;
    for (int i = 0; i < n; ++i)
      macc += huber(pred.magmoms(i) - (*label.magmoms)(i), cfg.huber_delta);
    loss += cfg.w_magmom * macc / n;
  }
  return loss;
}

/// Same loss recorded on the frame's tape, so it can be differentiated
/// w.r.t. the parameter leaves (through the force/stress derivatives).
inline Var taped_frame_loss(Tape& t, const ForwardResult& out,
                            const LabeledFrame& label, const TrainConfig& cfg) {
  const int n = label.structure.n_atoms();
  Mat e_label(1, 1);
  e_label(0, 0) = label.energy;
  Var de = t.scale(t.sub(out.energy, t.constant(std::move(e_label))), 1.0 / n);
  Var loss = t.scale(t.huber(de, cfg.huber_delta), cfg.w_energy);

  Mat f_label(n, 3);
  for (int i = 0; i < n; ++i) f_label.row(i) = label.forces.row(i);
  Var fres = t.huber(t.sub(out.forces, t.constant(std::move(f_label))), cfg.huber_delta);
  loss = t.add(loss, t.scale(t.sum_all(fres), cfg.w_force / (3.0 * n)));

  Mat s_label(3, 3);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) s_label(a, b) = label.stress(a, b);
  Var sres = t.huber(t.sub(out.stress, t.constant(std::move(s_label))), cfg.huber_delta);
  loss = t.add(loss, t.scale(t.sum_all(sres), cfg.w_stress / 9.0));

  if (label.magmoms) {
    Mat m_label(n, 1);
    for (int i = 0; i < n; ++i) m_label(i, 0) = (*label.magmoms)(i);
    Var mres = t.huber(t.sub(out.magmoms, t.constant(std::move(m_label))), cfg.huber_delta);
    loss = t.add(loss, t.scale(t.sum_all(mres), cfg.w_magmom / n));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

inline std::vector<Mat*> tensor_ptrs(ModelParams& p) {
  std::vector<Mat*> out;
  for_each_tensor(p, [&](const std::string&, Mat& m) { out.push_back(&m); });
  return out;
}

inline std::vector<std::string> tensor_names(const ModelParams& p) {
  std::vector<std::string> out;
  for_each_tensor(p, [&](const std::string& n, const Mat&) { out.push_back(n); });
  return out;
}

struct AdamState {
  std::vector<Mat> m, v;
  long step = 0;

  static AdamState like(const ModelParams& p) {
    AdamState st;
    for_each_tensor(p, [&](const std::string&, const Mat& w) {
      st.m.push_back(Mat::Zero(w.rows(), w.cols()));
      st.v.push_back(Mat::Zero(w.rows(), w.cols()));
    });
    return st;
  }
};

/// One bias-corrected Adam update. Tensors whose trainable flag is false
/// are left untouched (their moments stay zero as well).
inline void adam_step(ModelParams& params, const std::vector<Mat>& grads,
                      AdamState& st, double lr, const TrainConfig& cfg,
                      const std::vector<char>& trainable) {
  auto tensors = tensor_ptrs(params);
  const auto names = tensor_names(params);
  if (grads.size() != tensors.size() || trainable.size() != tensors.size())
    throw std::invalid_argument("adam_step: gradient list shape mismatch");
  st.step += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    if (!trainable[k]) continue;
    const Mat& g = grads[k];
    if (!g.allFinite())
      throw std::runtime_error("non-finite gradient for parameter " + names[k]);
    st.m[k] = b1 * st.m[k] + (1.0 - b1) * g;
    st.v[k] = b2 * st.v[k] + (1.0 - b2) * g.cwiseProduct(g);
    const Mat mhat = st.m[k] / bc1;
    const Mat vhat = st.v[k] / bc2;
    *tensors[k] -= lr * (mhat.array() / (vhat.array().sqrt() + cfg.adam_eps)).matrix();
  }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct LabelStats {
  double mae = 0.0;
  double rmse = 0.0;
  long count = 0;
  bool present() const { return count > 0; }
};

struct MetricsBlock {
  LabelStats energy;  // eV/atom
  LabelStats force;   // eV/A per component
  LabelStats stress;  // eV/A^3 per component
  LabelStats magmom;  // mu_B per atom
};

struct Metrics {
  MetricsBlock overall;
  std::map<int, MetricsBlock> per_fidelity;
};

namespace detail {

struct StatAcc {
  double abs_sum = 0.0, sq_sum = 0.0;
  long n = 0;
  void add(double r) {
    abs_sum += std::abs(r);
    sq_sum += r * r;
    n += 1;
  }
  LabelStats finish() const {
    LabelStats s;
    s.count = n;
    if (n > 0) {
      s.mae = abs_sum / n;
      s.rmse = std::sqrt(sq_sum / n);
    }
    return s;
  }
};

struct BlockAcc {
  StatAcc energy, force, stress, magmom;
  void add_frame(const Prediction& pred, const LabeledFrame& fr) {
    const int n = fr.structure.n_atoms();
    energy.add((pred.energy - fr.energy) / n);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) force.add(pred.forces(i, c) - fr.forces(i, c));
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) stress.add(pred.stress(a, b) - fr.stress(a, b));
    if (fr.magmoms)
      for (int i = 0; i < n; ++i) magmom.add(pred.magmoms(i) - (*fr.magmoms)(i));
  }
  MetricsBlock finish() const {
    return {energy.finish(), force.finish(), stress.finish(), magmom.finish()};
  }
};

}  // namespace detail

/// MAE/RMSE per label, overall and per fidelity. Magmom metrics only
/// cover frames that carry magmom labels.
inline Metrics evaluate(const ModelParams& params,
                        std::span<const LabeledFrame> frames) {
  if (frames.empty()) throw std::invalid_argument("evaluate: no frames");
  detail::BlockAcc overall;
  std::map<int, detail::BlockAcc> per_fid;
  for (const auto& fr : frames) {
    const Prediction pred = predict(fr.structure, fr.fidelity, params);
    overall.add_frame(pred, fr);
    per_fid[fr.fidelity].add_frame(pred, fr);
  }
  Metrics m;
  m.overall = overall.finish();
  for (auto& [f, acc] : per_fid) m.per_fidelity[f] = acc.finish();
  return m;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  Metrics train;
  Metrics val;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochRecord> history;
  double final_train_loss = 0.0;
};

struct TrainOptions {
  bool epoch_metrics = false;           // evaluate train/val each epoch
  std::optional<std::filesystem::path> checkpoint_path;
  std::function<bool(const std::string&)> frozen;  // tensor name -> freeze?
  std::optional<ModelParams> initial_params;       // resume / fine-tune
  bool fit_composition_weights = true;
};

namespace detail {

struct FrameGrad {
  double loss = 0.0;
  std::vector<Mat> grads;
};

/// Forward + loss + full parameter gradient for one frame at the current
/// parameter values. Self-contained; safe to run concurrently.
inline FrameGrad frame_gradients(const CrystalGraph& graph,
                                 const LabeledFrame& fr,
                                 const ModelParams& params,
                                 const TrainConfig& cfg) {
  ModelEval ev;
  ev.bound = bind_params(ev.tape, params);
  ev.out = forward_model(ev.tape, graph, fr.fidelity, params, ev.bound);
  Var loss = taped_frame_loss(ev.tape, ev.out, fr, cfg);
  auto grads = grad_loss_wrt_params(ev.tape, loss,
                                    std::span<const Var>(ev.bound.leaves));
  FrameGrad out;
  out.loss = ev.tape.value(loss)(0, 0);
  out.grads.reserve(grads.size());
  for (Var g : grads) out.grads.push_back(ev.tape.value(g));
  return out;
}

}  // namespace detail

/// Core mini-batch loop. Composition weights are fit up front (unless an
/// initial parameter set disables it) and are never gradient-updated.
inline TrainResult train(std::vector<LabeledFrame> frames, TrainConfig cfg,
                         TrainOptions options = {}) {
  cfg.validate();
  if (frames.empty()) throw std::invalid_argument("train: no frames");
  for (const auto& fr : frames) fr.validate(cfg.fidelity.n_fidelities);

  std::vector<LabeledFrame> train_frames, val_frames;
  if (cfg.val_fraction > 0.0) {
    auto [tr, va] = split_dataset(frames, cfg.val_fraction, cfg.seed ^ 0x5eedULL);
    train_frames = std::move(tr);
    val_frames = std::move(va);
  } else {
    train_frames = std::move(frames);
  }
  if (train_frames.empty()) throw std::invalid_argument("train: empty train split");

  ModelParams params = options.initial_params
                           ? *options.initial_params
                           : init_params(cfg.dims, cfg.fidelity, cfg.seed);
  if (options.fit_composition_weights)
    params.composition =
        fit_composition(train_frames, cfg.fidelity.n_fidelities);

  const auto names = tensor_names(params);
  std::vector<char> trainable(names.size(), 1);
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (names[k] == "composition") trainable[k] = 0;
    if (options.frozen && options.frozen(names[k])) trainable[k] = 0;
  }

  // Graphs are pure geometry; build once and reuse across epochs.
  std::vector<CrystalGraph> graphs;
  graphs.reserve(train_frames.size());
  for (const auto& fr : train_frames)
    graphs.push_back(graph_for_model(fr.structure, params, fr.fidelity));

  AdamState state = AdamState::like(params);
  Rng shuffle_rng(cfg.seed ^ 0xba7c4ULL);
  const int n_threads = cfg.n_threads > 0
                            ? cfg.n_threads
                            : std::max(1u, std::thread::hardware_concurrency());

  TrainResult result;
  std::vector<std::size_t> order(train_frames.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.learning_rate);
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size, ++n_batches) {
      const std::size_t bsz =
          std::min<std::size_t>(cfg.batch_size, order.size() - at);

      std::vector<detail::FrameGrad> parts(bsz);
      const int workers = std::min<int>(n_threads, static_cast<int>(bsz));
      if (workers > 1) {
        std::vector<std::future<detail::FrameGrad>> futs;
        futs.reserve(bsz);
        for (std::size_t k = 0; k < bsz; ++k) {
          const std::size_t fi = order[at + k];
          futs.push_back(std::async(std::launch::async, [&, fi] {
            return detail::frame_gradients(graphs[fi], train_frames[fi], params, cfg);
          }));
        }
        for (std::size_t k = 0; k < bsz; ++k) parts[k] = futs[k].get();
      } else {
        for (std::size_t k = 0; k < bsz; ++k) {
          const std::size_t fi = order[at + k];
          parts[k] = detail::frame_gradients(graphs[fi], train_frames[fi], params, cfg);
        }
      }

      double batch_loss = 0.0;
      std::vector<Mat> grads = std::move(parts[0].grads);
      batch_loss += parts[0].loss;
      for (std::size_t k = 1; k < bsz; ++k) {
        batch_loss += parts[k].loss;
        for (std::size_t g = 0; g < grads.size(); ++g)
          grads[g] += parts[k].grads[g];
      }
      batch_loss /= static_cast<double>(bsz);
      for (auto& g : grads) g /= static_cast<double>(bsz);
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("non-finite loss in epoch " +
                                 std::to_string(epoch) + ", batch " +
                                 std::to_string(n_batches));

      if (cfg.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads) sq += g.squaredNorm();
        const double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm)
          for (auto& g : grads) g *= cfg.clip_norm / norm;
      }
      adam_step(params, grads, state, lr, cfg, trainable);
      epoch_loss += batch_loss;
    }
    result.final_train_loss = epoch_loss / std::max<std::size_t>(1, n_batches);

    if (options.epoch_metrics) {
      EpochRecord rec;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.train = evaluate(params, train_frames);
      if (!val_frames.empty()) rec.val = evaluate(params, val_frames);
      result.history.push_back(std::move(rec));
    }
    if (options.checkpoint_path && (epoch + 1) % 10 == 0)
      save_checkpoint(params, *options.checkpoint_path);
  }
  if (options.checkpoint_path) save_checkpoint(params, *options.checkpoint_path);
  result.params = std::move(params);
  return result;
}

/// Retag every frame to the given fidelity (used when training a
/// single-fidelity model on data tagged otherwise).
inline std::vector<LabeledFrame> retag_fidelity(std::vector<LabeledFrame> frames,
                                                int fidelity) {
  for (auto& fr : frames) fr.fidelity = fidelity;
  return frames;
}

inline bool is_feature_extractor_tensor(const std::string& name) {
  return name == "elem_embed" || name == "fid_embed" || name == "bond_embed" ||
         name == "angle_embed" || name.rfind("conv", 0) == 0;
}

struct TransferResult {
  ModelParams params;
  std::vector<std::string> frozen_tensors;
};

/// Two-stage transfer baseline: pretrain a single-fidelity model on the
/// low-fidelity set, then freeze the embedding and convolution stacks and
/// fine-tune the readout and magmom head on the high-fidelity set (with
/// composition refit there).
inline TransferResult transfer_train(const std::vector<LabeledFrame>& lf_frames,
                                     const std::vector<LabeledFrame>& hf_frames,
                                     TrainConfig cfg) {
  if (lf_frames.empty() || hf_frames.empty())
    throw std::invalid_argument("transfer_train: both frame sets required");
  cfg.fidelity = FidelityConfig::single_fidelity();

  TrainConfig stage1 = cfg;
  TrainResult pre = train(retag_fidelity(lf_frames, 1), stage1);

  TrainConfig stage2 = cfg;
  stage2.seed = cfg.seed ^ 0x7ea2ULL;
  TrainOptions opt;
  opt.frozen = is_feature_extractor_tensor;
  ModelParams init = std::move(pre.params);
  init.composition = fit_composition(retag_fidelity(hf_frames, 1), 1);
  opt.initial_params = std::move(init);
  opt.fit_composition_weights = false;
  TrainResult fin = train(retag_fidelity(hf_frames, 1), stage2, opt);

  TransferResult out;
  out.params = std::move(fin.params);
  for (const auto& n : tensor_names(out.params))
    if (is_feature_extractor_tensor(n)) out.frozen_tensors.push_back(n);
  return out;
}

}  // namespace mflip
