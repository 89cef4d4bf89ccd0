#pragma once
// Desk-scale model compression: structured filter pruning, projection of the
// network onto principal activation subspaces, power-of-two quantization, and
// the three-step candidate selection that picks the deployable model.

#include <Eigen/Dense>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "dsd/train.hpp"

namespace dsd {

// ---- layout detection ------------------------------------------------------

// Indices of the learnable layers in the dense topology: N convs then one fc.
struct DenseLayout {
  std::vector<int> conv;
  int fc = -1;
};

inline DenseLayout dense_layout(const NetworkModel& m) {
  DenseLayout lo;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    if (const auto* c = std::get_if<Conv1D>(&m.layers[i])) {
      if (c->pointwise() || lo.fc >= 0)
        throw std::invalid_argument("dense_layout: layer " + std::to_string(i) +
                                    " is not part of a conv..fc topology");
      lo.conv.push_back(int(i));
    } else if (std::get_if<FullyConnected>(&m.layers[i])) {
      if (lo.fc >= 0)
        throw std::invalid_argument("dense_layout: multiple fc layers");
      lo.fc = int(i);
    }
  }
  if (lo.conv.empty() || lo.fc < 0)
    throw std::invalid_argument("dense_layout: expected convs followed by one fc");
  return lo;
}

// ---- structured pruning ----------------------------------------------------

struct PruneConfig {
  int max_iters = 30;
  double prune_fraction = 0.2;    // fraction of live filters removed per layer per iter
  int min_filters = 1;
  double accuracy_floor = 0.99;   // stop once validation accuracy falls below
  TrainConfig fine_tune;          // short schedule between removals

  PruneConfig() {
    fine_tune.initial_lr = 2e-3;
    fine_tune.max_epochs = 12;
    fine_tune.patience = 1000;
    fine_tune.lr_drop_period = 1000;
    fine_tune.l2 = 1e-4;
    fine_tune.batch_size = 128;
  }
};

struct PruneStep {
  int iter = 0;
  NetworkModel model;
  std::vector<int> channels;      // surviving filters per conv layer
  int64_t learnables = 0;
  double val_acc = 0;
  std::string note;
};

namespace detail {

inline std::vector<double> filter_l1(const Conv1D& c) {
  std::vector<double> norm(size_t(c.out_ch), 0.0);
  for (int t = 0; t < c.kernel; ++t)
    for (int ci = 0; ci < c.in_ch; ++ci)
      for (int co = 0; co < c.out_ch; ++co)
        norm[size_t(co)] += std::fabs(c.w.at(0, t, ci, co));
  return norm;
}

inline Conv1D drop_filters(const Conv1D& c, const std::vector<int>& keep) {
  Conv1D out = make_conv(c.kernel, c.in_ch, int(keep.size()), c.same_pad);
  for (int t = 0; t < c.kernel; ++t)
    for (int ci = 0; ci < c.in_ch; ++ci)
      for (size_t k = 0; k < keep.size(); ++k)
        out.w.at(0, t, ci, int(k)) = c.w.at(0, t, ci, keep[k]);
  for (size_t k = 0; k < keep.size(); ++k)
    out.bias.at(0, 0, 0, int(k)) = c.bias.at(0, 0, 0, keep[k]);
  return out;
}

inline Conv1D drop_in_channels(const Conv1D& c, const std::vector<int>& keep) {
  Conv1D out = make_conv(c.kernel, int(keep.size()), c.out_ch, c.same_pad);
  for (int t = 0; t < c.kernel; ++t)
    for (size_t k = 0; k < keep.size(); ++k)
      for (int co = 0; co < c.out_ch; ++co)
        out.w.at(0, t, int(k), co) = c.w.at(0, t, keep[k], co);
  out.bias = c.bias;
  return out;
}

inline FullyConnected drop_fc_channels(const FullyConnected& f, int positions,
                                       const std::vector<int>& keep, int old_ch) {
  FullyConnected out = make_fc(positions * int(keep.size()), f.out_dim);
  for (int o = 0; o < f.out_dim; ++o)
    for (int p = 0; p < positions; ++p)
      for (size_t k = 0; k < keep.size(); ++k)
        out.w.at(o, p * int(keep.size()) + int(k), 0, 0) =
            f.w.at(o, p * old_ch + keep[k], 0, 0);
  out.bias = f.bias;
  return out;
}

}  // namespace detail

// Iteratively removes the lowest-L1 filters from every conv layer, retraining
// briefly in between; every iteration's model is recorded as a candidate.
inline std::vector<PruneStep> prune_structured(const NetworkModel& trained,
                                               const Dataset& tr, const Dataset& val,
                                               const PruneConfig& cfg) {
  if (cfg.prune_fraction <= 0.0 || cfg.prune_fraction >= 1.0)
    throw std::invalid_argument("prune_structured: prune_fraction must be in (0,1)");
  NetworkModel m = trained;
  std::vector<PruneStep> steps;
  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    auto lo = dense_layout(m);
    auto shapes = infer_shapes(m);
    bool removed_any = false;
    std::string note;
    for (size_t k = 0; k < lo.conv.size(); ++k) {
      auto& c = std::get<Conv1D>(m.layers[size_t(lo.conv[k])]);
      int live = c.out_ch;
      int want = int(std::ceil(cfg.prune_fraction * double(live)));
      int allowed = live - cfg.min_filters;
      int n_drop = std::min(want, allowed);
      if (n_drop <= 0) {
        note += (note.empty() ? "" : "; ") + std::string("conv") + std::to_string(k + 1) +
                " at floor";
        continue;
      }
      auto norm = detail::filter_l1(c);
      std::vector<int> order(size_t(live), 0);
      for (int i = 0; i < live; ++i) order[size_t(i)] = i;
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return norm[size_t(a)] < norm[size_t(b)]; });
      std::vector<int> keep(order.begin() + n_drop, order.end());
      std::sort(keep.begin(), keep.end());
      int old_ch = c.out_ch;
      c = detail::drop_filters(c, keep);
      // downstream consumer loses the matching input channels
      if (k + 1 < lo.conv.size()) {
        auto& nxt = std::get<Conv1D>(m.layers[size_t(lo.conv[k + 1])]);
        nxt = detail::drop_in_channels(nxt, keep);
      } else {
        auto& f = std::get<FullyConnected>(m.layers[size_t(lo.fc)]);
        int positions = shapes[size_t(lo.fc)].len;
        f = detail::drop_fc_channels(f, positions, keep, old_ch);
      }
      removed_any = true;
    }
    if (!removed_any) break;   // every layer at floor

    TrainConfig ft = cfg.fine_tune;
    ft.seed = cfg.fine_tune.seed + uint64_t(iter);
    train(m, tr, val, ft);

    PruneStep st;
    st.iter = iter;
    st.model = m;
    auto lo2 = dense_layout(m);
    for (int ci : lo2.conv) st.channels.push_back(std::get<Conv1D>(m.layers[size_t(ci)]).out_ch);
    st.learnables = learnable_count(m);
    st.val_acc = evaluate(m, val);
    st.note = note;
    steps.push_back(st);
    if (st.val_acc < cfg.accuracy_floor) {
      steps.back().note += (steps.back().note.empty() ? "" : "; ") + std::string("below accuracy floor, stopping");
      break;
    }
  }
  return steps;
}

// ---- projection onto principal activation subspaces ------------------------

struct ProjectionConfig {
  double target_reduction = 0.0;   // requested learnable reduction in [0, 0.9]; 0 = exact refactoring
  std::optional<ProjectedRanks> ranks;  // explicit override, skips the search
  double eig_floor = 1e-10;        // relative eigenvalue cutoff for effective rank
  // >0: rescale every internal wire by a power of two so its calibration
  // max-abs lands near this value, compensating in the next layer's weights.
  // The datapath saturates a little under 4; the factored coordinates have no
  // reason to fit until they are normalized. Power-of-two factors keep the
  // float function bit-identical.
  double wire_target = 0.0;
};

struct ProjectionResult {
  NetworkModel model;
  ProjectedRanks ranks;
  bool exact = false;              // all ranks at full interface width
  std::vector<std::string> notes;
};

namespace detail {

struct InterfaceStats {
  Eigen::VectorXd sum;
  Eigen::MatrixXd outer;
  int64_t n = 0;

  void init(int dim) {
    sum = Eigen::VectorXd::Zero(dim);
    outer = Eigen::MatrixXd::Zero(dim, dim);
  }
  void add(const Eigen::VectorXd& x) {
    sum += x;
    outer += x * x.transpose();
    ++n;
  }
  Eigen::VectorXd mean() const { return sum / double(n); }
  Eigen::MatrixXd cov() const {
    Eigen::VectorXd mu = mean();
    return outer / double(n) - mu * mu.transpose();
  }
};

struct Basis {
  Eigen::MatrixXd q;       // dim x rank, orthonormal columns
  Eigen::VectorXd mean;
  int effective_rank = 0;
  std::vector<double> eigvals;  // descending
};

// Top eigenvectors of the interface covariance, deterministically signed.
inline Basis basis_from(const InterfaceStats& st, double eig_floor) {
  Basis b;
  b.mean = st.mean();
  Eigen::MatrixXd cov = st.cov();
  cov = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("projection: eigendecomposition failed");
  const int dim = int(cov.rows());
  Eigen::VectorXd ev = es.eigenvalues();                 // ascending
  Eigen::MatrixXd vecs = es.eigenvectors();
  double lmax = std::max(0.0, ev(dim - 1));
  b.q = Eigen::MatrixXd(dim, dim);
  for (int i = 0; i < dim; ++i) {
    Eigen::VectorXd col = vecs.col(dim - 1 - i);
    int arg = 0;
    for (int r = 1; r < dim; ++r)
      if (std::fabs(col(r)) > std::fabs(col(arg))) arg = r;
    if (col(arg) < 0) col = -col;
    b.q.col(i) = col;
    double lam = std::max(0.0, ev(dim - 1 - i));
    b.eigvals.push_back(lam);
    if (lmax > 0 && lam > eig_floor * lmax) ++b.effective_rank;
  }
  if (b.effective_rank == 0) b.effective_rank = 1;  // degenerate: any unit basis is exact
  return b;
}

inline int rank_for_energy(const Basis& b, double tau) {
  double total = 0;
  for (double l : b.eigvals) total += l;
  if (total <= 0) return 1;
  double acc = 0;
  for (size_t i = 0; i < b.eigvals.size(); ++i) {
    acc += b.eigvals[i];
    if (acc >= tau * total) return std::min(int(i) + 1, b.effective_rank);
  }
  return b.effective_rank;
}

inline Conv1D pointwise_from(const Eigen::MatrixXd& w, const Eigen::VectorXd& bias) {
  Conv1D c = make_conv(1, int(w.cols()), int(w.rows()));
  for (int i = 0; i < w.cols(); ++i)
    for (int o = 0; o < w.rows(); ++o) c.w.at(0, 0, i, o) = w(o, i);
  for (int o = 0; o < bias.size(); ++o) c.bias.at(0, 0, 0, o) = bias(o);
  return c;
}

}  // namespace detail

// Learnables of the projected topology for a given rank assignment.
inline int64_t projected_learnables(const std::vector<int>& conv_in,
                                    const std::vector<int>& conv_out, int kernel,
                                    int fc_positions, int fc_out,
                                    const ProjectedRanks& r) {
  int64_t n = 0;
  const int C_last = conv_out.back();
  for (size_t k = 0; k < conv_in.size(); ++k) {
    auto [qi, qo] = r.conv[k];
    if (qi > 0) n += int64_t(conv_in[k]) * qi + qi;          // projection in
    int core_in = qi > 0 ? qi : conv_in[k];
    n += int64_t(kernel) * core_in * qo + qo;                 // core
    n += int64_t(qo) * conv_out[k] + conv_out[k];             // projection out
  }
  n += int64_t(fc_positions) * C_last * r.fc_in_rank + r.fc_in_rank;
  n += int64_t(r.fc_in_rank) * fc_out + fc_out;
  return n;
}

// Rescales each internal wire by a power of two so its calibration max-abs
// lands near `target`, dividing the factor back out of the next layer's
// weights. ReLU, pooling and dropout commute with positive scaling and
// power-of-two factors are exact in floating point, so the network function
// is bit-identical; only the fixed-point headroom changes. The last learnable
// layer feeds the scores and stays put. Returns true if anything moved.
inline bool normalize_wire_ranges(NetworkModel& m,
                                  const std::vector<std::vector<double>>& calib,
                                  double target) {
  if (target <= 0 || calib.empty())
    throw std::invalid_argument("normalize_wire_ranges: need a positive target and calibration data");
  std::vector<size_t> learn_idx;
  for (size_t li = 0; li < m.layers.size(); ++li)
    if (std::holds_alternative<Conv1D>(m.layers[li]) ||
        std::holds_alternative<FullyConnected>(m.layers[li]))
      learn_idx.push_back(li);
  if (learn_idx.size() < 2) return false;
  std::vector<double> wire_max(learn_idx.size(), 0.0);
  ForwardTrace tr;
  for (const auto& x : calib) {
    forward(m, x, &tr);
    for (size_t k = 0; k + 1 < learn_idx.size(); ++k)
      for (double v : tr.entering[learn_idx[k] + 1].v)
        wire_max[k] = std::max(wire_max[k], std::fabs(v));
  }
  auto weights_of = [](Layer& l) -> std::pair<Tensor*, Tensor*> {
    if (auto* c = std::get_if<Conv1D>(&l)) return {&c->w, &c->bias};
    auto& f = std::get<FullyConnected>(l);
    return {&f.w, &f.bias};
  };
  bool touched = false;
  for (size_t k = 0; k + 1 < learn_idx.size(); ++k) {
    if (wire_max[k] <= 0.0) continue;
    double s = std::exp2(std::round(std::log2(target / wire_max[k])));
    s = std::clamp(s, 1.0 / 32.0, 32.0);
    if (s == 1.0) continue;
    auto [pw, pb] = weights_of(m.layers[learn_idx[k]]);
    for (auto& v : pw->data) v *= s;
    for (auto& v : pb->data) v *= s;
    for (auto& v : weights_of(m.layers[learn_idx[k + 1]]).first->data) v /= s;
    touched = true;
  }
  return touched;
}

// Rebuilds the dense network as projection-in / low-rank core / projection-out
// sublayers around each learnable layer, absorbing activation means into the
// biases. With full ranks the rebuild reproduces the dense outputs exactly.
inline ProjectionResult project_network(const NetworkModel& dense,
                                        const std::vector<std::vector<double>>& calib,
                                        const ProjectionConfig& cfg) {
  if (cfg.target_reduction < 0.0 || cfg.target_reduction > 0.9)
    throw std::invalid_argument("project_network: target_reduction outside [0, 0.9]");
  if (calib.empty())
    throw std::invalid_argument("project_network: empty calibration set");
  if (dense.quantized)
    throw std::invalid_argument("project_network: expects a float model");
  auto lo = dense_layout(dense);
  auto shapes = infer_shapes(dense);
  const int n_conv = int(lo.conv.size());
  for (int k = 0; k < n_conv; ++k) {
    const auto& c = std::get<Conv1D>(dense.layers[size_t(lo.conv[k])]);
    if (c.same_pad && c.in_ch > 1)
      throw std::invalid_argument("project_network: padded conv with >1 input channel unsupported");
  }

  // one pass over the calibration set gathers every interface's moments
  const size_t nc = size_t(n_conv);
  std::vector<detail::InterfaceStats> in_st(nc), out_st(nc);
  detail::InterfaceStats fc_st;
  for (int k = 0; k < n_conv; ++k) {
    in_st[size_t(k)].init(shapes[size_t(lo.conv[k])].ch);
    out_st[size_t(k)].init(shapes[size_t(lo.conv[k]) + 1].ch);
  }
  fc_st.init(shapes[size_t(lo.fc)].len * shapes[size_t(lo.fc)].ch);
  ForwardTrace trace;
  for (const auto& x : calib) {
    trace.entering.clear();
    forward(dense, x, &trace);
    for (int k = 0; k < n_conv; ++k) {
      const Act& in = trace.entering[size_t(lo.conv[k])];
      Eigen::VectorXd v(in.ch);
      for (int p = 0; p < in.len; ++p) {
        for (int c2 = 0; c2 < in.ch; ++c2) v(c2) = in.at(p, c2);
        in_st[size_t(k)].add(v);
      }
      const Act& out = trace.entering[size_t(lo.conv[k]) + 1];
      Eigen::VectorXd w(out.ch);
      for (int p = 0; p < out.len; ++p) {
        for (int c2 = 0; c2 < out.ch; ++c2) w(c2) = out.at(p, c2);
        out_st[size_t(k)].add(w);
      }
    }
    const Act& fin = trace.entering[size_t(lo.fc)];
    Eigen::VectorXd fv = Eigen::Map<const Eigen::VectorXd>(fin.v.data(), long(fin.v.size()));
    fc_st.add(fv);
  }

  std::vector<detail::Basis> in_basis(nc), out_basis(nc);
  for (int k = 0; k < n_conv; ++k) {
    in_basis[size_t(k)] = detail::basis_from(in_st[size_t(k)], cfg.eig_floor);
    out_basis[size_t(k)] = detail::basis_from(out_st[size_t(k)], cfg.eig_floor);
  }
  detail::Basis fc_basis = detail::basis_from(fc_st, cfg.eig_floor);

  ProjectionResult res;

  // rank assignment: explicit, or smallest energy threshold meeting the target
  std::vector<int> conv_in_ch, conv_out_ch;
  for (int k = 0; k < n_conv; ++k) {
    const auto& c = std::get<Conv1D>(dense.layers[size_t(lo.conv[k])]);
    conv_in_ch.push_back(c.in_ch);
    conv_out_ch.push_back(c.out_ch);
  }
  const int fc_positions = shapes[size_t(lo.fc)].len;
  const int fc_out = std::get<FullyConnected>(dense.layers[size_t(lo.fc)]).out_dim;

  auto ranks_at = [&](double tau) {
    ProjectedRanks r;
    for (int k = 0; k < n_conv; ++k) {
      int qi = conv_in_ch[size_t(k)] > 1 ? detail::rank_for_energy(in_basis[size_t(k)], tau) : 0;
      int qo = detail::rank_for_energy(out_basis[size_t(k)], tau);
      r.conv.push_back({qi, qo});
    }
    r.fc_in_rank = detail::rank_for_energy(fc_basis, tau);
    return r;
  };

  if (cfg.ranks) {
    res.ranks = *cfg.ranks;
    if (int(res.ranks.conv.size()) != n_conv)
      throw std::invalid_argument("project_network: rank override has wrong layer count");
  } else if (cfg.target_reduction == 0.0) {
    ProjectedRanks full;
    for (int k = 0; k < n_conv; ++k)
      full.conv.push_back({conv_in_ch[size_t(k)] > 1 ? conv_in_ch[size_t(k)] : 0,
                           conv_out_ch[size_t(k)]});
    full.fc_in_rank = fc_positions * conv_out_ch.back();
    res.ranks = full;
  } else {
    const int64_t dense_count = learnable_count(dense);
    const int64_t target = int64_t(std::llround((1.0 - cfg.target_reduction) * double(dense_count)));
    const double taus[] = {0.9999, 0.999, 0.995, 0.99, 0.98, 0.96, 0.93, 0.9,
                           0.85,   0.8,   0.7,   0.6,  0.5,  0.4,  0.3,  0.2,
                           0.12,   0.06,  0.03,  0.01, 0.003, 0.0};
    bool met = false;
    ProjectedRanks best;
    int64_t best_count = 0;
    for (double tau : taus) {
      auto r = ranks_at(tau);
      int64_t cnt = projected_learnables(conv_in_ch, conv_out_ch, 3, fc_positions, fc_out, r);
      if (!met || cnt < best_count) { best = r; best_count = cnt; }
      if (cnt <= target) {
        res.ranks = r;
        res.notes.push_back("energy threshold " + std::to_string(tau));
        met = true;
        break;
      }
    }
    if (!met) {
      res.ranks = best;
      res.notes.push_back("target reduction unreachable; using smallest rank assignment (" +
                          std::to_string(best_count) + " learnables)");
    }
  }

  // clamp to effective ranks
  for (int k = 0; k < n_conv; ++k) {
    auto& [qi, qo] = res.ranks.conv[size_t(k)];
    if (qi > 0 && qi > in_basis[size_t(k)].effective_rank && qi < conv_in_ch[size_t(k)]) {
      qi = in_basis[size_t(k)].effective_rank;
      res.notes.push_back("conv" + std::to_string(k + 1) + " input rank clamped to effective rank");
    }
    qi = std::min(qi, conv_in_ch[size_t(k)]);
    qo = std::min(qo, conv_out_ch[size_t(k)]);
  }
  res.ranks.fc_in_rank = std::min(res.ranks.fc_in_rank, fc_positions * conv_out_ch.back());

  // assemble: walk the dense layers, replacing each learnable layer in place
  NetworkModel proj;
  proj.input_len = dense.input_len;
  proj.input_ch = dense.input_ch;
  proj.class_count = dense.class_count;
  proj.act_format = dense.act_format;
  int conv_idx = 0;
  res.exact = true;
  for (size_t li = 0; li < dense.layers.size(); ++li) {
    const auto& l = dense.layers[li];
    if (const auto* c = std::get_if<Conv1D>(&l)) {
      auto [qi, qo] = res.ranks.conv[size_t(conv_idx)];
      const auto& bi = in_basis[size_t(conv_idx)];
      const auto& bo = out_basis[size_t(conv_idx)];
      if ((qi > 0 && qi < c->in_ch) || qo < c->out_ch) res.exact = false;
      Eigen::MatrixXd Qin, W_core;
      Eigen::MatrixXd Qout = bo.q.leftCols(qo);
      // original tap matrices W_t: out_ch x in_ch
      std::vector<Eigen::MatrixXd> taps;
      for (int t = 0; t < c->kernel; ++t) {
        Eigen::MatrixXd wt(c->out_ch, c->in_ch);
        for (int o = 0; o < c->out_ch; ++o)
          for (int i2 = 0; i2 < c->in_ch; ++i2) wt(o, i2) = c->w.at(0, t, i2, o);
        taps.push_back(wt);
      }
      Eigen::VectorXd bvec(c->out_ch);
      for (int o = 0; o < c->out_ch; ++o) bvec(o) = c->bias.at(0, 0, 0, o);

      Conv1D core = make_conv(c->kernel, qi > 0 ? qi : c->in_ch, qo, c->same_pad);
      Eigen::VectorXd bprime;
      if (qi > 0) {
        Qin = bi.q.leftCols(qi);
        // projection in: u = Qin^T (x - mean)
        proj.layers.push_back(detail::pointwise_from(Qin.transpose(), -Qin.transpose() * bi.mean));
        Eigen::MatrixXd wsum = Eigen::MatrixXd::Zero(c->out_ch, c->in_ch);
        for (const auto& wt : taps) wsum += wt;
        bprime = Qout.transpose() * (wsum * bi.mean + bvec - bo.mean);
        for (int t = 0; t < c->kernel; ++t) {
          Eigen::MatrixXd wp = Qout.transpose() * taps[size_t(t)] * Qin;
          for (int a = 0; a < qo; ++a)
            for (int b2 = 0; b2 < qi; ++b2) core.w.at(0, t, b2, a) = wp(a, b2);
        }
      } else {
        bprime = Qout.transpose() * (bvec - bo.mean);
        for (int t = 0; t < c->kernel; ++t) {
          Eigen::MatrixXd wp = Qout.transpose() * taps[size_t(t)];
          for (int a = 0; a < qo; ++a)
            for (int b2 = 0; b2 < c->in_ch; ++b2) core.w.at(0, t, b2, a) = wp(a, b2);
        }
      }
      for (int a = 0; a < qo; ++a) core.bias.at(0, 0, 0, a) = bprime(a);
      proj.layers.push_back(core);
      // projection out: y = Qout v + out-mean
      proj.layers.push_back(detail::pointwise_from(Qout, bo.mean));
      ++conv_idx;
    } else if (const auto* f = std::get_if<FullyConnected>(&l)) {
      int q = res.ranks.fc_in_rank;
      if (q < f->in_dim) res.exact = false;
      Eigen::MatrixXd Q = fc_basis.q.leftCols(q);
      Eigen::MatrixXd W(f->out_dim, f->in_dim);
      for (int o = 0; o < f->out_dim; ++o)
        for (int i2 = 0; i2 < f->in_dim; ++i2) W(o, i2) = f->w.at(o, i2, 0, 0);
      Eigen::VectorXd bvec(f->out_dim);
      for (int o = 0; o < f->out_dim; ++o) bvec(o) = f->bias.at(o, 0, 0, 0);

      FullyConnected pin = make_fc(f->in_dim, q);
      Eigen::MatrixXd Qt = Q.transpose();
      Eigen::VectorXd bin = -Qt * fc_basis.mean;
      for (int o = 0; o < q; ++o) {
        for (int i2 = 0; i2 < f->in_dim; ++i2) pin.w.at(o, i2, 0, 0) = Qt(o, i2);
        pin.bias.at(o, 0, 0, 0) = bin(o);
      }
      proj.layers.push_back(pin);

      FullyConnected pout = make_fc(q, f->out_dim);
      Eigen::MatrixXd WQ = W * Q;
      Eigen::VectorXd bout = W * fc_basis.mean + bvec;
      for (int o = 0; o < f->out_dim; ++o) {
        for (int i2 = 0; i2 < q; ++i2) pout.w.at(o, i2, 0, 0) = WQ(o, i2);
        pout.bias.at(o, 0, 0, 0) = bout(o);
      }
      proj.layers.push_back(pout);
    } else {
      proj.layers.push_back(l);   // relu / pool / dropout keep their positions
    }
  }
  infer_shapes(proj);

  if (cfg.wire_target > 0 && normalize_wire_ranges(proj, calib, cfg.wire_target))
    res.notes.push_back("wire ranges normalized toward " + std::to_string(cfg.wire_target));

  res.model = std::move(proj);
  return res;
}

// ---- quantization ----------------------------------------------------------

// Per-tensor power-of-two quantization of every learnable tensor; bias
// exponents are capped at the accumulator fraction so alignment stays exact.
inline NetworkModel quantize_model(const NetworkModel& m, int bits,
                                   QFormat act = kSampleFormat) {
  TensorQuant{bits, 0}.validate();
  act.validate();
  NetworkModel q = m;
  q.act_format = act;
  q.quantized = true;
  q.quant_bits = bits;
  auto fill = [&](const Tensor& w, const Tensor& b, LayerQuant& out) {
    out.valid = true;
    out.wq = choose_tensor_quant(w.data, bits);
    out.bq = choose_tensor_quant(b.data, bits);
    int acc_frac = out.wq.frac_exp + act.frac_bits;
    if (out.bq.frac_exp > acc_frac) out.bq.frac_exp = acc_frac;
    out.w.clear();
    out.b.clear();
    for (double v : w.data) out.w.push_back(quantize_to(v, out.wq));
    for (double v : b.data) out.b.push_back(quantize_to(v, out.bq));
  };
  for (auto& l : q.layers) {
    if (auto* c = std::get_if<Conv1D>(&l)) fill(c->w, c->bias, c->q);
    if (auto* f = std::get_if<FullyConnected>(&l)) fill(f->w, f->bias, f->q);
  }
  return q;
}

// ---- reporting -------------------------------------------------------------

struct ReportRow {
  std::string stage;        // trained | pruned | projected | quantized
  std::string provenance;
  int prune_iter = 0;
  double projection = 0.0;  // requested reduction
  int bits = 0;             // 0 = float
  int64_t learnables = 0;
  int64_t mem_bytes = 0;
  double val_acc = 0.0;
  std::string note;
};

struct CompressionReport {
  std::vector<ReportRow> rows;

  std::string to_csv() const {
    std::ostringstream os;
    os << "stage,provenance,prune_iter,projection,bits,learnables,memory_bytes,val_accuracy,note\n";
    for (const auto& r : rows) {
      os << r.stage << ',' << r.provenance << ',' << r.prune_iter << ',' << r.projection
         << ',' << r.bits << ',' << r.learnables << ',' << r.mem_bytes << ','
         << r.val_acc << ',' << '"' << r.note << '"' << '\n';
    }
    return os.str();
  }
  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows)
      arr.push_back({{"stage", r.stage},
                     {"provenance", r.provenance},
                     {"prune_iter", r.prune_iter},
                     {"projection", r.projection},
                     {"bits", r.bits},
                     {"learnables", r.learnables},
                     {"memory_bytes", r.mem_bytes},
                     {"val_accuracy", r.val_acc},
                     {"note", r.note}});
    return arr;
  }
};

// ---- candidate selection (three steps) --------------------------------------

struct SelectionConfig {
  double accuracy_floor = 0.99;      // step 1: float accuracy filter
  double stability_margin = 0.01;    // step 2/3: allowed drop vs float accuracy
  int bits_min = 2, bits_max = 8;
};

struct Candidate {
  NetworkModel model;                // float
  std::string provenance;
  double float_acc = 0.0;
};

struct Selection {
  int candidate_index = -1;
  int bits = 8;
  bool stable = false;
  double quant_acc = 0.0;
  std::vector<ReportRow> sweep;      // accuracy at every width for the chosen candidate(s)
};

// Step 1 keeps candidates above the float accuracy floor; step 2 walks them by
// ascending size and accepts the first whose 8-bit accuracy holds within the
// margin; step 3 then picks the narrowest width whose stability is contiguous
// down from 8 bits. If nothing is stable the best 8-bit model is returned,
// flagged unstable.
inline Selection select_model(const std::vector<Candidate>& candidates,
                              const Dataset& val, const SelectionConfig& cfg) {
  if (candidates.empty()) throw std::invalid_argument("select_model: no candidates");
  std::vector<int> eligible;
  for (size_t i = 0; i < candidates.size(); ++i)
    if (candidates[i].float_acc >= cfg.accuracy_floor) eligible.push_back(int(i));
  if (eligible.empty())
    throw std::invalid_argument("select_model: no candidate reaches the accuracy floor");
  std::stable_sort(eligible.begin(), eligible.end(), [&](int a, int b) {
    return learnable_count(candidates[size_t(a)].model) <
           learnable_count(candidates[size_t(b)].model);
  });

  Selection sel;
  double best8 = -1.0;
  int best8_idx = -1;
  for (int idx : eligible) {
    const auto& cand = candidates[size_t(idx)];
    std::vector<double> acc(size_t(cfg.bits_max + 1), 0.0);
    auto eval_at = [&](int b) {
      auto qm = quantize_model(cand.model, b, cand.model.act_format);
      return evaluate(qm, val);
    };
    acc[size_t(cfg.bits_max)] = eval_at(cfg.bits_max);
    for (int b = cfg.bits_max; b >= cfg.bits_min; --b) {
      if (b != cfg.bits_max) acc[size_t(b)] = eval_at(b);
      ReportRow row;
      row.stage = "quantized";
      row.provenance = cand.provenance + "/b" + std::to_string(b);
      row.bits = b;
      row.learnables = learnable_count(cand.model);
      row.mem_bytes = memory_bytes(row.learnables, b);
      row.val_acc = acc[size_t(b)];
      sel.sweep.push_back(row);
    }
    if (acc[size_t(cfg.bits_max)] > best8) {
      best8 = acc[size_t(cfg.bits_max)];
      best8_idx = idx;
    }
    auto stable_at = [&](int b) { return acc[size_t(b)] >= cand.float_acc - cfg.stability_margin; };
    if (!stable_at(cfg.bits_max)) continue;   // step 2 rejects this candidate
    int chosen = cfg.bits_max;
    for (int b = cfg.bits_max - 1; b >= cfg.bits_min; --b) {
      if (stable_at(b)) chosen = b;
      else break;                              // step 3 wants contiguous stability
    }
    sel.candidate_index = idx;
    sel.bits = chosen;
    sel.stable = true;
    sel.quant_acc = acc[size_t(chosen)];
    return sel;
  }
  sel.candidate_index = best8_idx;
  sel.bits = cfg.bits_max;
  sel.stable = false;
  sel.quant_acc = best8;
  return sel;
}

// ---- end-to-end driver -------------------------------------------------------

struct CompressionConfig {
  PruneConfig prune;
  std::vector<double> projection_targets{0.6};
  double wire_target = 1.0;         // post-fine-tune range normalization (0 = off)
  SelectionConfig selection;
  TrainConfig project_fine_tune;    // short schedule after projection
  int calib_limit = 512;            // calibration samples for the projection

  CompressionConfig() {
    project_fine_tune.initial_lr = 2e-3;
    project_fine_tune.max_epochs = 25;
    project_fine_tune.patience = 1000;
    project_fine_tune.lr_drop_period = 20;
    project_fine_tune.l2 = 1e-4;
    project_fine_tune.batch_size = 128;
  }
};

struct CompressionOutcome {
  NetworkModel final_float;
  NetworkModel final_model;         // quantized at the chosen width
  int chosen_bits = 8;
  bool stable = false;
  std::string provenance;
  double float_acc = 0.0, quant_acc = 0.0;
  CompressionReport report;
};

inline CompressionOutcome run_compression(const NetworkModel& trained, const DataSplit& data,
                                          const CompressionConfig& cfg) {
  CompressionOutcome out;
  double base_acc = evaluate(trained, data.val);
  {
    ReportRow r;
    r.stage = "trained";
    r.provenance = "base";
    r.learnables = learnable_count(trained);
    r.mem_bytes = memory_bytes(r.learnables, 32);
    r.val_acc = base_acc;
    out.report.rows.push_back(r);
  }

  auto steps = prune_structured(trained, data.train, data.val, cfg.prune);
  for (const auto& st : steps) {
    ReportRow r;
    r.stage = "pruned";
    r.provenance = "prune" + std::to_string(st.iter);
    r.prune_iter = st.iter;
    r.learnables = st.learnables;
    r.mem_bytes = memory_bytes(st.learnables, 32);
    r.val_acc = st.val_acc;
    r.note = st.note;
    out.report.rows.push_back(r);
  }

  // projection candidates come from the smallest pruned model that still
  // clears the floor (plus the dense baseline when nothing does)
  std::vector<Candidate> candidates;
  const PruneStep* source = nullptr;
  for (const auto& st : steps)
    if (st.val_acc >= cfg.prune.accuracy_floor) source = &st;
  std::vector<std::vector<double>> calib;
  for (size_t i = 0; i < data.train.size() && int(i) < cfg.calib_limit; ++i)
    calib.push_back(data.train.x[i]);
  const NetworkModel& proj_base = source ? source->model : trained;
  std::string base_prov = source ? "prune" + std::to_string(source->iter) : "base";
  for (double target : cfg.projection_targets) {
    ProjectionConfig pc;
    pc.target_reduction = target;
    auto pr = project_network(proj_base, calib, pc);
    TrainConfig ft = cfg.project_fine_tune;
    train(pr.model, data.train, data.val, ft);
    // normalize after all float training: the factored wires must fit the
    // 10-bit datapath before the width sweep sees the candidate
    if (cfg.wire_target > 0) normalize_wire_ranges(pr.model, calib, cfg.wire_target);
    Candidate cand;
    cand.provenance = base_prov + "/proj" + std::to_string(target);
    cand.float_acc = evaluate(pr.model, data.val);
    cand.model = std::move(pr.model);
    ReportRow r;
    r.stage = "projected";
    r.provenance = cand.provenance;
    r.prune_iter = source ? source->iter : 0;
    r.projection = target;
    r.learnables = learnable_count(cand.model);
    r.mem_bytes = memory_bytes(r.learnables, 32);
    r.val_acc = cand.float_acc;
    for (const auto& n : pr.notes) r.note += (r.note.empty() ? "" : "; ") + n;
    out.report.rows.push_back(r);
    candidates.push_back(std::move(cand));
  }

  auto sel = select_model(candidates, data.val, cfg.selection);
  for (const auto& r : sel.sweep) out.report.rows.push_back(r);

  const auto& chosen = candidates[size_t(sel.candidate_index)];
  out.final_float = chosen.model;
  out.final_model = quantize_model(chosen.model, sel.bits, chosen.model.act_format);
  out.chosen_bits = sel.bits;
  out.stable = sel.stable;
  out.provenance = chosen.provenance + "/b" + std::to_string(sel.bits);
  out.float_acc = chosen.float_acc;
  out.quant_acc = sel.quant_acc;
  {
    ReportRow r;
    r.stage = "selected";
    r.provenance = out.provenance;
    r.bits = sel.bits;
    r.learnables = learnable_count(out.final_model);
    r.mem_bytes = memory_bytes(r.learnables, sel.bits);
    r.val_acc = sel.quant_acc;
    r.note = sel.stable ? "stable" : "unstable: no width held the margin";
    out.report.rows.push_back(r);
  }
  return out;
}

}  // namespace dsd
