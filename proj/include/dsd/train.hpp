#pragma once
// SGD-with-momentum training for the 1-D CNN, plus dataset plumbing.
// Single threaded and seed-deterministic throughout.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "dsd/network.hpp"

namespace dsd {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  size_t size() const { return x.size(); }
};

struct DataSplit {
  Dataset train, val, test;
};

// Stratified shuffle split so small corpora keep every class in every part.
inline DataSplit split_dataset(const Dataset& all, double train_frac, double val_frac,
                               uint64_t seed) {
  if (all.x.size() != all.y.size()) throw std::invalid_argument("split_dataset: x/y size mismatch");
  if (train_frac <= 0 || val_frac < 0 || train_frac + val_frac >= 1.0)
    throw std::invalid_argument("split_dataset: bad fractions");
  int max_label = 0;
  for (int y : all.y) max_label = std::max(max_label, y);
  std::vector<std::vector<size_t>> per_class(size_t(max_label) + 1);
  for (size_t i = 0; i < all.y.size(); ++i) {
    if (all.y[i] < 0) throw std::invalid_argument("split_dataset: negative label");
    per_class[size_t(all.y[i])].push_back(i);
  }
  std::mt19937_64 rng(seed);
  DataSplit out;
  for (auto& idx : per_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    size_t n = idx.size();
    size_t n_tr = size_t(std::floor(train_frac * double(n)));
    size_t n_val = size_t(std::floor(val_frac * double(n)));
    for (size_t k = 0; k < n; ++k) {
      Dataset& d = k < n_tr ? out.train : (k < n_tr + n_val ? out.val : out.test);
      d.x.push_back(all.x[idx[k]]);
      d.y.push_back(all.y[idx[k]]);
    }
  }
  return out;
}

struct TrainConfig {
  double initial_lr = 0.01;
  double lr_drop_factor = 0.1;   // multiply lr by this every lr_drop_period epochs
  int lr_drop_period = 5;
  double momentum = 0.9;
  int batch_size = 256;
  int max_epochs = 200;
  double l2 = 1.8;               // penalty coefficient on weights (not biases)
  int patience = 6;              // epochs without val improvement before stopping
  uint64_t seed = 1;
  bool restore_best = true;
  bool verbose = false;
};

struct EpochStats {
  int epoch = 0;
  double lr = 0, train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;
  double best_val_acc = 0;
};

// Gradient / velocity storage aligned with model.layers.
struct GradBuffers {
  std::vector<Tensor> w, b;

  explicit GradBuffers(const NetworkModel& m) {
    for (const auto& l : m.layers) {
      if (const auto* c = std::get_if<Conv1D>(&l)) {
        w.emplace_back(c->w.shape);
        b.emplace_back(c->bias.shape);
      } else if (const auto* f = std::get_if<FullyConnected>(&l)) {
        w.emplace_back(f->w.shape);
        b.emplace_back(f->bias.shape);
      } else {
        w.emplace_back();
        b.emplace_back();
      }
    }
  }
  void zero() {
    for (auto& t : w) std::fill(t.data.begin(), t.data.end(), 0.0);
    for (auto& t : b) std::fill(t.data.begin(), t.data.end(), 0.0);
  }
};

// He-normal weights. Biases start slightly positive: every stage here feeds a
// ReLU (including the output head), and a unit whose pre-activation never goes
// positive receives no gradient and stays dead for good.
inline void initialize_weights(NetworkModel& m, uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& l : m.layers) {
    if (auto* c = std::get_if<Conv1D>(&l)) {
      double fan_in = double(c->kernel) * c->in_ch;
      std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
      for (auto& v : c->w.data) v = d(rng);
      std::fill(c->bias.data.begin(), c->bias.data.end(), 0.1);
    } else if (auto* f = std::get_if<FullyConnected>(&l)) {
      std::normal_distribution<double> d(0.0, std::sqrt(2.0 / double(f->in_dim)));
      for (auto& v : f->w.data) v = d(rng);
      std::fill(f->bias.data.begin(), f->bias.data.end(), 0.1);
    }
  }
}

namespace detail {

struct SampleCache {
  std::vector<Act> entering;  // activation entering each layer
  Act out;
};

// forward one sample, caching layer inputs; masks: per-dropout-layer scale
// vector (empty => inference identity)
inline void forward_cached(const NetworkModel& m, std::span<const double> x,
                           const std::vector<std::vector<double>>* masks,
                           SampleCache& cache) {
  cache.entering.clear();
  Act a{m.input_len, m.input_ch, std::vector<double>(x.begin(), x.end())};
  size_t drop_idx = 0;
  for (const auto& l : m.layers) {
    cache.entering.push_back(a);
    if (const auto* c = std::get_if<Conv1D>(&l)) {
      a = conv_forward(*c, a);
    } else if (std::holds_alternative<ReLU>(l)) {
      for (auto& v : a.v) v = std::max(0.0, v);
    } else if (std::holds_alternative<MaxPool1D>(l)) {
      Act out{a.len / 2, a.ch, std::vector<double>(size_t(a.len / 2) * a.ch)};
      for (int j = 0; j < out.len; ++j)
        for (int c2 = 0; c2 < a.ch; ++c2)
          out.at(j, c2) = std::max(a.at(2 * j, c2), a.at(2 * j + 1, c2));
      a = out;
    } else if (std::holds_alternative<Dropout>(l)) {
      if (masks) {
        const auto& mask = (*masks)[drop_idx++];
        for (size_t i = 0; i < a.v.size(); ++i) a.v[i] *= mask[i];
      }
    } else if (const auto* f = std::get_if<FullyConnected>(&l)) {
      Act out{1, f->out_dim, std::vector<double>(size_t(f->out_dim), 0.0)};
      for (int o = 0; o < f->out_dim; ++o) {
        double acc = f->bias.at(o, 0, 0, 0);
        for (int i = 0; i < f->in_dim; ++i) acc += f->w.at(o, i, 0, 0) * a.v[i];
        out.v[o] = acc;
      }
      a = out;
    }
  }
  cache.out = a;
}

inline double softmax_ce(const std::vector<double>& z, int label,
                         std::vector<double>& grad) {
  double mx = *std::max_element(z.begin(), z.end());
  double denom = 0.0;
  grad.resize(z.size());
  for (size_t i = 0; i < z.size(); ++i) denom += std::exp(z[i] - mx);
  double loss = -(z[size_t(label)] - mx - std::log(denom));
  for (size_t i = 0; i < z.size(); ++i)
    grad[i] = std::exp(z[i] - mx) / denom - (int(i) == label ? 1.0 : 0.0);
  return loss;
}

// The deployed graph ends FC -> ReLU, but the cross-entropy is taken on the
// FC pre-activations: a clamped output unit would otherwise get zero gradient
// and stay dead for the rest of the run. Inference keeps the ReLU.
inline bool loss_on_logits(const NetworkModel& m) {
  return m.layers.size() >= 2 && std::holds_alternative<ReLU>(m.layers.back()) &&
         std::holds_alternative<FullyConnected>(m.layers[m.layers.size() - 2]);
}

inline const std::vector<double>& loss_input(const NetworkModel& m, const SampleCache& c) {
  return loss_on_logits(m) ? c.entering.back().v : c.out.v;
}

// backward one sample, accumulating parameter grads (unnormalized);
// skip_terminal pairs with loss_on_logits (gradient enters below the last ReLU)
inline void backward_accumulate(const NetworkModel& m, const SampleCache& cache,
                                const std::vector<std::vector<double>>* masks,
                                std::vector<double> g_out, GradBuffers& grads,
                                bool skip_terminal = false) {
  Act g{1, int(g_out.size()), std::move(g_out)};
  size_t drop_total = 0;
  for (const auto& l : m.layers)
    if (std::holds_alternative<Dropout>(l)) ++drop_total;
  size_t drop_idx = drop_total;
  for (int li = int(m.layers.size()) - 1 - (skip_terminal ? 1 : 0); li >= 0; --li) {
    const Act& in = cache.entering[size_t(li)];
    const auto& l = m.layers[size_t(li)];
    if (const auto* c = std::get_if<Conv1D>(&l)) {
      const int pad = c->pad();
      Act gin{in.len, in.ch, std::vector<double>(size_t(in.len) * in.ch, 0.0)};
      auto& gw = grads.w[size_t(li)];
      auto& gb = grads.b[size_t(li)];
      for (int j = 0; j < g.len; ++j) {
        for (int co = 0; co < c->out_ch; ++co) {
          double gj = g.at(j, co);
          if (gj == 0.0) continue;
          gb.at(0, 0, 0, co) += gj;
          for (int t = 0; t < c->kernel; ++t) {
            int p = j + t - pad;
            if (p < 0 || p >= in.len) continue;
            for (int ci = 0; ci < c->in_ch; ++ci) {
              gw.at(0, t, ci, co) += gj * in.at(p, ci);
              gin.at(p, ci) += gj * c->w.at(0, t, ci, co);
            }
          }
        }
      }
      g = std::move(gin);
    } else if (std::holds_alternative<ReLU>(l)) {
      for (size_t i = 0; i < g.v.size(); ++i)
        if (in.v[i] <= 0.0) g.v[i] = 0.0;
    } else if (std::holds_alternative<MaxPool1D>(l)) {
      Act gin{in.len, in.ch, std::vector<double>(size_t(in.len) * in.ch, 0.0)};
      for (int j = 0; j < g.len; ++j)
        for (int c2 = 0; c2 < in.ch; ++c2) {
          // route to the first maximum in the window
          int src = in.at(2 * j, c2) >= in.at(2 * j + 1, c2) ? 2 * j : 2 * j + 1;
          gin.at(src, c2) += g.at(j, c2);
        }
      g = std::move(gin);
    } else if (std::holds_alternative<Dropout>(l)) {
      if (masks) {
        const auto& mask = (*masks)[--drop_idx];
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] *= mask[i];
      }
    } else if (const auto* f = std::get_if<FullyConnected>(&l)) {
      Act gin{in.len, in.ch, std::vector<double>(size_t(f->in_dim), 0.0)};
      auto& gw = grads.w[size_t(li)];
      auto& gb = grads.b[size_t(li)];
      for (int o = 0; o < f->out_dim; ++o) {
        double go = g.v[size_t(o)];
        gb.at(o, 0, 0, 0) += go;
        if (go == 0.0) continue;
        for (int i = 0; i < f->in_dim; ++i) {
          gw.at(o, i, 0, 0) += go * in.v[size_t(i)];
          gin.v[size_t(i)] += go * f->w.at(o, i, 0, 0);
        }
      }
      g = std::move(gin);
    }
  }
}

}  // namespace detail

// Mean cross-entropy over the batch and its parameter gradients (data term
// only; dropout inactive). Exposed for finite-difference verification.
inline double loss_and_gradients(const NetworkModel& m,
                                 std::span<const std::vector<double>> xs,
                                 std::span<const int> ys, GradBuffers& grads) {
  if (xs.empty() || xs.size() != ys.size())
    throw std::invalid_argument("loss_and_gradients: empty or mismatched batch");
  grads.zero();
  detail::SampleCache cache;
  std::vector<double> gz;
  double loss = 0.0;
  const bool on_logits = detail::loss_on_logits(m);
  for (size_t s = 0; s < xs.size(); ++s) {
    detail::forward_cached(m, xs[s], nullptr, cache);
    loss += detail::softmax_ce(detail::loss_input(m, cache), ys[s], gz);
    detail::backward_accumulate(m, cache, nullptr, gz, grads, on_logits);
  }
  double inv = 1.0 / double(xs.size());
  loss *= inv;
  for (auto& t : grads.w)
    for (auto& v : t.data) v *= inv;
  for (auto& t : grads.b)
    for (auto& v : t.data) v *= inv;
  return loss;
}

inline double evaluate(const NetworkModel& m, const Dataset& d) {
  if (d.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  size_t correct = 0;
  for (size_t i = 0; i < d.size(); ++i)
    if (predict(m, d.x[i]) == d.y[i]) ++correct;
  return double(correct) / double(d.size());
}

inline std::pair<double, double> eval_loss_acc(const NetworkModel& m, const Dataset& d) {
  if (d.size() == 0) throw std::invalid_argument("eval_loss_acc: empty dataset");
  detail::SampleCache cache;
  std::vector<double> gz;
  double loss = 0.0;
  size_t correct = 0;
  for (size_t i = 0; i < d.size(); ++i) {
    detail::forward_cached(m, d.x[i], nullptr, cache);
    loss += detail::softmax_ce(detail::loss_input(m, cache), d.y[i], gz);
    if (argmax_label(cache.out.v) == d.y[i]) ++correct;
  }
  return {loss / double(d.size()), double(correct) / double(d.size())};
}

inline TrainHistory train(NetworkModel& m, const Dataset& tr, const Dataset& val,
                          const TrainConfig& cfg) {
  if (tr.size() == 0 || val.size() == 0)
    throw std::invalid_argument("train: empty train or validation set");
  for (int y : tr.y)
    if (y < 0 || y >= m.class_count) throw std::invalid_argument("train: label out of range");
  infer_shapes(m);
  std::mt19937_64 rng(cfg.seed);

  // dropout layer bookkeeping
  std::vector<size_t> drop_sizes;
  std::vector<double> drop_rates;
  {
    auto shapes = infer_shapes(m);
    for (size_t li = 0; li < m.layers.size(); ++li)
      if (const auto* dl = std::get_if<Dropout>(&m.layers[li])) {
        drop_sizes.push_back(size_t(shapes[li].len) * size_t(shapes[li].ch));
        drop_rates.push_back(dl->rate);
      }
  }

  GradBuffers grads(m), vel(m);
  const bool on_logits = detail::loss_on_logits(m);
  detail::SampleCache cache;
  std::vector<double> gz;
  std::vector<size_t> order(tr.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainHistory hist;
  NetworkModel best = m;
  double best_err = 2.0;
  int stall = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double lr = cfg.initial_lr *
                std::pow(cfg.lr_drop_factor, double((epoch - 1) / cfg.lr_drop_period));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    size_t epoch_correct = 0;

    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
      size_t end = std::min(order.size(), start + size_t(cfg.batch_size));
      size_t bsz = end - start;
      grads.zero();
      // one dropout mask per sample per dropout layer
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (size_t s = start; s < end; ++s) {
        std::vector<std::vector<double>> masks(drop_sizes.size());
        for (size_t dl = 0; dl < drop_sizes.size(); ++dl) {
          masks[dl].resize(drop_sizes[dl]);
          double keep = 1.0 - drop_rates[dl];
          for (auto& mv : masks[dl]) mv = (u(rng) < keep) ? 1.0 / keep : 0.0;
        }
        const auto* mp = drop_sizes.empty() ? nullptr : &masks;
        detail::forward_cached(m, tr.x[order[s]], mp, cache);
        double li = detail::softmax_ce(detail::loss_input(m, cache), tr.y[order[s]], gz);
        if (!std::isfinite(li))
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) +
                              ", sample " + std::to_string(order[s]));
        epoch_loss += li;
        if (argmax_label(cache.out.v) == tr.y[order[s]]) ++epoch_correct;
        detail::backward_accumulate(m, cache, mp, gz, grads, on_logits);
      }

      // SGDM step with L2 on weights
      double inv = 1.0 / double(bsz);
      size_t li = 0;
      for (auto& l : m.layers) {
        Tensor* w = nullptr;
        Tensor* b = nullptr;
        if (auto* c = std::get_if<Conv1D>(&l)) { w = &c->w; b = &c->bias; }
        if (auto* f = std::get_if<FullyConnected>(&l)) { w = &f->w; b = &f->bias; }
        if (w) {
          auto& gw = grads.w[li];
          auto& vw = vel.w[li];
          for (size_t i = 0; i < w->data.size(); ++i) {
            double gradient = gw.data[i] * inv + cfg.l2 * w->data[i];
            vw.data[i] = cfg.momentum * vw.data[i] - lr * gradient;
            w->data[i] += vw.data[i];
          }
          auto& gb = grads.b[li];
          auto& vb = vel.b[li];
          for (size_t i = 0; i < b->data.size(); ++i) {
            vb.data[i] = cfg.momentum * vb.data[i] - lr * gb.data[i] * inv;
            b->data[i] += vb.data[i];
          }
        }
        ++li;
      }
    }

    auto [vloss, vacc] = eval_loss_acc(m, val);
    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.train_loss = epoch_loss / double(tr.size());
    st.train_acc = double(epoch_correct) / double(tr.size());
    st.val_loss = vloss;
    st.val_acc = vacc;
    hist.epochs.push_back(st);
    if (cfg.verbose)
      std::fprintf(stderr, "epoch %3d lr %.5f loss %.4f acc %.4f val %.4f\n", epoch, lr,
                   st.train_loss, st.train_acc, vacc);

    double err = 1.0 - vacc;
    if (err < best_err) {
      best_err = err;
      best = m;
      hist.best_epoch = epoch;
      hist.best_val_acc = vacc;
      stall = 0;
    } else if (++stall >= cfg.patience) {
      break;
    }
  }
  if (cfg.restore_best && hist.best_epoch > 0) m = best;
  return hist;
}

}  // namespace dsd
