#pragma once
// Spike-sorting harness around the two-CNN front end: synthetic recordings,
// channel selection on decimated windows, event detection, artefact removal,
// PCA + k-means sorting and the classification-accuracy bookkeeping.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <random>
#include <set>
#include <span>

#include <Eigen/Dense>

#include "dsd/network.hpp"
#include "dsd/recording_io.hpp"
#include "dsd/train.hpp"

namespace dsd {

inline constexpr int kSegmentLen = 66;     // 2.5 ms at 26.4 kHz
inline constexpr int kPeakOffset = 20;     // aligned negative peak lands here
inline constexpr int kLockout = 66;        // refractory samples after a detection
inline constexpr int kSelectWindow = 660;  // channel-selection window before decimation
inline constexpr int kDownsample = 10;
inline constexpr double kSampleRate = 26400.0;

// ---- templates ---------------------------------------------------------------

// Three analytic spike shapes, each normalized to a -1.0 trough at kPeakOffset.
inline std::vector<std::vector<double>> default_templates() {
  auto gauss = [](double t, double mu, double s) {
    const double d = (t - mu) / s;
    return std::exp(-0.5 * d * d);
  };
  std::vector<std::vector<double>> tpl(3, std::vector<double>(kSegmentLen));
  for (int i = 0; i < kSegmentLen; ++i) {
    const double t = i;
    // wide enough that a 10x decimated window still shows the trough
    tpl[0][size_t(i)] = -gauss(t, kPeakOffset, 6.0) + 0.40 * gauss(t, 40, 8.0);
    tpl[1][size_t(i)] = -gauss(t, kPeakOffset, 9.0) + 0.25 * gauss(t, 48, 10.0);
    tpl[2][size_t(i)] = -gauss(t, kPeakOffset, 4.5) + 0.60 * gauss(t, 33, 5.0);
  }
  for (auto& w : tpl) {
    const double trough = -*std::min_element(w.begin(), w.end());
    for (auto& v : w) v /= trough;
  }
  return tpl;
}

// ---- synthesis ---------------------------------------------------------------

struct SynthConfig {
  int channels = 1;
  double seconds = 2.0;
  double sample_rate = kSampleRate;
  double noise_sigma = 0.05;        // background std, relative to unit spike trough
  double spike_rate_hz = 20.0;      // Poisson event rate per channel
  double artefact_rate_hz = 0.0;
  double artefact_scale = 0.5;      // attenuation applied to artefact shapes
  // attenuated-template density; high enough that the superposition is
  // effectively Gaussian (4-sigma excursions stay rare)
  double background_rate_hz = 24000.0;
  uint64_t seed = 1;
  std::vector<int> silent_channels;    // background only there, no spike/artefact events
};

// Additive model: Poisson spike train from the three templates, plus artefacts
// (attenuated, truncated templates) and a background made of superposed weak
// random templates rescaled to exactly noise_sigma.
inline Recording generate_synthetic(const std::vector<std::vector<double>>& templates,
                                    const SynthConfig& cfg) {
  if (templates.size() < 3)
    throw std::invalid_argument("generate_synthetic: need at least 3 templates");
  for (const auto& t : templates)
    if (int(t.size()) != kSegmentLen)
      throw std::invalid_argument("generate_synthetic: template length must be 66");
  if (cfg.noise_sigma < 0) throw std::invalid_argument("generate_synthetic: negative sigma");
  const double total_rate = cfg.spike_rate_hz + cfg.artefact_rate_hz;
  // every event occupies a lockout-spaced slot; refuse rates the channel cannot hold
  if (total_rate * (2.0 * kLockout) > 0.9 * cfg.sample_rate)
    throw std::invalid_argument("generate_synthetic: event rate exceeds channel capacity");

  const int64_t n = llround(cfg.seconds * cfg.sample_rate);
  if (n < kSegmentLen) throw std::invalid_argument("generate_synthetic: duration too short");

  Recording rec;
  rec.sample_rate = cfg.sample_rate;
  rec.noise_sigma = cfg.noise_sigma;

  for (int ch = 0; ch < cfg.channels; ++ch) {
    std::mt19937_64 rng(cfg.seed + 0x9e3779b97f4a7c15ULL * uint64_t(ch + 1));
    std::vector<double> sig(size_t(n), 0.0);
    std::vector<SpikeEvent> truth;
    const bool silent = std::find(cfg.silent_channels.begin(), cfg.silent_channels.end(), ch) !=
                        cfg.silent_channels.end();

    if (total_rate > 0 && !silent) {
      std::exponential_distribution<double> gap(total_rate);
      std::uniform_int_distribution<int> pick_class(1, 3);
      std::uniform_int_distribution<size_t> pick_tpl(0, templates.size() - 1);
      std::bernoulli_distribution is_art(cfg.artefact_rate_hz / total_rate);
      int64_t t = kPeakOffset;
      while (true) {
        const int64_t step = llround(gap(rng) * cfg.sample_rate);
        t += std::max<int64_t>(2 * kLockout, step);
        if (t + (kSegmentLen - kPeakOffset) >= n) break;
        const bool art = is_art(rng);
        if (art) {
          const auto& base = templates[pick_tpl(rng)];
          // incomplete transition: waveform stops shortly after the trough
          for (int i = 0; i < kSegmentLen; ++i) {
            double v = base[size_t(i)] * cfg.artefact_scale;
            if (i > kPeakOffset + 5) v = 0.0;
            else if (i > kPeakOffset + 2) v *= double(kPeakOffset + 5 - i) / 3.0;
            sig[size_t(t - kPeakOffset + i)] += v;
          }
          truth.push_back({t, 0, true});
        } else {
          const int cls = pick_class(rng);
          const auto& w = templates[size_t(cls - 1)];
          for (int i = 0; i < kSegmentLen; ++i)
            sig[size_t(t - kPeakOffset + i)] += w[size_t(i)];
          truth.push_back({t, cls, false});
        }
      }
    }

    if (cfg.noise_sigma > 0 && cfg.background_rate_hz > 0) {
      std::vector<double> bg(size_t(n), 0.0);
      std::exponential_distribution<double> gap(cfg.background_rate_hz);
      std::uniform_int_distribution<size_t> pick_tpl(0, templates.size() - 1);
      std::uniform_real_distribution<double> amp(-0.3, 0.3);
      int64_t t = 0;
      while (true) {
        t += std::max<int64_t>(1, llround(gap(rng) * cfg.sample_rate));
        if (t + kSegmentLen >= n) break;
        const auto& w = templates[pick_tpl(rng)];
        const double a = amp(rng);
        for (int i = 0; i < kSegmentLen; ++i) bg[size_t(t + i)] += a * w[size_t(i)];
      }
      double mean = std::accumulate(bg.begin(), bg.end(), 0.0) / double(n);
      double var = 0.0;
      for (double v : bg) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / double(n));
      if (sd > 0) {
        const double scale = cfg.noise_sigma / sd;
        for (size_t i = 0; i < sig.size(); ++i) sig[i] += (bg[i] - mean) * scale;
      }
    }

    std::vector<float> out(sig.size());
    for (size_t i = 0; i < sig.size(); ++i) out[i] = float(sig[i]);
    rec.channels.push_back(std::move(out));
    rec.truth.push_back(std::move(truth));
  }
  rec.validate();
  return rec;
}

// channels that actually carry spikes, per ground truth
inline std::set<int> channel_activity(const Recording& rec) {
  std::set<int> act;
  for (size_t c = 0; c < rec.truth.size(); ++c)
    for (const auto& e : rec.truth[c])
      if (!e.artefact) {
        act.insert(int(c));
        break;
      }
  return act;
}

// ---- detection ----------------------------------------------------------------

inline double sigma_estimate(std::span<const float> x) {
  if (x.empty()) return 0.0;
  std::vector<double> a(x.size());
  for (size_t i = 0; i < x.size(); ++i) a[i] = std::abs(double(x[i]));
  const size_t mid = a.size() / 2;
  std::nth_element(a.begin(), a.begin() + ptrdiff_t(mid), a.end());
  double med = a[mid];
  if (a.size() % 2 == 0) {
    auto lower = std::max_element(a.begin(), a.begin() + ptrdiff_t(mid));
    med = 0.5 * (med + *lower);
  }
  return med / 0.6745;
}

struct Detection {
  int channel = 0;
  int64_t t = 0;                 // negative-peak sample index
  std::vector<double> x;         // 66 samples, trough at kPeakOffset
};

// Amplitude-threshold detector: crossings of -mult*sigma align to the local
// negative peak; one 66-sample window per event, refractory kLockout samples.
inline std::vector<Detection> detect_events(std::span<const float> x, int channel = 0,
                                            double mult = 4.0) {
  std::vector<Detection> out;
  const int64_t n = int64_t(x.size());
  if (n == 0) return out;
  const double thr = -mult * sigma_estimate(x);
  int64_t i = 0;
  while (i < n) {
    if (double(x[size_t(i)]) < thr) {
      int64_t p = i;
      const int64_t hi = std::min<int64_t>(n, i + kPeakOffset);
      for (int64_t j = i; j < hi; ++j)
        if (double(x[size_t(j)]) < double(x[size_t(p)])) p = j;
      if (p - kPeakOffset >= 0 && p + (kSegmentLen - kPeakOffset) <= n) {
        Detection d;
        d.channel = channel;
        d.t = p;
        d.x.resize(kSegmentLen);
        for (int j = 0; j < kSegmentLen; ++j)
          d.x[size_t(j)] = double(x[size_t(p - kPeakOffset + j)]);
        out.push_back(std::move(d));
      }
      i = p + kLockout;
    } else {
      ++i;
    }
  }
  return out;
}

// ---- channel selection ----------------------------------------------------------

struct Segment {
  int channel = 0;
  int64_t origin = 0;            // window start in raw samples
  int label = -1;                // supervised tag when known
  std::vector<double> x;         // always kSegmentLen long
};

// 3-tap moving average (edges clamped) followed by a stride pick
inline std::vector<double> decimate_window(std::span<const float> w, int stride) {
  std::vector<double> out(size_t(int(w.size()) / stride));
  const int n = int(w.size());
  for (size_t j = 0; j < out.size(); ++j) {
    const int c = int(j) * stride;
    const int l = std::max(0, c - 1), r = std::min(n - 1, c + 1);
    out[j] = (double(w[size_t(l)]) + double(w[size_t(c)]) + double(w[size_t(r)])) / 3.0;
  }
  return out;
}

// Non-overlapping windows per channel, decimated to 66 samples; supervised
// label 1 when at least one true spike falls inside the window.
inline std::vector<Segment> segment_for_channel_selection(const Recording& rec,
                                                          int window = kSelectWindow,
                                                          int downsample = kDownsample) {
  if (window <= 0 || downsample <= 0 || window % downsample != 0 ||
      window / downsample != kSegmentLen)
    throw std::invalid_argument("segment_for_channel_selection: window/downsample must yield 66");
  std::vector<Segment> out;
  for (int ch = 0; ch < rec.channel_count(); ++ch) {
    const auto& x = rec.channels[size_t(ch)];
    const int64_t nwin = int64_t(x.size()) / window;
    for (int64_t k = 0; k < nwin; ++k) {
      Segment s;
      s.channel = ch;
      s.origin = k * window;
      s.x = decimate_window(std::span<const float>(x.data() + s.origin, size_t(window)),
                            downsample);
      s.label = 0;
      for (const auto& e : rec.truth[size_t(ch)])
        if (!e.artefact && e.t >= s.origin && e.t < s.origin + window) {
          s.label = 1;
          break;
        }
      out.push_back(std::move(s));
    }
  }
  return out;
}

// a channel is active as soon as any of its windows classifies as neural
inline std::set<int> channel_select(const NetworkModel& cnn1,
                                    const std::vector<Segment>& segments) {
  std::set<int> active;
  for (const auto& s : segments) {
    if (active.count(s.channel)) continue;
    if (predict(cnn1, s.x) == 1) active.insert(s.channel);
  }
  return active;
}

// ---- artefact removal ------------------------------------------------------------

inline constexpr int kClassSpike = 0;
inline constexpr int kClassArtefact = 1;
inline constexpr int kClassNoise = 2;

struct ArtefactFilter {
  std::vector<Detection> kept;
  int64_t discarded = 0;
};

inline ArtefactFilter remove_artefacts(const NetworkModel& cnn2,
                                       const std::vector<Detection>& detections) {
  ArtefactFilter out;
  for (const auto& d : detections) {
    if (predict(cnn2, d.x) == kClassSpike) out.kept.push_back(d);
    else ++out.discarded;
  }
  return out;
}

// ---- training corpora -------------------------------------------------------------

// {spike, artefact, noise} segments cut from a recording's ground truth
inline Dataset make_segment_dataset(const Recording& rec, uint64_t seed = 1) {
  Dataset ds;
  for (int ch = 0; ch < rec.channel_count(); ++ch) {
    const auto& x = rec.channels[size_t(ch)];
    const int64_t n = int64_t(x.size());
    auto cut = [&](int64_t peak) {
      std::vector<double> seg(kSegmentLen);
      for (int i = 0; i < kSegmentLen; ++i) seg[size_t(i)] = double(x[size_t(peak - kPeakOffset + i)]);
      return seg;
    };
    std::vector<int64_t> events;
    for (const auto& e : rec.truth[size_t(ch)]) {
      events.push_back(e.t);
      if (e.t - kPeakOffset < 0 || e.t + (kSegmentLen - kPeakOffset) > n) continue;
      ds.x.push_back(cut(e.t));
      ds.y.push_back(e.artefact ? kClassArtefact : kClassSpike);
    }
    // noise windows: centered away from every event
    std::mt19937_64 rng(seed + uint64_t(ch) * 7919);
    std::uniform_int_distribution<int64_t> pos(kPeakOffset, n - (kSegmentLen - kPeakOffset) - 1);
    const int64_t want = std::max<int64_t>(8, int64_t(rec.truth[size_t(ch)].size()) / 2);
    int64_t made = 0;
    for (int tries = 0; tries < 20000 && made < want; ++tries) {
      const int64_t p = pos(rng);
      bool clear = true;
      for (int64_t e : events)
        if (std::llabs(e - p) < 2 * kSegmentLen) {
          clear = false;
          break;
        }
      if (!clear) continue;
      ds.x.push_back(cut(p));
      ds.y.push_back(kClassNoise);
      ++made;
    }
  }
  return ds;
}

// {non-neural, neural} decimated windows for the channel-selection model
inline Dataset make_channel_dataset(const Recording& rec, int window = kSelectWindow,
                                    int downsample = kDownsample) {
  Dataset ds;
  for (auto& s : segment_for_channel_selection(rec, window, downsample)) {
    ds.x.push_back(std::move(s.x));
    ds.y.push_back(s.label);
  }
  return ds;
}

// ---- PCA -----------------------------------------------------------------------

struct PcaResult {
  int n = 0, dim = 0, comps = 0;
  std::vector<double> features;     // n x comps, row-major
  std::vector<double> components;   // comps x dim, row-major
  std::vector<double> explained;    // eigenvalues, descending
  std::vector<double> mean;         // dim

  double feat(int i, int c) const { return features[size_t(i) * comps + c]; }
};

inline PcaResult pca_project(const std::vector<std::vector<double>>& rows, int n_components = 2) {
  const int n = int(rows.size());
  if (n < n_components)
    throw std::invalid_argument("pca_project: fewer segments than components");
  const int d = int(rows[0].size());
  for (const auto& r : rows)
    if (int(r.size()) != d) throw std::invalid_argument("pca_project: ragged rows");
  PcaResult res;
  res.n = n;
  res.dim = d;
  res.comps = n_components;
  res.mean.assign(size_t(d), 0.0);
  for (const auto& r : rows)
    for (int j = 0; j < d; ++j) res.mean[size_t(j)] += r[size_t(j)] / double(n);
  Eigen::MatrixXd X(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) X(i, j) = rows[size_t(i)][size_t(j)] - res.mean[size_t(j)];
  const double denom = n > 1 ? double(n - 1) : 1.0;
  Eigen::MatrixXd cov = X.transpose() * X / denom;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw std::runtime_error("pca_project: eigensolver failed");
  for (int c = 0; c < n_components; ++c) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - c);  // descending eigenvalues
    int arg = 0;
    for (int j = 1; j < d; ++j)
      if (std::abs(v(j)) > std::abs(v(arg))) arg = j;
    if (v(arg) < 0) v = -v;                                 // deterministic sign
    res.explained.push_back(std::max(0.0, es.eigenvalues()(d - 1 - c)));
    for (int j = 0; j < d; ++j) res.components.push_back(v(j));
  }
  res.features.resize(size_t(n) * n_components);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < n_components; ++c) {
      double dot = 0;
      for (int j = 0; j < d; ++j)
        dot += X(i, j) * res.components[size_t(c) * d + size_t(j)];
      res.features[size_t(i) * n_components + size_t(c)] = dot;
    }
  return res;
}

inline PcaResult pca_project(const std::vector<Detection>& det, int n_components = 2) {
  std::vector<std::vector<double>> rows;
  rows.reserve(det.size());
  for (const auto& d : det) rows.push_back(d.x);
  return pca_project(rows, n_components);
}

// ---- k-means ----------------------------------------------------------------------

struct KMeansResult {
  std::vector<int> labels;
  std::vector<std::vector<double>> centroids;
  std::vector<double> inertia_history;   // after every assignment pass
  int iterations = 0;
};

inline KMeansResult kmeans_cluster(const std::vector<std::vector<double>>& pts, int k,
                                   uint64_t seed, int max_iters = 300) {
  const int n = int(pts.size());
  if (k < 1 || k > n) throw std::invalid_argument("kmeans_cluster: need 1 <= k <= points");
  const int d = int(pts[0].size());
  auto dist2 = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (int j = 0; j < d; ++j) s += (a[size_t(j)] - b[size_t(j)]) * (a[size_t(j)] - b[size_t(j)]);
    return s;
  };
  std::mt19937_64 rng(seed);
  KMeansResult res;
  // k-means++ style seeding with deterministic cumulative-sum sampling
  res.centroids.push_back(pts[std::uniform_int_distribution<size_t>(0, size_t(n) - 1)(rng)]);
  std::vector<double> best(size_t(n), 0.0);
  while (int(res.centroids.size()) < k) {
    double total = 0;
    for (int i = 0; i < n; ++i) {
      double m = dist2(pts[size_t(i)], res.centroids[0]);
      for (size_t c = 1; c < res.centroids.size(); ++c)
        m = std::min(m, dist2(pts[size_t(i)], res.centroids[c]));
      best[size_t(i)] = m;
      total += m;
    }
    size_t chosen = 0;
    if (total > 0) {
      const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      double cum = 0;
      chosen = size_t(n) - 1;
      for (int i = 0; i < n; ++i) {
        cum += best[size_t(i)];
        if (cum > u) {
          chosen = size_t(i);
          break;
        }
      }
    } else {
      chosen = std::uniform_int_distribution<size_t>(0, size_t(n) - 1)(rng);
    }
    res.centroids.push_back(pts[chosen]);
  }

  res.labels.assign(size_t(n), 0);
  for (int it = 0; it < max_iters; ++it) {
    bool changed = false;
    double inertia = 0;
    for (int i = 0; i < n; ++i) {
      int bi = 0;
      double bd = dist2(pts[size_t(i)], res.centroids[0]);
      for (int c = 1; c < k; ++c) {
        const double dd = dist2(pts[size_t(i)], res.centroids[size_t(c)]);
        if (dd < bd) {
          bd = dd;
          bi = c;
        }
      }
      if (res.labels[size_t(i)] != bi) changed = true;
      res.labels[size_t(i)] = bi;
      inertia += bd;
    }
    res.inertia_history.push_back(inertia);
    res.iterations = it + 1;
    if (!changed && it > 0) break;
    std::vector<std::vector<double>> sums(size_t(k), std::vector<double>(size_t(d), 0.0));
    std::vector<int> counts(size_t(k), 0);
    for (int i = 0; i < n; ++i) {
      ++counts[size_t(res.labels[size_t(i)])];
      for (int j = 0; j < d; ++j) sums[size_t(res.labels[size_t(i)])][size_t(j)] += pts[size_t(i)][size_t(j)];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[size_t(c)] == 0) {
        // re-seed an empty cluster at the point farthest from its centroid
        int far = 0;
        double fd = -1;
        for (int i = 0; i < n; ++i) {
          const double dd = dist2(pts[size_t(i)], res.centroids[size_t(res.labels[size_t(i)])]);
          if (dd > fd) {
            fd = dd;
            far = i;
          }
        }
        res.centroids[size_t(c)] = pts[size_t(far)];
      } else {
        for (int j = 0; j < d; ++j)
          res.centroids[size_t(c)][size_t(j)] = sums[size_t(c)][size_t(j)] / counts[size_t(c)];
      }
    }
  }
  return res;
}

// ---- sorting metrics -----------------------------------------------------------------

struct PredictedEvent {
  int channel = 0;
  int64_t t = 0;
  int label = 0;      // cluster id
};

struct SortingMetrics {
  int64_t dts = 0, fps = 0, ms = 0, nts = 0, tpcc = 0;
  double cacc = 0.0;
  bool valid = false;  // false when NTS <= 0
};

// Greedy nearest matching in time order within +/-tol per channel, then one
// global label permutation maximizing correctly classified matches.
inline SortingMetrics compute_cacc(const std::vector<PredictedEvent>& preds,
                                   const std::vector<std::vector<SpikeEvent>>& truth,
                                   int tol = 10) {
  SortingMetrics m;
  std::vector<std::pair<int, int>> matches;  // (pred label, true class)
  for (int ch = 0; ch < int(truth.size()); ++ch) {
    std::vector<PredictedEvent> p;
    for (const auto& e : preds)
      if (e.channel == ch) p.push_back(e);
    std::stable_sort(p.begin(), p.end(),
                     [](const PredictedEvent& a, const PredictedEvent& b) { return a.t < b.t; });
    const auto& tr = truth[size_t(ch)];
    std::vector<bool> used(tr.size(), false);
    for (const auto& e : p) {
      int best = -1;
      int64_t bd = tol + 1;
      for (size_t i = 0; i < tr.size(); ++i) {
        if (used[i]) continue;
        const int64_t dd = std::llabs(tr[i].t - e.t);
        if (dd <= tol && dd < bd) {
          bd = dd;
          best = int(i);
        }
      }
      if (best < 0 || tr[size_t(best)].artefact) {
        ++m.fps;                       // spurious, or a kept artefact
        if (best >= 0) used[size_t(best)] = true;
      } else {
        used[size_t(best)] = true;
        matches.push_back({e.label, tr[size_t(best)].class_id});
      }
    }
    for (size_t i = 0; i < tr.size(); ++i)
      if (!used[i] && !tr[i].artefact) ++m.ms;
  }
  m.nts = int64_t(matches.size());
  m.dts = m.nts + m.fps + m.ms;

  std::vector<int> labels;
  for (const auto& [pl, tc] : matches)
    if (std::find(labels.begin(), labels.end(), pl) == labels.end()) labels.push_back(pl);
  std::sort(labels.begin(), labels.end());
  if (int(labels.size()) > 3)
    throw std::invalid_argument("compute_cacc: more predicted labels than neuron classes");
  std::array<int, 3> classes{1, 2, 3};
  int64_t besttp = 0;
  std::sort(classes.begin(), classes.end());
  do {
    int64_t tp = 0;
    for (const auto& [pl, tc] : matches) {
      const auto it = std::find(labels.begin(), labels.end(), pl);
      const size_t idx = size_t(it - labels.begin());
      if (classes[idx] == tc) ++tp;
    }
    besttp = std::max(besttp, tp);
  } while (std::next_permutation(classes.begin(), classes.end()));
  m.tpcc = besttp;
  if (m.nts > 0) {
    m.valid = true;
    m.cacc = 100.0 * double(m.tpcc) / double(m.nts);
  }
  return m;
}

inline SortingMetrics compute_cacc(const std::vector<PredictedEvent>& preds,
                                   const std::vector<SpikeEvent>& truth, int tol = 10) {
  return compute_cacc(preds, std::vector<std::vector<SpikeEvent>>{truth}, tol);
}

// ---- supply-voltage power scaling ------------------------------------------------------

inline double power_scale_factor(double v_base, double v_scale) {
  if (v_base <= 0 || v_scale <= 0)
    throw std::invalid_argument("power_scale_factor: voltages must be positive");
  return (v_base * v_base) / (v_scale * v_scale);
}

// convention: the scaling factor is applied as its nearest integer (min 1)
inline double downscale_power(double power, double v_base, double v_scale) {
  const double df = std::max(1.0, std::round(power_scale_factor(v_base, v_scale)));
  return power / df;
}

// ---- end-to-end run ----------------------------------------------------------------------

struct SortConfig {
  int k = 3;
  uint64_t seed = 1;
  int match_tol = 10;
  double threshold_mult = 4.0;
  bool use_channel_select = true;
};

struct SortOutcome {
  std::set<int> active_channels;
  int64_t detections = 0;
  int64_t kept = 0, discarded = 0;
  SortingMetrics metrics;
};

// cnn1 may be null (no channel gating); cnn2 filters detected segments.
inline SortOutcome run_spike_sorting(const Recording& rec, const NetworkModel* cnn1,
                                     const NetworkModel& cnn2, const SortConfig& cfg = {}) {
  SortOutcome out;
  if (cnn1 && cfg.use_channel_select) {
    out.active_channels = channel_select(*cnn1, segment_for_channel_selection(rec));
  } else {
    for (int c = 0; c < rec.channel_count(); ++c) out.active_channels.insert(c);
  }
  std::vector<Detection> det;
  for (int ch : out.active_channels) {
    auto d = detect_events(std::span<const float>(rec.channels[size_t(ch)]), ch,
                           cfg.threshold_mult);
    det.insert(det.end(), d.begin(), d.end());
  }
  out.detections = int64_t(det.size());
  auto filt = remove_artefacts(cnn2, det);
  out.kept = int64_t(filt.kept.size());
  out.discarded = filt.discarded;

  std::vector<PredictedEvent> events;
  if (int(filt.kept.size()) >= cfg.k && cfg.k >= 1) {
    auto pca = pca_project(filt.kept, 2);
    std::vector<std::vector<double>> feats(filt.kept.size(), std::vector<double>(2));
    for (size_t i = 0; i < filt.kept.size(); ++i) {
      feats[i][0] = pca.feat(int(i), 0);
      feats[i][1] = pca.feat(int(i), 1);
    }
    auto km = kmeans_cluster(feats, cfg.k, cfg.seed);
    for (size_t i = 0; i < filt.kept.size(); ++i)
      events.push_back({filt.kept[i].channel, filt.kept[i].t, km.labels[i]});
  } else {
    for (const auto& dd : filt.kept) events.push_back({dd.channel, dd.t, 0});
  }
  out.metrics = compute_cacc(events, rec.truth, cfg.match_tol);
  return out;
}

// ---- results table -------------------------------------------------------------------------

struct SortReportRow {
  std::string dataset;
  double sigma = 0.0;
  int64_t spikes = 0;
  double cacc = 0.0;
};

// dataset/noise grid with a plain-mean summary row
inline std::string sorting_report_csv(const std::vector<SortReportRow>& rows) {
  std::ostringstream os;
  os << "dataset,noise_sigma,spikes,cacc_percent\n";
  double sum = 0;
  for (const auto& r : rows) {
    os << r.dataset << ',' << r.sigma << ',' << r.spikes << ',' << r.cacc << '\n';
    sum += r.cacc;
  }
  if (!rows.empty()) os << "average,,," << sum / double(rows.size()) << '\n';
  return os.str();
}

}  // namespace dsd
