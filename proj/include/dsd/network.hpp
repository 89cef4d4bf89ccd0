#pragma once
// 1-D CNN: layer definitions, shape inference, float and fixed-point forward.

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dsd/fixed_point.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Per-layer fixed-point parameters, filled in by quantize_model.
struct LayerQuant {
  bool valid = false;
  TensorQuant wq{}, bq{};
  std::vector<int32_t> w, b;
};

struct Conv1D {
  int kernel = 3;
  int in_ch = 1, out_ch = 1;
  bool same_pad = false;      // pad (kernel-1)/2 zeros each side
  Tensor w;                   // {1, kernel, in_ch, out_ch}
  Tensor bias;                // {1, 1, 1, out_ch}
  LayerQuant q;

  bool pointwise() const { return kernel == 1; }
  int pad() const { return same_pad ? (kernel - 1) / 2 : 0; }
};

struct ReLU {};

struct MaxPool1D {
  int width = 2, stride = 2;
};

struct Dropout {
  double rate = 0.5;
};

struct FullyConnected {
  int in_dim = 0, out_dim = 0;
  Tensor w;                   // {out_dim, in_dim}
  Tensor bias;                // {out_dim}
  LayerQuant q;
};

using Layer = std::variant<Conv1D, ReLU, MaxPool1D, Dropout, FullyConnected>;

struct NetworkModel {
  int input_len = 66;
  int input_ch = 1;
  int class_count = 3;
  QFormat act_format = kSampleFormat;
  bool quantized = false;
  int quant_bits = 0;         // uniform storage width when quantized
  std::vector<Layer> layers;
};

inline Conv1D make_conv(int kernel, int in_ch, int out_ch, bool same_pad = false) {
  Conv1D c;
  c.kernel = kernel;
  c.in_ch = in_ch;
  c.out_ch = out_ch;
  c.same_pad = same_pad;
  c.w = Tensor({1, kernel, in_ch, out_ch});
  c.bias = Tensor({1, 1, 1, out_ch});
  return c;
}

inline FullyConnected make_fc(int in_dim, int out_dim) {
  FullyConnected f;
  f.in_dim = in_dim;
  f.out_dim = out_dim;
  f.w = Tensor({out_dim, in_dim, 1, 1});
  f.bias = Tensor({out_dim, 1, 1, 1});
  return f;
}

// Classifier stack for raw 66-sample segments (the dense starting point).
inline NetworkModel build_original(int input_len = 66, int class_count = 3,
                                   int channels = 50, double dropout = 0.5) {
  NetworkModel m;
  m.input_len = input_len;
  m.class_count = class_count;
  m.layers.push_back(make_conv(3, 1, channels, true));
  m.layers.push_back(ReLU{});
  m.layers.push_back(make_conv(3, channels, channels));
  m.layers.push_back(ReLU{});
  m.layers.push_back(MaxPool1D{});
  m.layers.push_back(make_conv(3, channels, channels));
  m.layers.push_back(ReLU{});
  m.layers.push_back(MaxPool1D{});
  m.layers.push_back(Dropout{dropout});
  int l1 = input_len;                  // same-padded conv
  int l2 = l1 - 2;                     // valid conv
  int l3 = l2 / 2;                     // pool
  int l4 = (l3 - 2) / 2;               // valid conv + pool
  m.layers.push_back(make_fc(l4 * channels, class_count));
  m.layers.push_back(ReLU{});
  return m;
}

// Projected topology with explicit ranks: each conv splits into
// projection-in (1x1), low-rank core, projection-out (1x1); the first conv has
// a single input channel so projection-in is omitted, and the final fusion
// stage has no projection-in (the classifier consumes the widened activations).
struct ProjectedRanks {
  // per conv layer: input rank (0 = none) and output rank
  std::vector<std::pair<int, int>> conv;  // {{0,1},{1,1},{1,2}} reproduces the reference
  int fc_in_rank = 2;
};

inline ProjectedRanks reference_ranks() {
  return ProjectedRanks{{{0, 1}, {1, 1}, {1, 2}}, 2};
}

inline NetworkModel build_projected(int input_len = 66, int class_count = 3,
                                    int channels = 10,
                                    const ProjectedRanks& r = reference_ranks()) {
  if (r.conv.size() != 3) throw std::invalid_argument("build_projected: need 3 conv ranks");
  NetworkModel m;
  m.input_len = input_len;
  m.class_count = class_count;
  int len = input_len;
  // conv1 group: core (same pad) + proj out + relu
  m.layers.push_back(make_conv(3, 1, r.conv[0].second, true));
  m.layers.push_back(make_conv(1, r.conv[0].second, channels));
  m.layers.push_back(ReLU{});
  // conv2 group: proj in + core + proj out + relu + pool
  m.layers.push_back(make_conv(1, channels, r.conv[1].first));
  m.layers.push_back(make_conv(3, r.conv[1].first, r.conv[1].second));
  m.layers.push_back(make_conv(1, r.conv[1].second, channels));
  m.layers.push_back(ReLU{});
  m.layers.push_back(MaxPool1D{});
  len = (len - 2) / 2;
  // conv3 group: proj in + core + proj out + relu + pool
  m.layers.push_back(make_conv(1, channels, r.conv[2].first));
  m.layers.push_back(make_conv(3, r.conv[2].first, r.conv[2].second));
  m.layers.push_back(make_conv(1, r.conv[2].second, channels));
  m.layers.push_back(ReLU{});
  m.layers.push_back(MaxPool1D{});
  len = (len - 2) / 2;
  // fc group: proj in + proj out
  m.layers.push_back(make_fc(len * channels, r.fc_in_rank));
  m.layers.push_back(make_fc(r.fc_in_rank, class_count));
  m.layers.push_back(ReLU{});
  return m;
}

inline int64_t learnable_count(const NetworkModel& m) {
  int64_t n = 0;
  for (const auto& l : m.layers) {
    if (const auto* c = std::get_if<Conv1D>(&l))
      n += c->w.shape.count() + c->bias.shape.count();
    else if (const auto* f = std::get_if<FullyConnected>(&l))
      n += f->w.shape.count() + f->bias.shape.count();
  }
  return n;
}

inline int64_t memory_bytes(int64_t learnables, int bits_per_weight) {
  return (learnables * bits_per_weight + 7) / 8;
}

struct StageShape {
  int len = 0, ch = 0;
  bool operator==(const StageShape&) const = default;
};

// Shape of the activation entering each layer, plus the final output;
// throws ShapeError naming the offending layer.
inline std::vector<StageShape> infer_shapes(const NetworkModel& m) {
  std::vector<StageShape> shapes;
  StageShape s{m.input_len, m.input_ch};
  int idx = 0;
  auto fail = [&](const std::string& what) {
    throw ShapeError("layer " + std::to_string(idx) + ": " + what);
  };
  for (const auto& l : m.layers) {
    shapes.push_back(s);
    if (const auto* c = std::get_if<Conv1D>(&l)) {
      if (c->in_ch != s.ch)
        fail("conv expects " + std::to_string(c->in_ch) + " channels, got " + std::to_string(s.ch));
      int out_len = s.len + 2 * c->pad() - (c->kernel - 1);
      if (out_len <= 0) fail("conv output length would be " + std::to_string(out_len));
      s = {out_len, c->out_ch};
    } else if (std::holds_alternative<MaxPool1D>(l)) {
      if (s.len < 2) fail("maxpool needs length >= 2, got " + std::to_string(s.len));
      s = {s.len / 2, s.ch};
    } else if (const auto* f = std::get_if<FullyConnected>(&l)) {
      if (f->in_dim != s.len * s.ch)
        fail("fc expects " + std::to_string(f->in_dim) + " inputs, got " +
             std::to_string(s.len) + "x" + std::to_string(s.ch));
      s = {1, f->out_dim};
    }
    ++idx;
  }
  shapes.push_back(s);
  if (s.ch != m.class_count || s.len != 1)
    throw ShapeError("network output is " + std::to_string(s.len) + "x" +
                     std::to_string(s.ch) + ", expected 1x" + std::to_string(m.class_count));
  return shapes;
}

// Activations are position-major: value(pos, ch) = v[pos*ch_count + ch].
// The fc layers flatten in the same order, so index = pos*C + ch.
struct Act {
  int len = 0, ch = 0;
  std::vector<double> v;
  double at(int pos, int c) const { return v[size_t(pos) * ch + c]; }
  double& at(int pos, int c) { return v[size_t(pos) * ch + c]; }
};

struct ForwardTrace {
  std::vector<Act> entering;   // activation entering each layer
  Act output;
};

inline Act conv_forward(const Conv1D& c, const Act& in) {
  const int pad = c.pad();
  const int out_len = in.len + 2 * pad - (c.kernel - 1);
  Act out{out_len, c.out_ch, std::vector<double>(size_t(out_len) * c.out_ch, 0.0)};
  for (int j = 0; j < out_len; ++j) {
    for (int co = 0; co < c.out_ch; ++co) {
      double acc = c.bias.at(0, 0, 0, co);
      for (int t = 0; t < c.kernel; ++t) {
        int p = j + t - pad;
        if (p < 0 || p >= in.len) continue;
        for (int ci = 0; ci < c.in_ch; ++ci)
          acc += c.w.at(0, t, ci, co) * in.at(p, ci);
      }
      out.at(j, co) = acc;
    }
  }
  return out;
}

inline std::vector<double> forward(const NetworkModel& m, std::span<const double> x,
                                   ForwardTrace* trace = nullptr) {
  if (int(x.size()) != m.input_len * m.input_ch)
    throw ShapeError("input length " + std::to_string(x.size()) + ", expected " +
                     std::to_string(m.input_len * m.input_ch));
  infer_shapes(m);
  Act a{m.input_len, m.input_ch, std::vector<double>(x.begin(), x.end())};
  for (const auto& l : m.layers) {
    if (trace) trace->entering.push_back(a);
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
      // inference: identity
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
  if (trace) trace->output = a;
  return a.v;
}

// ---- fixed-point forward -------------------------------------------------

struct QAct {
  int len = 0, ch = 0;
  std::vector<int32_t> raw;    // position-major, activation format
  int32_t at(int pos, int c) const { return raw[size_t(pos) * ch + c]; }
  int32_t& at(int pos, int c) { return raw[size_t(pos) * ch + c]; }
};

inline void require_quantized(const LayerQuant& q, const char* what) {
  if (!q.valid) throw std::logic_error(std::string(what) + ": layer has no fixed-point parameters");
}

// Accumulator format for a quantized layer: full 32-bit, fraction =
// weight exponent + activation fraction (so products align exactly).
inline QFormat acc_format(const TensorQuant& wq, const QFormat& act) {
  return QFormat{32, wq.frac_exp + act.frac_bits, true};
}

// Bias raws are stored at an exponent capped to the accumulator's, so the
// alignment shift is always left (exact).
inline int bias_shift_for(const LayerQuant& q, const QFormat& accf) {
  int sh = accf.frac_bits - q.bq.frac_exp;
  if (sh < 0) throw std::logic_error("bias exponent exceeds accumulator fraction");
  return sh;
}

inline QAct conv_forward_q(const Conv1D& c, const QAct& in, const QFormat& act) {
  require_quantized(c.q, "conv_forward_q");
  const QFormat accf = acc_format(c.q.wq, act);
  const int pad = c.pad();
  const int out_len = in.len + 2 * pad - (c.kernel - 1);
  QAct out{out_len, c.out_ch, std::vector<int32_t>(size_t(out_len) * c.out_ch, 0)};
  const int bias_shift = bias_shift_for(c.q, accf);
  for (int j = 0; j < out_len; ++j) {
    for (int co = 0; co < c.out_ch; ++co) {
      int32_t acc = int32_t(saturate_raw(int64_t(c.q.b[co]) << bias_shift, accf));
      for (int t = 0; t < c.kernel; ++t) {
        int p = j + t - pad;
        if (p < 0 || p >= in.len) continue;
        for (int ci = 0; ci < c.in_ch; ++ci) {
          int64_t w = c.q.w[size_t(t * c.in_ch + ci) * c.out_ch + co];
          acc = sat_add_acc(acc, w * in.at(p, ci), accf);
        }
      }
      out.at(j, co) = rescale_raw(acc, accf.frac_bits, act);
    }
  }
  return out;
}

inline std::vector<int32_t> forward_quantized_raw(const NetworkModel& m,
                                                  std::span<const int32_t> xraw) {
  if (!m.quantized) throw std::logic_error("forward_quantized_raw: model is not quantized");
  if (int(xraw.size()) != m.input_len * m.input_ch)
    throw ShapeError("input length " + std::to_string(xraw.size()) + ", expected " +
                     std::to_string(m.input_len * m.input_ch));
  infer_shapes(m);
  const QFormat act = m.act_format;
  QAct a{m.input_len, m.input_ch, std::vector<int32_t>(xraw.begin(), xraw.end())};
  for (const auto& l : m.layers) {
    if (const auto* c = std::get_if<Conv1D>(&l)) {
      a = conv_forward_q(*c, a, act);
    } else if (std::holds_alternative<ReLU>(l)) {
      for (auto& v : a.raw) v = std::max(0, v);
    } else if (std::holds_alternative<MaxPool1D>(l)) {
      QAct out{a.len / 2, a.ch, std::vector<int32_t>(size_t(a.len / 2) * a.ch)};
      for (int j = 0; j < out.len; ++j)
        for (int c2 = 0; c2 < a.ch; ++c2)
          out.at(j, c2) = std::max(a.at(2 * j, c2), a.at(2 * j + 1, c2));
      a = out;
    } else if (std::holds_alternative<Dropout>(l)) {
      // identity
    } else if (const auto* f = std::get_if<FullyConnected>(&l)) {
      require_quantized(f->q, "fc forward");
      const QFormat accf = acc_format(f->q.wq, act);
      const int bias_shift = bias_shift_for(f->q, accf);
      QAct out{1, f->out_dim, std::vector<int32_t>(size_t(f->out_dim), 0)};
      for (int o = 0; o < f->out_dim; ++o) {
        int32_t acc = int32_t(saturate_raw(int64_t(f->q.b[o]) << bias_shift, accf));
        for (int i = 0; i < f->in_dim; ++i)
          acc = sat_add_acc(acc, int64_t(f->q.w[size_t(o) * f->in_dim + i]) * a.raw[i], accf);
        out.raw[o] = rescale_raw(acc, accf.frac_bits, act);
      }
      a = out;
    }
  }
  return a.raw;
}

inline std::vector<int32_t> quantize_input(const NetworkModel& m, std::span<const double> x) {
  std::vector<int32_t> raw(x.size());
  for (size_t i = 0; i < x.size(); ++i) raw[i] = quantize(x[i], m.act_format).raw;
  return raw;
}

inline std::vector<int32_t> forward_quantized(const NetworkModel& m, std::span<const double> x) {
  auto raw = quantize_input(m, x);
  return forward_quantized_raw(m, raw);
}

inline int argmax_label(std::span<const double> scores) {
  return int(std::max_element(scores.begin(), scores.end()) - scores.begin());
}
inline int argmax_label(std::span<const int32_t> scores) {
  return int(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

inline int predict(const NetworkModel& m, std::span<const double> x) {
  if (m.quantized) {
    auto s = forward_quantized(m, x);
    return argmax_label(s);
  }
  auto s = forward(m, x);
  return argmax_label(s);
}

}  // namespace dsd
