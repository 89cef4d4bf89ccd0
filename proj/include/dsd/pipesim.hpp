#pragma once
// Cycle-accounting simulator of the block pipeline that executes the projected
// fixed-point network: signal memory, conv cores, fused mapping blocks, the
// classifier and a scoreboard, chained by a ready/fetch handshake. Arithmetic
// is bit-identical to the quantized forward pass; cycle counts depend only on
// shapes and resource allocation, never on data.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "dsd/network.hpp"

namespace dsd {

struct PipelineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kMacsPerEngine = 3;        // one engine multiplies a full kernel tap set
inline constexpr int kClassifierMacs = 2;
inline constexpr int kClassifierDrainCycles = 4; // streaming consumer: tail after the last input
inline constexpr int kScoreboardCycles = 3;

// ---- block-level simulation -------------------------------------------------

struct ConvSim {
  QAct out;
  int64_t compute_cycles = 0;
};

// One conv core split across `engines` position ranges. Every engine walks its
// own chunk with the shared per-position routine, so the concatenated output
// cannot depend on the split.
inline ConvSim simulate_conv_block(const Conv1D& c, const QAct& in, const QFormat& act,
                                   int engines) {
  require_quantized(c.q, "simulate_conv_block");
  if (engines < 1) throw std::invalid_argument("simulate_conv_block: engines must be >= 1");
  const QFormat accf = acc_format(c.q.wq, act);
  const int pad = c.pad();
  const int n_out = in.len + 2 * pad - (c.kernel - 1);
  if (n_out <= 0) throw PipelineError("conv block output would be empty");
  ConvSim sim;
  sim.out = QAct{n_out, c.out_ch, std::vector<int32_t>(size_t(n_out) * c.out_ch, 0)};
  const int bias_shift = bias_shift_for(c.q, accf);
  const int chunk = (n_out + engines - 1) / engines;
  for (int e = 0; e < engines; ++e) {
    const int lo = e * chunk;
    const int hi = std::min(n_out, lo + chunk);
    for (int j = lo; j < hi; ++j) {
      for (int co = 0; co < c.out_ch; ++co) {
        int32_t acc = int32_t(saturate_raw(int64_t(c.q.b[size_t(co)]) << bias_shift, accf));
        for (int t = 0; t < c.kernel; ++t) {
          int p = j + t - pad;
          if (p < 0 || p >= in.len) continue;
          for (int ci = 0; ci < c.in_ch; ++ci) {
            int64_t w = c.q.w[size_t(t * c.in_ch + ci) * size_t(c.out_ch) + size_t(co)];
            acc = sat_add_acc(acc, w * in.at(p, ci), accf);
          }
        }
        sim.out.at(j, co) = rescale_raw(acc, accf.frac_bits, act);
      }
    }
  }
  sim.compute_cycles = int64_t(chunk) * c.in_ch * c.out_ch;
  return sim;
}

// A fused block: projection-out, ReLU, optional pool, optional projection-in.
struct FusedSpec {
  Conv1D proj_out;              // pointwise expansion to m channels
  bool pool = false;
  std::optional<Conv1D> proj_in;  // pointwise contraction for the next core
};

struct FusedSim {
  QAct out;
  int64_t compute_cycles = 0;
  int m = 0;                    // widened channel count
};

inline FusedSim simulate_fused_block(const FusedSpec& spec, const QAct& in,
                                     const QFormat& act, int mappers) {
  if (mappers < 1) throw std::invalid_argument("simulate_fused_block: mappers must be >= 1");
  if (!spec.proj_out.pointwise()) throw PipelineError("fused block: projection-out must be pointwise");
  FusedSim sim;
  sim.m = spec.proj_out.out_ch;
  QAct widened = conv_forward_q(spec.proj_out, in, act);
  for (auto& v : widened.raw) v = std::max(0, v);
  if (spec.pool) {
    QAct pooled{widened.len / 2, widened.ch,
                std::vector<int32_t>(size_t(widened.len / 2) * widened.ch, 0)};
    for (int j = 0; j < pooled.len; ++j)
      for (int c2 = 0; c2 < pooled.ch; ++c2)
        pooled.at(j, c2) = std::max(widened.at(2 * j, c2), widened.at(2 * j + 1, c2));
    widened = std::move(pooled);
  }
  if (spec.proj_in) {
    if (!spec.proj_in->pointwise()) throw PipelineError("fused block: projection-in must be pointwise");
    sim.out = conv_forward_q(*spec.proj_in, widened, act);
  } else {
    sim.out = std::move(widened);
  }
  const int n_out = sim.out.len;
  sim.compute_cycles = int64_t((n_out + mappers - 1) / mappers) * sim.m;
  return sim;
}

// ---- pipeline construction ---------------------------------------------------

enum class BlockKind { SignalMemory, Conv, Fused, Classifier, Scoreboard };

inline const char* kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::SignalMemory: return "signal_memory";
    case BlockKind::Conv: return "conv";
    case BlockKind::Fused: return "fused";
    case BlockKind::Classifier: return "classifier";
    case BlockKind::Scoreboard: return "scoreboard";
  }
  return "?";
}

struct PipelineBlock {
  std::string name;
  BlockKind kind{};
  int macs = kMacsPerEngine;
  // conv
  Conv1D core;
  // fused
  FusedSpec fused;
  // classifier
  FullyConnected fc_in, fc_out;
  // derived shape info
  int in_len = 0, in_ch = 0, out_len = 0, out_ch = 0;

  int engines() const { return std::max(1, macs / kMacsPerEngine); }
  int mappers() const { return macs; }
};

// Decomposes a quantized projected model into pipeline blocks. The layer
// grammar is strict: core conv, then pointwise expansion + ReLU (+ pool)
// (+ pointwise contraction), repeated, finishing with two fc layers.
inline std::vector<PipelineBlock> build_pipeline(const NetworkModel& m) {
  if (!m.quantized)
    throw PipelineError("build_pipeline: model must be quantized");
  auto shapes = infer_shapes(m);
  std::vector<PipelineBlock> blocks;
  {
    PipelineBlock sm;
    sm.name = "signal_memory";
    sm.kind = BlockKind::SignalMemory;
    sm.macs = 1;
    sm.out_len = m.input_len;
    sm.out_ch = m.input_ch;
    blocks.push_back(sm);
  }
  size_t i = 0;
  int conv_no = 0;
  const auto& L = m.layers;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok)
      throw PipelineError("build_pipeline: model is not in fused-pipeline form: " + what +
                          " at layer " + std::to_string(i));
  };
  while (i < L.size()) {
    if (std::holds_alternative<Dropout>(L[i])) { ++i; continue; }
    if (const auto* c = std::get_if<Conv1D>(&L[i])) {
      expect(!c->pointwise(), "unexpected pointwise conv outside a fused group");
      ++conv_no;
      PipelineBlock cb;
      cb.name = "conv" + std::to_string(conv_no);
      cb.kind = BlockKind::Conv;
      cb.core = *c;
      cb.in_len = shapes[i].len;
      cb.in_ch = shapes[i].ch;
      cb.out_len = shapes[i + 1].len;
      cb.out_ch = shapes[i + 1].ch;
      blocks.push_back(cb);
      ++i;
      // fused group: pointwise expand, relu, optional pool, optional contract
      const auto* po = i < L.size() ? std::get_if<Conv1D>(&L[i]) : nullptr;
      expect(po && po->pointwise(), "expected pointwise expansion after core conv");
      PipelineBlock fb;
      fb.name = "fused" + std::to_string(conv_no);
      fb.kind = BlockKind::Fused;
      fb.fused.proj_out = *po;
      fb.in_len = shapes[i].len;
      fb.in_ch = shapes[i].ch;
      ++i;
      expect(i < L.size() && std::holds_alternative<ReLU>(L[i]), "expected relu after expansion");
      ++i;
      if (i < L.size() && std::holds_alternative<MaxPool1D>(L[i])) {
        fb.fused.pool = true;
        ++i;
      }
      while (i < L.size() && std::holds_alternative<Dropout>(L[i])) ++i;
      if (i < L.size()) {
        if (const auto* pi = std::get_if<Conv1D>(&L[i]); pi && pi->pointwise()) {
          fb.fused.proj_in = *pi;
          ++i;
        }
      }
      fb.out_len = shapes[i].len;
      fb.out_ch = shapes[i].ch;
      blocks.push_back(fb);
      continue;
    }
    if (const auto* f = std::get_if<FullyConnected>(&L[i])) {
      PipelineBlock cl;
      cl.name = "classifier";
      cl.kind = BlockKind::Classifier;
      cl.macs = kClassifierMacs;
      cl.fc_in = *f;
      cl.in_len = shapes[i].len;
      cl.in_ch = shapes[i].ch;
      ++i;
      const auto* f2 = i < L.size() ? std::get_if<FullyConnected>(&L[i]) : nullptr;
      expect(f2 != nullptr, "expected a second fc layer in the classifier");
      cl.fc_out = *f2;
      ++i;
      expect(i < L.size() && std::holds_alternative<ReLU>(L[i]), "expected final relu");
      ++i;
      expect(i == L.size(), "trailing layers after the classifier");
      cl.out_len = 1;
      cl.out_ch = cl.fc_out.out_dim;
      blocks.push_back(cl);
      PipelineBlock sb;
      sb.name = "scoreboard";
      sb.kind = BlockKind::Scoreboard;
      sb.macs = 1;
      sb.in_ch = cl.out_ch;
      blocks.push_back(sb);
      return blocks;
    }
    expect(false, "unexpected layer");
  }
  throw PipelineError("build_pipeline: model has no classifier stage");
}

// ---- resource allocation ------------------------------------------------------

struct BlockAlloc {
  std::string name;
  BlockKind kind{};
  int macs = 0;
  int64_t cycles = 0;
  bool attained = true;    // false when even the maximum allocation misses the budget
};

inline int64_t conv_cycles(int n_out, int in_ch, int out_ch, int engines) {
  return int64_t((n_out + engines - 1) / engines) * in_ch * out_ch;
}
inline int64_t fused_cycles(int n_out, int m, int mappers) {
  return int64_t((n_out + mappers - 1) / mappers) * m;
}

// Smallest per-block engine/mapper counts whose compute time fits the cycle
// budget. The budget is slackened a little: the reference operating point
// treats a conv pass in the low thirties as "about" the budget.
inline std::vector<BlockAlloc> allocate_resources(const std::vector<PipelineBlock>& blocks,
                                                  int budget, double slack = 0.1,
                                                  const std::map<std::string, int>* overrides = nullptr) {
  if (budget < 1) throw std::invalid_argument("allocate_resources: budget must be >= 1");
  if (slack < 0) throw std::invalid_argument("allocate_resources: negative slack");
  const int64_t eff = int64_t(std::floor(double(budget) * (1.0 + slack)));
  std::vector<BlockAlloc> out;
  for (const auto& b : blocks) {
    BlockAlloc a;
    a.name = b.name;
    a.kind = b.kind;
    if (overrides && overrides->count(b.name)) {
      a.macs = overrides->at(b.name);
      if (a.macs < 1) throw std::invalid_argument("allocate_resources: override must be >= 1");
      switch (b.kind) {
        case BlockKind::Conv: {
          int e = std::max(1, a.macs / kMacsPerEngine);
          a.cycles = conv_cycles(b.out_len, b.in_ch, b.out_ch, e);
          break;
        }
        case BlockKind::Fused:
          a.cycles = fused_cycles(b.out_len, b.fused.proj_out.out_ch, a.macs);
          break;
        default:
          a.cycles = 0;
      }
      a.attained = a.cycles <= eff;
      out.push_back(a);
      continue;
    }
    switch (b.kind) {
      case BlockKind::SignalMemory:
        a.macs = 1;
        a.cycles = 0;
        break;
      case BlockKind::Conv: {
        int e = 1;
        while (conv_cycles(b.out_len, b.in_ch, b.out_ch, e) > eff && e < b.out_len) ++e;
        a.cycles = conv_cycles(b.out_len, b.in_ch, b.out_ch, e);
        a.attained = a.cycles <= eff;
        a.macs = e * kMacsPerEngine;
        break;
      }
      case BlockKind::Fused: {
        const int m = b.fused.proj_out.out_ch;
        int p = 1;
        while (fused_cycles(b.out_len, m, p) > eff && p < b.out_len) ++p;
        a.cycles = fused_cycles(b.out_len, m, p);
        a.attained = a.cycles <= eff;
        a.macs = p;
        break;
      }
      case BlockKind::Classifier:
        a.macs = kClassifierMacs;
        a.cycles = kClassifierDrainCycles;
        break;
      case BlockKind::Scoreboard:
        a.macs = 1;
        a.cycles = kScoreboardCycles;
        break;
    }
    out.push_back(a);
  }
  return out;
}

// ---- pipeline execution --------------------------------------------------------

struct PipelineOptions {
  int handshake_cycles = 2;        // per array transfer between adjacent blocks
  int budget_cycles = 30;
  double budget_slack = 0.1;
  std::map<std::string, int> mac_overrides;
  int batches = 3;                 // tokens pushed through (>=2 measures the interval)
  std::string stall_block;         // fault injection: this block never accepts input
};

struct BlockReport {
  std::string name;
  std::string kind;
  int macs = 0;
  int64_t compute_cycles = 0;      // per batch
  int64_t handshake_cycles = 0;    // per batch (incoming transfer)
  int64_t first_start = 0, first_end = 0;
};

struct PipelineRun {
  int label = -1;
  std::vector<int32_t> scores;
  int64_t latency_cycles = 0;            // input available -> scoreboard done, batch 0
  int64_t initiation_interval = 0;       // steady-state cycles between results
  int64_t total_cycles = 0;
  std::vector<BlockReport> blocks;

  std::string trace_csv() const {
    std::ostringstream os;
    os << "block,kind,macs,compute_cycles,handshake_cycles,first_start,first_end\n";
    for (const auto& b : blocks)
      os << b.name << ',' << b.kind << ',' << b.macs << ',' << b.compute_cycles << ','
         << b.handshake_cycles << ',' << b.first_start << ',' << b.first_end << '\n';
    return os.str();
  }
  nlohmann::json to_json(double freq_hz) const {
    nlohmann::json jb = nlohmann::json::array();
    for (const auto& b : blocks)
      jb.push_back({{"name", b.name},
                    {"kind", b.kind},
                    {"macs", b.macs},
                    {"compute_cycles", b.compute_cycles},
                    {"handshake_cycles", b.handshake_cycles}});
    return nlohmann::json{{"label", label},
                          {"scores", scores},
                          {"latency_cycles", latency_cycles},
                          {"initiation_interval_cycles", initiation_interval},
                          {"frequency_hz", freq_hz},
                          {"latency_seconds", double(latency_cycles) / freq_hz},
                          {"interval_seconds", double(initiation_interval) / freq_hz},
                          {"blocks", jb}};
  }
};

inline double cycles_to_time(int64_t cycles, double freq_hz) {
  if (freq_hz <= 0) throw std::invalid_argument("cycles_to_time: frequency must be positive");
  return double(cycles) / freq_hz;
}

namespace detail {

// compute a block's output token and its cycle cost under the given allocation
inline std::pair<QAct, int64_t> block_apply(const PipelineBlock& b, const BlockAlloc& a,
                                            const QAct& in, const QFormat& act) {
  switch (b.kind) {
    case BlockKind::Conv: {
      auto sim = simulate_conv_block(b.core, in, act, std::max(1, a.macs / kMacsPerEngine));
      return {std::move(sim.out), sim.compute_cycles};
    }
    case BlockKind::Fused: {
      auto sim = simulate_fused_block(b.fused, in, act, a.macs);
      return {std::move(sim.out), sim.compute_cycles};
    }
    case BlockKind::Classifier: {
      // the token arrives position-major, which is exactly the flatten order
      NetworkModel sub;
      sub.input_len = in.len;
      sub.input_ch = in.ch;
      sub.class_count = b.fc_out.out_dim;
      sub.act_format = act;
      sub.quantized = true;
      sub.layers.push_back(b.fc_in);
      sub.layers.push_back(b.fc_out);
      sub.layers.push_back(ReLU{});
      auto raw = forward_quantized_raw(sub, in.raw);
      return {QAct{1, int(raw.size()), raw}, kClassifierDrainCycles};
    }
    case BlockKind::Scoreboard:
      return {in, kScoreboardCycles};
    default:
      return {in, 0};
  }
}

}  // namespace detail

// Drives the handshake: a block asserts ready once its output token is
// latched; the downstream block, when free, asserts fetch and the transfer
// occupies `handshake_cycles` before fetched completes and compute starts.
// A block may receive its next token while an undelivered result is latched,
// but cannot finish computing until the latch drains (single output buffer).
inline PipelineRun run_pipeline(const NetworkModel& m, std::span<const int32_t> input_raw,
                                const PipelineOptions& opt = {}) {
  if (opt.handshake_cycles < 1)
    throw std::invalid_argument("run_pipeline: handshake_cycles must be >= 1");
  if (opt.batches < 1) throw std::invalid_argument("run_pipeline: need at least one batch");
  auto blocks = build_pipeline(m);
  auto alloc = allocate_resources(blocks, opt.budget_cycles, opt.budget_slack,
                                  opt.mac_overrides.empty() ? nullptr : &opt.mac_overrides);
  const QFormat act = m.act_format;
  if (int(input_raw.size()) != m.input_len * m.input_ch)
    throw ShapeError("run_pipeline: input length " + std::to_string(input_raw.size()) +
                     ", expected " + std::to_string(m.input_len * m.input_ch));

  const size_t nb = blocks.size();
  enum class St { Wait, Receiving, Computing, Blocked };
  struct BState {
    St st = St::Wait;
    int64_t rem = 0;
    QAct in_token, out_token, pending;
    bool has_out = false;
    bool has_pending_result = false;
    int64_t busy = 0, shake = 0;
    int64_t first_start = -1, first_end = -1;
    int tokens_done = 0;
  };
  std::vector<BState> st(nb);
  struct Link {
    bool active = false;
    int64_t rem = 0;
  };
  std::vector<Link> links(nb - 1);

  // signal memory holds every batch up front
  QAct input{m.input_len, m.input_ch, std::vector<int32_t>(input_raw.begin(), input_raw.end())};
  int sm_tokens = opt.batches;
  st[0].has_out = true;
  st[0].out_token = input;

  std::vector<int64_t> finish_times;
  QAct final_scores;
  int64_t t = 0;
  const int64_t guard = 1000000 + int64_t(opt.batches) * 100000;

  while (int(finish_times.size()) < opt.batches) {
    bool progress = false;
    // start transfers, downstream first so freed latches propagate upstream
    for (int li = int(nb) - 2; li >= 0; --li) {
      auto& L = links[size_t(li)];
      auto& p = st[size_t(li)];
      auto& c = st[size_t(li) + 1];
      if (!L.active && p.has_out && c.st == St::Wait &&
          blocks[size_t(li) + 1].name != opt.stall_block) {
        L.active = true;
        L.rem = opt.handshake_cycles;
        c.st = St::Receiving;
        c.in_token = std::move(p.out_token);
        p.has_out = false;
        // producer with a blocked result can now latch it
        if (p.has_pending_result) {
          p.out_token = std::move(p.pending);
          p.has_out = true;
          p.has_pending_result = false;
          p.st = St::Wait;
        }
        if (li == 0 && --sm_tokens > 0) {
          st[0].out_token = input;
          st[0].has_out = true;
        }
        progress = true;
      }
    }
    // advance receives/computes by one cycle
    for (size_t bi = 1; bi < nb; ++bi) {
      auto& s = st[bi];
      if (s.st == St::Receiving) {
        auto& L = links[bi - 1];
        --L.rem;
        ++s.shake;
        progress = true;
        if (L.rem == 0) {
          L.active = false;
          auto [tok, cycles] = detail::block_apply(blocks[bi], alloc[bi], s.in_token, act);
          if (s.first_start < 0) s.first_start = t + 1;
          s.pending = std::move(tok);
          s.rem = std::max<int64_t>(1, cycles);
          s.st = St::Computing;
        }
      } else if (s.st == St::Computing) {
        --s.rem;
        ++s.busy;
        progress = true;
        if (s.rem == 0) {
          if (s.first_end < 0) s.first_end = t + 1;
          ++s.tokens_done;
          if (bi == nb - 1) {
            finish_times.push_back(t + 1);
            final_scores = s.pending;
            s.st = St::Wait;
          } else if (!s.has_out) {
            s.out_token = std::move(s.pending);
            s.has_out = true;
            s.st = St::Wait;
          } else {
            s.has_pending_result = true;
            s.st = St::Blocked;
          }
        }
      }
    }
    if (!progress)
      for (size_t li = 0; li + 1 < nb; ++li)
        if (st[li].has_out && !links[li].active)
          throw PipelineError("pipeline deadlock: link " + blocks[li].name + "->" +
                              blocks[li + 1].name + " stalled (consumer never ready)");
    if (!progress)
      throw PipelineError("pipeline deadlock: no block can progress");
    if (++t > guard) throw PipelineError("pipeline exceeded cycle guard; configuration hangs");
  }

  PipelineRun run;
  run.scores.assign(final_scores.raw.begin(), final_scores.raw.end());
  run.label = argmax_label(std::span<const int32_t>(run.scores));
  run.latency_cycles = finish_times.front();
  run.total_cycles = finish_times.back();
  run.initiation_interval =
      finish_times.size() >= 2
          ? finish_times.back() - finish_times[finish_times.size() - 2]
          : finish_times.front();
  for (size_t bi = 0; bi < nb; ++bi) {
    BlockReport br;
    br.name = blocks[bi].name;
    br.kind = kind_name(blocks[bi].kind);
    br.macs = alloc[bi].macs;
    br.compute_cycles = alloc[bi].cycles;
    br.handshake_cycles = bi == 0 ? 0 : opt.handshake_cycles;
    br.first_start = std::max<int64_t>(0, st[bi].first_start);
    br.first_end = std::max<int64_t>(0, st[bi].first_end);
    run.blocks.push_back(br);
  }
  return run;
}

inline PipelineRun run_pipeline(const NetworkModel& m, std::span<const double> input,
                                const PipelineOptions& opt = {}) {
  auto raw = quantize_input(m, input);
  return run_pipeline(m, std::span<const int32_t>(raw), opt);
}

}  // namespace dsd
