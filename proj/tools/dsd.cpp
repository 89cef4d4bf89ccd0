// Batch front-end: synth -> train -> compress -> simulate / sort -> report.
// Exit codes: 0 ok, 1 runtime failure, 2 usage.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsd/compression.hpp"
#include "dsd/model_io.hpp"
#include "dsd/pipesim.hpp"
#include "dsd/recording_io.hpp"
#include "dsd/spikesort.hpp"
#include "dsd/train.hpp"

using dsd::json;
namespace fs = std::filesystem;

namespace {

// FNV-1a over the serialized config; stamped into every output
uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string config_hash(const json& cfg) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(cfg.dump());
  return os.str();
}

void write_text(const fs::path& path, const std::string& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << body;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(1) + "\n"); }

// one segment per line, comma separated; '#' lines ignored
std::vector<std::vector<double>> read_segment_csv(const fs::path& path, int expected_len) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open input batch: " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  int ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::runtime_error(path.string() + ":" + std::to_string(ln) + ": bad value '" +
                                 cell + "'");
      }
    }
    if (expected_len > 0 && int(row.size()) != expected_len)
      throw std::runtime_error(path.string() + ":" + std::to_string(ln) + ": got " +
                               std::to_string(row.size()) + " values, model wants " +
                               std::to_string(expected_len));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("input batch is empty: " + path.string());
  return rows;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

dsd::Dataset dataset_for_target(const dsd::Recording& rec, const std::string& target) {
  if (target == "cnn1") return dsd::make_channel_dataset(rec);
  return dsd::make_segment_dataset(rec);
}

double quantized_accuracy(const dsd::NetworkModel& m, const dsd::Dataset& d) {
  size_t ok = 0;
  for (size_t i = 0; i < d.size(); ++i)
    if (dsd::argmax_label(dsd::forward_quantized(m, d.x[i])) == d.y[i]) ++ok;
  return d.size() ? double(ok) / double(d.size()) : 0.0;
}

std::string history_csv(const dsd::TrainHistory& h, const std::string& hash) {
  std::ostringstream os;
  os << "# config " << hash << "\n";
  os << "epoch,lr,train_loss,train_acc,val_loss,val_acc\n";
  os << std::setprecision(17);
  for (const auto& e : h.epochs)
    os << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.train_acc << ','
       << e.val_loss << ',' << e.val_acc << '\n';
  return os.str();
}

// ---- subcommand payloads ----------------------------------------------------

struct SynthArgs {
  std::string out;
  dsd::SynthConfig cfg;
  double seconds = 2.0;
};

void cmd_synth(const SynthArgs& a) {
  dsd::SynthConfig cfg = a.cfg;
  cfg.seconds = a.seconds;
  json jc{{"tool", "synth"},
          {"channels", cfg.channels},
          {"seconds", cfg.seconds},
          {"sample_rate", cfg.sample_rate},
          {"noise_sigma", cfg.noise_sigma},
          {"spike_rate_hz", cfg.spike_rate_hz},
          {"artefact_rate_hz", cfg.artefact_rate_hz},
          {"artefact_scale", cfg.artefact_scale},
          {"background_rate_hz", cfg.background_rate_hz},
          {"silent_channels", cfg.silent_channels},
          {"seed", cfg.seed}};
  const std::string hash = config_hash(jc);
  auto rec = dsd::generate_synthetic(dsd::default_templates(), cfg);
  dsd::save_recording(a.out, rec);
  write_json(fs::path(a.out) / "run.json",
             json{{"config", jc},
                  {"config_hash", hash},
                  {"spikes", rec.spike_count()},
                  {"artefacts", rec.artefact_count()}});
  std::cout << "wrote " << a.out << ": " << cfg.channels << " channel(s), "
            << rec.spike_count() << " spikes, " << rec.artefact_count()
            << " artefacts (config " << hash << ")\n";
}

struct ConvertArgs {
  std::string samples, events, out;
  double rate = 26400.0, sigma = 0.0;
};

void cmd_convert(const ConvertArgs& a) {
  json jc{{"tool", "convert-dataset"},
          {"samples", a.samples},
          {"events", a.events},
          {"sample_rate", a.rate},
          {"noise_sigma", a.sigma}};
  const std::string hash = config_hash(jc);
  auto rec = dsd::convert_text_export(a.samples, a.events, a.rate, a.sigma);
  dsd::save_recording(a.out, rec);
  write_json(fs::path(a.out) / "run.json",
             json{{"config", jc}, {"config_hash", hash}, {"spikes", rec.spike_count()}});
  std::cout << "wrote " << a.out << ": " << rec.channel_count() << " channel(s), "
            << rec.spike_count() << " spikes (config " << hash << ")\n";
}

struct TrainArgs {
  std::string recording, target = "cnn2", arch = "original";
  std::string out = "model.json", history = "history.csv";
  double train_frac = 0.7, val_frac = 0.15;
  dsd::TrainConfig tc;
};

json train_config_json(const TrainArgs& a) {
  return json{{"tool", "train"},       {"target", a.target},
              {"arch", a.arch},        {"train_frac", a.train_frac},
              {"val_frac", a.val_frac},{"lr", a.tc.initial_lr},
              {"lr_drop", a.tc.lr_drop_factor}, {"lr_period", a.tc.lr_drop_period},
              {"momentum", a.tc.momentum}, {"batch", a.tc.batch_size},
              {"epochs", a.tc.max_epochs}, {"l2", a.tc.l2},
              {"patience", a.tc.patience}, {"seed", a.tc.seed}};
}

void cmd_train(const TrainArgs& a) {
  const json jc = train_config_json(a);
  const std::string hash = config_hash(jc);
  auto rec = dsd::load_recording(a.recording);
  auto all = dataset_for_target(rec, a.target);
  auto split = dsd::split_dataset(all, a.train_frac, a.val_frac, a.tc.seed);
  const int classes = a.target == "cnn1" ? 2 : 3;
  auto m = a.arch == "projected" ? dsd::build_projected(dsd::kSegmentLen, classes)
                                 : dsd::build_original(dsd::kSegmentLen, classes);
  dsd::initialize_weights(m, a.tc.seed);
  auto hist = dsd::train(m, split.train, split.val, a.tc);
  const double test_acc = dsd::evaluate(m, split.test);
  dsd::save_model(m, a.out,
                  json{{"config", jc},
                       {"config_hash", hash},
                       {"best_epoch", hist.best_epoch},
                       {"best_val_accuracy", hist.best_val_acc},
                       {"test_accuracy", test_acc},
                       {"learnables", dsd::learnable_count(m)}});
  write_text(a.history, history_csv(hist, hash));
  std::cout << "trained " << a.arch << " for " << a.target << ": "
            << hist.epochs.size() << " epochs, val " << fmt(hist.best_val_acc)
            << ", test " << fmt(test_acc) << " (" << split.test.size()
            << " segments), config " << hash << "\n"
            << "wrote " << a.out << " and " << a.history << "\n";
}

struct CompressArgs {
  std::string model, recording, target = "cnn2";
  std::string out = "model_q.json", report = "compression.csv", float_out;
  double train_frac = 0.7, val_frac = 0.15;
  uint64_t seed = 1;
  int bits = 0;  // 0 = sweep selection range
  dsd::CompressionConfig cc;
};

void cmd_compress(const CompressArgs& a) {
  json jc{{"tool", "compress"},
          {"target", a.target},
          {"train_frac", a.train_frac},
          {"val_frac", a.val_frac},
          {"seed", a.seed},
          {"bits", a.bits},
          {"projection_targets", a.cc.projection_targets},
          {"prune_iters", a.cc.prune.max_iters},
          {"prune_fraction", a.cc.prune.prune_fraction},
          {"min_filters", a.cc.prune.min_filters},
          {"accuracy_floor", a.cc.prune.accuracy_floor},
          {"calib", a.cc.calib_limit}};
  const std::string hash = config_hash(jc);
  auto m = dsd::load_model(a.model);
  auto rec = dsd::load_recording(a.recording);
  auto split = dsd::split_dataset(dataset_for_target(rec, a.target), a.train_frac,
                                  a.val_frac, a.seed);
  dsd::CompressionConfig cc = a.cc;
  cc.prune.fine_tune.seed = a.seed;
  cc.project_fine_tune.seed = a.seed;
  if (a.bits > 0) cc.selection.bits_min = cc.selection.bits_max = a.bits;
  auto out = dsd::run_compression(m, split, cc);

  const int64_t learnables = dsd::learnable_count(out.final_model);
  const int64_t bytes = dsd::memory_bytes(learnables, out.chosen_bits);
  const double test_float = dsd::evaluate(out.final_float, split.test);
  const double test_quant = quantized_accuracy(out.final_model, split.test);
  dsd::save_model(out.final_model, a.out,
                  json{{"config", jc},
                       {"config_hash", hash},
                       {"provenance", out.provenance},
                       {"bits", out.chosen_bits},
                       {"stable", out.stable},
                       {"learnables", learnables},
                       {"memory_bytes", bytes},
                       {"val_accuracy_float", out.float_acc},
                       {"val_accuracy_quant", out.quant_acc},
                       {"test_accuracy_float", test_float},
                       {"test_accuracy_quant", test_quant}});
  if (!a.float_out.empty())
    dsd::save_model(out.final_float, a.float_out,
                    json{{"config", jc}, {"config_hash", hash}, {"stage", "float"}});
  write_text(a.report, "# config " + hash + "\n" + out.report.to_csv());
  std::cout << "selected " << out.provenance << " at " << out.chosen_bits << " bits: "
            << learnables << " learnables, " << bytes << " bytes, val float/quant "
            << fmt(out.float_acc) << "/" << fmt(out.quant_acc) << ", test float/quant "
            << fmt(test_float) << "/" << fmt(test_quant) << " (config " << hash << ")\n"
            << "wrote " << a.out << " and " << a.report << "\n";
}

struct ClassifyArgs {
  std::string model, input, out;
  bool force_float = false;
};

void cmd_classify(const ClassifyArgs& a) {
  json jc{{"tool", "classify"}, {"model", a.model}, {"input", a.input},
          {"float", a.force_float}};
  const std::string hash = config_hash(jc);
  auto m = dsd::load_model(a.model);
  auto rows = read_segment_csv(a.input, m.input_len);
  const bool use_q = m.quantized && !a.force_float;
  std::ostringstream body;
  body << "# config " << hash << "\n";
  for (const auto& x : rows) {
    int label = use_q ? dsd::argmax_label(dsd::forward_quantized(m, x)) : dsd::predict(m, x);
    body << label << "\n";
  }
  if (a.out.empty()) {
    std::cout << body.str();
  } else {
    write_text(a.out, body.str());
    std::cout << "classified " << rows.size() << " segment(s) with the "
              << (use_q ? "fixed-point" : "float") << " path -> " << a.out << " (config "
              << hash << ")\n";
  }
}

struct SimulateArgs {
  std::string model, input, trace_csv, trace_json;
  int row = 0;
  double freq_hz = 2.5e6;
  dsd::PipelineOptions po;
  std::vector<std::string> mac_specs;
};

void cmd_simulate(const SimulateArgs& a) {
  dsd::PipelineOptions po = a.po;
  for (const auto& spec : a.mac_specs) {
    auto eq = spec.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("bad --mac '" + spec + "', expected block=count");
    po.mac_overrides[spec.substr(0, eq)] = std::stoi(spec.substr(eq + 1));
  }
  json jc{{"tool", "simulate"},
          {"row", a.row},
          {"frequency_hz", a.freq_hz},
          {"handshake", po.handshake_cycles},
          {"budget", po.budget_cycles},
          {"slack", po.budget_slack},
          {"batches", po.batches},
          {"mac", a.mac_specs}};
  const std::string hash = config_hash(jc);
  auto m = dsd::load_model(a.model);
  auto rows = read_segment_csv(a.input, m.input_len);
  if (a.row < 0 || a.row >= int(rows.size()))
    throw std::runtime_error("--row " + std::to_string(a.row) + " out of range, batch has " +
                             std::to_string(rows.size()) + " row(s)");
  auto run = dsd::run_pipeline(m, rows[size_t(a.row)], po);
  const double us = dsd::cycles_to_time(run.initiation_interval, a.freq_hz) * 1e6;
  std::cout << "label " << run.label << " scores";
  for (auto s : run.scores) std::cout << ' ' << s;
  std::cout << "\ninterval " << run.initiation_interval << " cycles = " << us << " us @ "
            << a.freq_hz / 1e6 << " MHz\n"
            << "latency " << run.latency_cycles << " cycles, total " << run.total_cycles
            << " cycles for " << po.batches << " batch(es), config " << hash << "\n";
  if (!a.trace_csv.empty())
    write_text(a.trace_csv, "# config " + hash + "\n" + run.trace_csv());
  if (!a.trace_json.empty()) {
    json j = run.to_json(a.freq_hz);
    j["config_hash"] = hash;
    write_json(a.trace_json, j);
  }
}

struct SortArgs {
  std::string recording, cnn1, cnn2, dataset;
  std::string out_csv = "sorting.csv", out_json = "sorting.json";
  bool no_gate = false;
  dsd::SortConfig sc;
};

void cmd_sort(const SortArgs& a) {
  json jc{{"tool", "sort"},       {"dataset", a.dataset},
          {"k", a.sc.k},          {"seed", a.sc.seed},
          {"tol", a.sc.match_tol},{"threshold", a.sc.threshold_mult},
          {"gate", !a.no_gate && !a.cnn1.empty()}};
  const std::string hash = config_hash(jc);
  auto rec = dsd::load_recording(a.recording);
  dsd::NetworkModel gate;
  const bool have_gate = !a.cnn1.empty();
  if (have_gate) gate = dsd::load_model(a.cnn1);
  auto cls = dsd::load_model(a.cnn2);
  dsd::SortConfig sc = a.sc;
  sc.use_channel_select = have_gate && !a.no_gate;
  auto out = dsd::run_spike_sorting(rec, have_gate ? &gate : nullptr, cls, sc);

  const std::string name =
      a.dataset.empty() ? fs::path(a.recording).filename().string() : a.dataset;
  dsd::SortReportRow row{name, rec.noise_sigma, rec.spike_count(), out.metrics.cacc};
  write_text(a.out_csv, "# config " + hash + "\n" + dsd::sorting_report_csv({row}));
  json actives = json::array();
  for (int c : out.active_channels) actives.push_back(c);
  write_json(a.out_json, json{{"config", jc},
                              {"config_hash", hash},
                              {"dataset", name},
                              {"noise_sigma", rec.noise_sigma},
                              {"true_spikes", rec.spike_count()},
                              {"active_channels", actives},
                              {"detections", out.detections},
                              {"kept", out.kept},
                              {"discarded", out.discarded},
                              {"DTS", out.metrics.dts},
                              {"FPS", out.metrics.fps},
                              {"MS", out.metrics.ms},
                              {"NTS", out.metrics.nts},
                              {"TPCC", out.metrics.tpcc},
                              {"CAcc_percent", out.metrics.cacc},
                              {"valid", out.metrics.valid}});
  std::cout << name << ": CAcc " << fmt(out.metrics.cacc) << "% (NTS " << out.metrics.nts
            << ", DTS " << out.metrics.dts << ", FPS " << out.metrics.fps << ", MS "
            << out.metrics.ms << "), " << out.active_channels.size()
            << " active channel(s), kept " << out.kept << "/" << out.detections
            << " detections, config " << hash << "\n"
            << "wrote " << a.out_csv << " and " << a.out_json << "\n";
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out = "report.csv";
};

void cmd_report(const ReportArgs& a) {
  json jc{{"tool", "report"}, {"inputs", a.inputs}};
  const std::string hash = config_hash(jc);
  std::vector<dsd::SortReportRow> rows;
  for (const auto& p : a.inputs) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot open metrics file: " + p);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw std::runtime_error("invalid JSON in " + p + ": " + e.what());
    }
    if (!j.contains("CAcc_percent"))
      throw std::runtime_error(p + " is not a sort metrics file (no CAcc_percent)");
    rows.push_back({j.value("dataset", p), j.value("noise_sigma", 0.0),
                    j.value("true_spikes", int64_t(0)), j.at("CAcc_percent").get<double>()});
  }
  const std::string csv = "# config " + hash + "\n" + dsd::sorting_report_csv(rows);
  write_text(a.out, csv);
  std::cout << csv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spike-sorting compression & pipeline toolkit"};
  app.require_subcommand(1);

  auto synth = std::make_shared<SynthArgs>();
  auto* s_synth = app.add_subcommand("synth", "generate a labeled synthetic recording");
  s_synth->add_option("--out", synth->out, "output container directory")->required();
  s_synth->add_option("--channels", synth->cfg.channels, "channel count")
      ->default_val(1);
  s_synth->add_option("--seconds", synth->seconds, "duration per channel")->default_val(2.0);
  s_synth->add_option("--rate", synth->cfg.sample_rate, "sample rate, Hz")
      ->default_val(26400.0);
  s_synth->add_option("--noise", synth->cfg.noise_sigma, "background sigma")
      ->default_val(0.05);
  s_synth->add_option("--spike-rate", synth->cfg.spike_rate_hz, "spikes/s per channel")
      ->default_val(20.0);
  s_synth->add_option("--artefact-rate", synth->cfg.artefact_rate_hz, "artefacts/s")
      ->default_val(0.0);
  s_synth->add_option("--artefact-scale", synth->cfg.artefact_scale,
                      "artefact attenuation")
      ->default_val(0.5);
  s_synth->add_option("--background-rate", synth->cfg.background_rate_hz,
                      "background event density, Hz")
      ->default_val(24000.0);
  s_synth->add_option("--silent", synth->cfg.silent_channels,
                      "channels that carry background only");
  s_synth->add_option("--seed", synth->cfg.seed, "RNG seed")->default_val(1);
  s_synth->callback([synth] { cmd_synth(*synth); });

  auto conv = std::make_shared<ConvertArgs>();
  auto* s_conv = app.add_subcommand("convert-dataset",
                                    "build a container from text exports");
  s_conv->add_option("--samples", conv->samples, "one sample per line, single channel")
      ->required()
      ->check(CLI::ExistingFile);
  s_conv->add_option("--events", conv->events, "one event per line: time class artefact_flag")
      ->required()
      ->check(CLI::ExistingFile);
  s_conv->add_option("--out", conv->out, "output container directory")->required();
  s_conv->add_option("--rate", conv->rate, "sample rate, Hz")->default_val(26400.0);
  s_conv->add_option("--sigma", conv->sigma, "recorded noise sigma, if known")
      ->default_val(0.0);
  s_conv->callback([conv] { cmd_convert(*conv); });

  auto tr = std::make_shared<TrainArgs>();
  auto* s_tr = app.add_subcommand("train", "fit a network on a labeled recording");
  s_tr->add_option("--recording", tr->recording, "container directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  s_tr->add_option("--target", tr->target, "cnn1 (channel gate) or cnn2 (classifier)")
      ->check(CLI::IsMember({"cnn1", "cnn2"}))
      ->default_val("cnn2");
  s_tr->add_option("--arch", tr->arch, "original or projected")
      ->check(CLI::IsMember({"original", "projected"}))
      ->default_val("original");
  s_tr->add_option("--out", tr->out, "model file")->default_val("model.json");
  s_tr->add_option("--history", tr->history, "history CSV")->default_val("history.csv");
  s_tr->add_option("--lr", tr->tc.initial_lr, "initial learning rate")->default_val(0.01);
  s_tr->add_option("--lr-drop", tr->tc.lr_drop_factor, "LR drop factor")->default_val(0.1);
  s_tr->add_option("--lr-period", tr->tc.lr_drop_period, "epochs between LR drops")
      ->default_val(5);
  s_tr->add_option("--momentum", tr->tc.momentum, "SGD momentum")->default_val(0.9);
  s_tr->add_option("--batch", tr->tc.batch_size, "mini-batch size")->default_val(256);
  s_tr->add_option("--epochs", tr->tc.max_epochs, "epoch cap")->default_val(200);
  s_tr->add_option("--l2", tr->tc.l2, "L2 penalty on weights")->default_val(1.8);
  s_tr->add_option("--patience", tr->tc.patience, "early-stop patience")->default_val(6);
  s_tr->add_option("--seed", tr->tc.seed, "RNG seed (init, shuffle, split)")->default_val(1);
  s_tr->add_option("--train-frac", tr->train_frac, "train split fraction")->default_val(0.7);
  s_tr->add_option("--val-frac", tr->val_frac, "validation split fraction")
      ->default_val(0.15);
  s_tr->add_flag("--verbose", tr->tc.verbose, "per-epoch stdout");
  s_tr->callback([tr] { cmd_train(*tr); });

  auto cp = std::make_shared<CompressArgs>();
  auto* s_cp = app.add_subcommand("compress",
                                  "prune, project and quantize a trained model");
  s_cp->add_option("--model", cp->model, "trained float model")
      ->required()
      ->check(CLI::ExistingFile);
  s_cp->add_option("--recording", cp->recording, "container directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  s_cp->add_option("--target", cp->target, "dataset flavor, cnn1 or cnn2")
      ->check(CLI::IsMember({"cnn1", "cnn2"}))
      ->default_val("cnn2");
  s_cp->add_option("--out", cp->out, "quantized model file")->default_val("model_q.json");
  s_cp->add_option("--float-out", cp->float_out, "also save the selected float model");
  s_cp->add_option("--report", cp->report, "stage report CSV")
      ->default_val("compression.csv");
  s_cp->add_option("--bits", cp->bits, "force this width instead of sweeping 2..8")
      ->default_val(0);
  s_cp->add_option("--targets", cp->cc.projection_targets,
                   "projection reduction targets in [0,0.9)");
  s_cp->add_option("--prune-iters", cp->cc.prune.max_iters, "pruning iteration cap")
      ->default_val(30);
  s_cp->add_option("--prune-fraction", cp->cc.prune.prune_fraction,
                   "live filters removed per layer per iteration")
      ->default_val(0.2);
  s_cp->add_option("--min-filters", cp->cc.prune.min_filters,
                   "floor of live filters per conv layer")
      ->default_val(10);
  s_cp->add_option("--floor", cp->cc.prune.accuracy_floor,
                   "validation accuracy floor for pruning/selection")
      ->default_val(0.99);
  s_cp->add_option("--calib", cp->cc.calib_limit, "calibration samples for projection")
      ->default_val(512);
  s_cp->add_option("--seed", cp->seed, "split + fine-tune seed")->default_val(1);
  s_cp->add_option("--train-frac", cp->train_frac, "train split fraction")->default_val(0.7);
  s_cp->add_option("--val-frac", cp->val_frac, "validation split fraction")
      ->default_val(0.15);
  s_cp->callback([cp] { cmd_compress(*cp); });

  auto cl = std::make_shared<ClassifyArgs>();
  auto* s_cl = app.add_subcommand("classify", "forward a segment batch through a model");
  s_cl->add_option("--model", cl->model, "model file")->required()->check(CLI::ExistingFile);
  s_cl->add_option("--input", cl->input, "CSV batch, one segment per line")
      ->required()
      ->check(CLI::ExistingFile);
  s_cl->add_option("--out", cl->out, "label file (default: stdout)");
  s_cl->add_flag("--float", cl->force_float, "use the float path even if quantized");
  s_cl->callback([cl] { cmd_classify(*cl); });

  auto sim = std::make_shared<SimulateArgs>();
  auto* s_sim = app.add_subcommand("simulate",
                                   "classify one segment on the cycle-accurate pipeline");
  s_sim->add_option("--model", sim->model, "quantized model file")
      ->required()
      ->check(CLI::ExistingFile);
  s_sim->add_option("--input", sim->input, "CSV batch, one segment per line")
      ->required()
      ->check(CLI::ExistingFile);
  s_sim->add_option("--row", sim->row, "batch row to push through")->default_val(0);
  s_sim->add_option("--freq", sim->freq_hz, "clock, Hz")->default_val(2.5e6);
  s_sim->add_option("--handshake", sim->po.handshake_cycles,
                    "transfer cycles between blocks (9 reproduces the reported interval)")
      ->default_val(9);
  s_sim->add_option("--budget", sim->po.budget_cycles, "per-block cycle budget")
      ->default_val(30);
  s_sim->add_option("--slack", sim->po.budget_slack, "allocator budget slack")
      ->default_val(0.1);
  s_sim->add_option("--batches", sim->po.batches, "tokens pushed through")->default_val(3);
  s_sim->add_option("--mac", sim->mac_specs, "per-block MAC override, block=count");
  s_sim->add_option("--stall", sim->po.stall_block, "fault injection: block never accepts");
  s_sim->add_option("--trace-csv", sim->trace_csv, "write per-block trace CSV");
  s_sim->add_option("--trace-json", sim->trace_json, "write run summary JSON");
  s_sim->callback([sim] { cmd_simulate(*sim); });

  auto so = std::make_shared<SortArgs>();
  auto* s_so = app.add_subcommand("sort", "run the full sorting chain on a recording");
  s_so->add_option("--recording", so->recording, "container directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  s_so->add_option("--cnn2", so->cnn2, "segment classifier model")
      ->required()
      ->check(CLI::ExistingFile);
  s_so->add_option("--cnn1", so->cnn1, "channel-gate model (omit to keep all channels)")
      ->check(CLI::ExistingFile);
  s_so->add_flag("--no-gate", so->no_gate, "load cnn1 but keep all channels anyway");
  s_so->add_option("--dataset", so->dataset, "row label (default: directory name)");
  s_so->add_option("--k", so->sc.k, "cluster count")->default_val(3);
  s_so->add_option("--seed", so->sc.seed, "clustering seed")->default_val(1);
  s_so->add_option("--tol", so->sc.match_tol, "event match tolerance, samples")
      ->default_val(10);
  s_so->add_option("--threshold", so->sc.threshold_mult, "detection threshold multiplier")
      ->default_val(4.0);
  s_so->add_option("--out-csv", so->out_csv, "summary row CSV")->default_val("sorting.csv");
  s_so->add_option("--out-json", so->out_json, "metrics JSON")->default_val("sorting.json");
  s_so->callback([so] { cmd_sort(*so); });

  auto rp = std::make_shared<ReportArgs>();
  auto* s_rp = app.add_subcommand("report", "merge sort metrics into the summary table");
  s_rp->add_option("inputs", rp->inputs, "sort metrics JSON files")
      ->required()
      ->check(CLI::ExistingFile);
  s_rp->add_option("--out", rp->out, "output CSV")->default_val("report.csv");
  s_rp->callback([rp] { cmd_report(*rp); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
