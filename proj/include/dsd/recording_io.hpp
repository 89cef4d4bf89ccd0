#pragma once
// Recording container: a directory holding one little-endian float32 sample
// file per channel plus manifest.json with rates, noise level and per-channel
// ground truth (spike times, class ids, artefact flags).

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace dsd {

struct RecordingIOError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SpikeEvent {
  int64_t t = 0;        // sample index of the aligned negative peak
  int class_id = 0;     // 1..3 for the neuron classes, 0 for artefacts
  bool artefact = false;
};

struct Recording {
  double sample_rate = 26400.0;   // 66 samples span 2.5 ms
  double noise_sigma = 0.0;
  std::vector<std::vector<float>> channels;
  std::vector<std::vector<SpikeEvent>> truth;   // one sorted list per channel

  int channel_count() const { return int(channels.size()); }
  int64_t samples(int ch = 0) const { return int64_t(channels.at(size_t(ch)).size()); }

  void validate() const {
    if (channels.size() != truth.size())
      throw RecordingIOError("recording: truth list count != channel count");
    for (size_t c = 0; c < truth.size(); ++c) {
      int64_t prev = -1;
      for (const auto& e : truth[c]) {
        if (e.t <= prev)
          throw RecordingIOError("recording: non-monotonic spike times on channel " +
                                 std::to_string(c));
        prev = e.t;
        if (e.artefact) {
          if (e.class_id != 0)
            throw RecordingIOError("recording: artefact events must carry class 0");
        } else if (e.class_id < 1 || e.class_id > 3) {
          throw RecordingIOError("recording: neuron class must be 1..3, got " +
                                 std::to_string(e.class_id));
        }
        if (e.t < 0 || e.t >= int64_t(channels[c].size()))
          throw RecordingIOError("recording: event time outside the sample range");
      }
    }
  }

  // all non-artefact events across channels
  int64_t spike_count() const {
    int64_t n = 0;
    for (const auto& tc : truth)
      for (const auto& e : tc)
        if (!e.artefact) ++n;
    return n;
  }
  int64_t artefact_count() const {
    int64_t n = 0;
    for (const auto& tc : truth)
      for (const auto& e : tc)
        if (e.artefact) ++n;
    return n;
  }
};

namespace detail {
inline void require_little_endian() {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  if constexpr (std::endian::native != std::endian::little)
    throw RecordingIOError("recording container requires a little-endian host");
}
}  // namespace detail

inline void save_recording(const std::filesystem::path& dir, const Recording& rec) {
  detail::require_little_endian();
  rec.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json jch = nlohmann::json::array();
  for (size_t c = 0; c < rec.channels.size(); ++c) {
    const std::string fname = "ch" + std::to_string(c) + ".f32";
    std::ofstream f(dir / fname, std::ios::binary);
    if (!f) throw RecordingIOError("cannot write " + (dir / fname).string());
    f.write(reinterpret_cast<const char*>(rec.channels[c].data()),
            std::streamsize(rec.channels[c].size() * sizeof(float)));
    std::vector<int64_t> times;
    std::vector<int> classes;
    std::vector<int> flags;
    for (const auto& e : rec.truth[c]) {
      times.push_back(e.t);
      classes.push_back(e.class_id);
      flags.push_back(e.artefact ? 1 : 0);
    }
    jch.push_back({{"file", fname},
                   {"samples", rec.channels[c].size()},
                   {"spike_times", times},
                   {"class_ids", classes},
                   {"artefact_flags", flags}});
  }
  nlohmann::json j{{"format", "dsd-recording"},
                   {"version", 1},
                   {"sample_rate", rec.sample_rate},
                   {"noise_sigma", rec.noise_sigma},
                   {"channels", jch}};
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw RecordingIOError("cannot write manifest in " + dir.string());
  mf << j.dump(2) << '\n';
}

inline Recording load_recording(const std::filesystem::path& dir) {
  detail::require_little_endian();
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw RecordingIOError("no manifest.json under " + dir.string());
  nlohmann::json j;
  try {
    mf >> j;
  } catch (const nlohmann::json::exception& e) {
    throw RecordingIOError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  if (j.value("format", "") != "dsd-recording")
    throw RecordingIOError("manifest format tag is not dsd-recording");
  if (j.value("version", 0) != 1)
    throw RecordingIOError("unsupported recording version");
  Recording rec;
  try {
    rec.sample_rate = j.at("sample_rate").get<double>();
    rec.noise_sigma = j.at("noise_sigma").get<double>();
    for (const auto& jc : j.at("channels")) {
      const std::string fname = jc.at("file").get<std::string>();
      const size_t n = jc.at("samples").get<size_t>();
      std::ifstream f(dir / fname, std::ios::binary | std::ios::ate);
      if (!f) throw RecordingIOError("missing channel file " + fname);
      const auto bytes = size_t(f.tellg());
      if (bytes != n * sizeof(float))
        throw RecordingIOError("truncated channel file " + fname + ": " +
                               std::to_string(bytes) + " bytes, manifest says " +
                               std::to_string(n * sizeof(float)));
      f.seekg(0);
      std::vector<float> data(n);
      f.read(reinterpret_cast<char*>(data.data()), std::streamsize(n * sizeof(float)));
      if (!f) throw RecordingIOError("short read on channel file " + fname);
      rec.channels.push_back(std::move(data));
      auto times = jc.at("spike_times").get<std::vector<int64_t>>();
      auto classes = jc.at("class_ids").get<std::vector<int>>();
      auto flags = jc.at("artefact_flags").get<std::vector<int>>();
      if (times.size() != classes.size() || times.size() != flags.size())
        throw RecordingIOError("ground-truth arrays disagree in length for " + fname);
      std::vector<SpikeEvent> ev;
      for (size_t i = 0; i < times.size(); ++i)
        ev.push_back({times[i], classes[i], flags[i] != 0});
      rec.truth.push_back(std::move(ev));
    }
  } catch (const nlohmann::json::exception& e) {
    throw RecordingIOError("malformed manifest field: " + std::string(e.what()));
  }
  rec.validate();
  return rec;
}

// alias matching the ingestion vocabulary used elsewhere
inline Recording ingest_recording(const std::filesystem::path& dir) { return load_recording(dir); }

// Converts a plain two-file text export (samples.txt: one sample per line;
// events.txt: "<time> <class> <artefact01>" per line, '#' comments allowed)
// into the container. This is the documented bridge from public spike banks,
// which ship as numeric arrays trivially dumped to text.
inline Recording convert_text_export(const std::filesystem::path& samples_txt,
                                     const std::filesystem::path& events_txt,
                                     double sample_rate, double noise_sigma) {
  std::ifstream sf(samples_txt);
  if (!sf) throw RecordingIOError("cannot open " + samples_txt.string());
  Recording rec;
  rec.sample_rate = sample_rate;
  rec.noise_sigma = noise_sigma;
  std::vector<float> data;
  std::string line;
  size_t lineno = 0;
  while (std::getline(sf, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    try {
      data.push_back(std::stof(line));
    } catch (const std::exception&) {
      throw RecordingIOError("bad sample at " + samples_txt.string() + ":" +
                             std::to_string(lineno));
    }
  }
  rec.channels.push_back(std::move(data));
  std::vector<SpikeEvent> ev;
  std::ifstream ef(events_txt);
  if (!ef) throw RecordingIOError("cannot open " + events_txt.string());
  lineno = 0;
  while (std::getline(ef, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    long long t = 0;
    int cls = 0, flag = 0;
    if (!(is >> t >> cls >> flag))
      throw RecordingIOError("bad event line at " + events_txt.string() + ":" +
                             std::to_string(lineno));
    ev.push_back({int64_t(t), cls, flag != 0});
  }
  rec.truth.push_back(std::move(ev));
  rec.validate();
  return rec;
}

}  // namespace dsd
