#pragma once
// Model (de)serialization: one self-contained JSON document per model.

#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "dsd/network.hpp"

namespace dsd {

using json = nlohmann::json;

struct ModelIOError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline json quant_to_json(const LayerQuant& q) {
  return json{{"w_bits", q.wq.bits},
              {"w_frac", q.wq.frac_exp},
              {"b_bits", q.bq.bits},
              {"b_frac", q.bq.frac_exp},
              {"w", q.w},
              {"b", q.b}};
}

inline LayerQuant quant_from_json(const json& j) {
  LayerQuant q;
  q.valid = true;
  q.wq = TensorQuant{j.at("w_bits").get<int>(), j.at("w_frac").get<int>()};
  q.bq = TensorQuant{j.at("b_bits").get<int>(), j.at("b_frac").get<int>()};
  q.w = j.at("w").get<std::vector<int32_t>>();
  q.b = j.at("b").get<std::vector<int32_t>>();
  return q;
}

inline json shape_to_json(const TensorShape& s) { return json::array({s.s1, s.s2, s.c, s.b}); }

inline TensorShape shape_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ModelIOError("tensor shape must be a 4-array");
  return TensorShape{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

}  // namespace detail

inline json model_to_json(const NetworkModel& m, const json& meta = json::object()) {
  json layers = json::array();
  for (const auto& l : m.layers) {
    json jl;
    if (const auto* c = std::get_if<Conv1D>(&l)) {
      jl["type"] = "conv";
      jl["kernel"] = c->kernel;
      jl["in_ch"] = c->in_ch;
      jl["out_ch"] = c->out_ch;
      jl["same_pad"] = c->same_pad;
      jl["w_shape"] = detail::shape_to_json(c->w.shape);
      jl["w"] = c->w.data;
      jl["bias"] = c->bias.data;
      if (c->q.valid) jl["q"] = detail::quant_to_json(c->q);
    } else if (std::holds_alternative<ReLU>(l)) {
      jl["type"] = "relu";
    } else if (const auto* p = std::get_if<MaxPool1D>(&l)) {
      jl["type"] = "maxpool";
      jl["width"] = p->width;
      jl["stride"] = p->stride;
    } else if (const auto* d = std::get_if<Dropout>(&l)) {
      jl["type"] = "dropout";
      jl["rate"] = d->rate;
    } else if (const auto* f = std::get_if<FullyConnected>(&l)) {
      jl["type"] = "fc";
      jl["in_dim"] = f->in_dim;
      jl["out_dim"] = f->out_dim;
      jl["w"] = f->w.data;
      jl["bias"] = f->bias.data;
      if (f->q.valid) jl["q"] = detail::quant_to_json(f->q);
    }
    layers.push_back(jl);
  }
  return json{{"format", "dsd-model"},
              {"version", 1},
              {"input_len", m.input_len},
              {"input_ch", m.input_ch},
              {"class_count", m.class_count},
              {"act_format", {{"total_bits", m.act_format.total_bits},
                              {"frac_bits", m.act_format.frac_bits},
                              {"signed", m.act_format.is_signed}}},
              {"quantized", m.quantized},
              {"quant_bits", m.quant_bits},
              {"layers", layers},
              {"meta", meta}};
}

inline NetworkModel model_from_json(const json& j, json* meta_out = nullptr) {
  if (!j.is_object() || j.value("format", "") != std::string("dsd-model"))
    throw ModelIOError("not a model document (missing format tag)");
  if (j.value("version", 0) != 1)
    throw ModelIOError("unsupported model version " + std::to_string(j.value("version", 0)));
  NetworkModel m;
  try {
    m.input_len = j.at("input_len").get<int>();
    m.input_ch = j.at("input_ch").get<int>();
    m.class_count = j.at("class_count").get<int>();
    const auto& af = j.at("act_format");
    m.act_format = QFormat{af.at("total_bits").get<int>(), af.at("frac_bits").get<int>(),
                           af.at("signed").get<bool>()};
    m.act_format.validate();
    m.quantized = j.at("quantized").get<bool>();
    m.quant_bits = j.value("quant_bits", 0);
    int idx = 0;
    for (const auto& jl : j.at("layers")) {
      std::string type = jl.at("type").get<std::string>();
      if (type == "conv") {
        Conv1D c = make_conv(jl.at("kernel").get<int>(), jl.at("in_ch").get<int>(),
                             jl.at("out_ch").get<int>(), jl.value("same_pad", false));
        c.w.data = jl.at("w").get<std::vector<double>>();
        c.bias.data = jl.at("bias").get<std::vector<double>>();
        if (int64_t(c.w.data.size()) != c.w.shape.count() ||
            int64_t(c.bias.data.size()) != c.bias.shape.count())
          throw ModelIOError("layer " + std::to_string(idx) + ": conv weight size mismatch");
        if (jl.contains("q")) c.q = detail::quant_from_json(jl.at("q"));
        if (c.q.valid && (c.q.w.size() != c.w.data.size() || c.q.b.size() != c.bias.data.size()))
          throw ModelIOError("layer " + std::to_string(idx) + ": quant array size mismatch");
        m.layers.push_back(std::move(c));
      } else if (type == "relu") {
        m.layers.push_back(ReLU{});
      } else if (type == "maxpool") {
        m.layers.push_back(MaxPool1D{jl.value("width", 2), jl.value("stride", 2)});
      } else if (type == "dropout") {
        m.layers.push_back(Dropout{jl.value("rate", 0.5)});
      } else if (type == "fc") {
        FullyConnected f = make_fc(jl.at("in_dim").get<int>(), jl.at("out_dim").get<int>());
        f.w.data = jl.at("w").get<std::vector<double>>();
        f.bias.data = jl.at("bias").get<std::vector<double>>();
        if (int64_t(f.w.data.size()) != f.w.shape.count() ||
            int64_t(f.bias.data.size()) != f.bias.shape.count())
          throw ModelIOError("layer " + std::to_string(idx) + ": fc weight size mismatch");
        if (jl.contains("q")) f.q = detail::quant_from_json(jl.at("q"));
        if (f.q.valid && (f.q.w.size() != f.w.data.size() || f.q.b.size() != f.bias.data.size()))
          throw ModelIOError("layer " + std::to_string(idx) + ": quant array size mismatch");
        m.layers.push_back(std::move(f));
      } else {
        throw ModelIOError("layer " + std::to_string(idx) + ": unknown type '" + type + "'");
      }
      ++idx;
    }
  } catch (const json::exception& e) {
    throw ModelIOError(std::string("malformed model document: ") + e.what());
  }
  if (m.quantized)
    for (const auto& l : m.layers) {
      if (const auto* c = std::get_if<Conv1D>(&l))
        if (!c->q.valid) throw ModelIOError("quantized model lacks fixed-point data on a conv layer");
      if (const auto* f = std::get_if<FullyConnected>(&l))
        if (!f->q.valid) throw ModelIOError("quantized model lacks fixed-point data on an fc layer");
    }
  infer_shapes(m);  // reject inconsistent topologies at load time
  if (meta_out) *meta_out = j.value("meta", json::object());
  return m;
}

inline void save_model(const NetworkModel& m, const std::string& path,
                       const json& meta = json::object()) {
  std::ofstream out(path);
  if (!out) throw ModelIOError("cannot open for writing: " + path);
  out << model_to_json(m, meta).dump(1) << "\n";
  if (!out) throw ModelIOError("write failed: " + path);
}

inline NetworkModel load_model(const std::string& path, json* meta_out = nullptr) {
  std::ifstream in(path);
  if (!in) throw ModelIOError("cannot open model file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ModelIOError("invalid JSON in " + path + ": " + e.what());
  }
  return model_from_json(j, meta_out);
}

}  // namespace dsd
