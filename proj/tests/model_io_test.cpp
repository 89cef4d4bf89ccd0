#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "dsd/compression.hpp"
#include "dsd/model_io.hpp"
#include "dsd/train.hpp"

using namespace dsd;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("dsd_mio_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<double> probe(int n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> x(size_t(n), 0.0);
  for (auto& v : x) v = u(rng);
  return x;
}

}  // namespace

TEST_CASE("float model survives a save/load round trip bit for bit") {
  auto dir = temp_dir("float");
  auto m = build_original();
  initialize_weights(m, 7);
  const auto path = (dir / "orig.json").string();
  save_model(m, path);
  auto r = load_model(path);

  REQUIRE(r.layers.size() == m.layers.size());
  CHECK(r.input_len == m.input_len);
  CHECK(r.input_ch == m.input_ch);
  CHECK(r.class_count == m.class_count);
  CHECK_FALSE(r.quantized);
  for (size_t i = 0; i < m.layers.size(); ++i) {
    if (const auto* c = std::get_if<Conv1D>(&m.layers[i])) {
      const auto& rc = std::get<Conv1D>(r.layers[i]);
      CHECK(rc.kernel == c->kernel);
      CHECK(rc.same_pad == c->same_pad);
      CHECK(rc.w.data == c->w.data);  // doubles re-read exactly
      CHECK(rc.bias.data == c->bias.data);
    } else if (const auto* f = std::get_if<FullyConnected>(&m.layers[i])) {
      const auto& rf = std::get<FullyConnected>(r.layers[i]);
      CHECK(rf.in_dim == f->in_dim);
      CHECK(rf.w.data == f->w.data);
      CHECK(rf.bias.data == f->bias.data);
    } else {
      CHECK(m.layers[i].index() == r.layers[i].index());
    }
  }

  auto x = probe(m.input_len, 21);
  CHECK(forward(r, x) == forward(m, x));
}

TEST_CASE("quantized model round trip keeps raw outputs identical") {
  auto dir = temp_dir("quant");
  auto base = build_projected();
  initialize_weights(base, 11);
  auto q = quantize_model(base, 4);
  const auto path = (dir / "q.json").string();
  save_model(q, path);
  auto r = load_model(path);

  REQUIRE(r.quantized);
  CHECK(r.quant_bits == 4);
  CHECK(r.act_format.total_bits == q.act_format.total_bits);
  CHECK(r.act_format.frac_bits == q.act_format.frac_bits);
  CHECK(r.act_format.is_signed == q.act_format.is_signed);
  for (size_t i = 0; i < q.layers.size(); ++i) {
    const LayerQuant* a = nullptr;
    const LayerQuant* b = nullptr;
    if (const auto* c = std::get_if<Conv1D>(&q.layers[i])) {
      a = &c->q;
      b = &std::get<Conv1D>(r.layers[i]).q;
    } else if (const auto* f = std::get_if<FullyConnected>(&q.layers[i])) {
      a = &f->q;
      b = &std::get<FullyConnected>(r.layers[i]).q;
    }
    if (!a) continue;
    REQUIRE(b->valid);
    CHECK(b->wq.bits == a->wq.bits);
    CHECK(b->wq.frac_exp == a->wq.frac_exp);
    CHECK(b->bq.frac_exp == a->bq.frac_exp);
    CHECK(b->w == a->w);
    CHECK(b->b == a->b);
  }

  for (uint64_t s = 0; s < 4; ++s) {
    auto x = probe(q.input_len, 100 + s);
    CHECK(forward_quantized(r, x) == forward_quantized(q, x));
  }
}

TEST_CASE("metadata travels with the model") {
  auto dir = temp_dir("meta");
  auto m = build_projected();
  initialize_weights(m, 3);
  json meta{{"purpose", "unit"}, {"epochs", 12}, {"config_hash", "deadbeef"}};
  const auto path = (dir / "m.json").string();
  save_model(m, path, meta);
  json got;
  load_model(path, &got);
  CHECK(got == meta);
}

TEST_CASE("loader rejects broken documents with specific messages") {
  auto dir = temp_dir("bad");
  auto m = build_projected();
  initialize_weights(m, 5);
  const auto path = (dir / "m.json").string();
  save_model(m, path);

  auto rewrite = [&](void (*mutate)(json&)) {
    std::ifstream in(path);
    json j;
    in >> j;
    mutate(j);
    std::ofstream out(path);
    out << j.dump();
  };
  auto expect_throw = [&](const std::string& needle) {
    try {
      load_model(path);
      FAIL("expected ModelIOError");
    } catch (const ModelIOError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };

  SECTION("missing file") {
    try {
      load_model((dir / "nope.json").string());
      FAIL("expected ModelIOError");
    } catch (const ModelIOError& e) {
      CHECK(std::string(e.what()).find("cannot open") != std::string::npos);
    }
  }
  SECTION("not JSON at all") {
    std::ofstream(path) << "]]]";
    expect_throw("invalid JSON");
  }
  SECTION("wrong format tag") {
    rewrite([](json& j) { j["format"] = "something-else"; });
    expect_throw("not a model document");
  }
  SECTION("unsupported version") {
    rewrite([](json& j) { j["version"] = 9; });
    expect_throw("unsupported model version 9");
  }
  SECTION("unknown layer type") {
    rewrite([](json& j) { j["layers"][0]["type"] = "wavelet"; });
    expect_throw("unknown type 'wavelet'");
  }
  SECTION("weight array truncated") {
    rewrite([](json& j) {
      auto w = j["layers"][0]["w"].get<std::vector<double>>();
      w.pop_back();
      j["layers"][0]["w"] = w;
    });
    expect_throw("weight size mismatch");
  }
  SECTION("field of the wrong kind") {
    rewrite([](json& j) { j["layers"][0]["kernel"] = "three"; });
    expect_throw("malformed model document");
  }
  SECTION("quantized flag without fixed-point arrays") {
    rewrite([](json& j) { j["quantized"] = true; });
    expect_throw("lacks fixed-point data");
  }
  SECTION("inconsistent topology is caught at load") {
    rewrite([](json& j) {
      // widen the final classifier input without touching upstream layers
      for (auto& jl : j["layers"])
        if (jl["type"] == "fc" && jl["in_dim"] == 2) {
          jl["in_dim"] = 5;
          auto w = jl["w"].get<std::vector<double>>();
          w.resize(size_t(5 * jl["out_dim"].get<int>()), 0.0);
          jl["w"] = w;
        }
    });
    CHECK_THROWS_AS(load_model(path), ShapeError);
  }
}
