#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "dsd/network.hpp"

using namespace dsd;

static std::mt19937_64 g_rng(12345);

static void randomize(Tensor& t, double scale = 1.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  for (auto& v : t.data) v = d(g_rng);
}

static void randomize_model(NetworkModel& m, double scale = 1.0) {
  for (auto& l : m.layers) {
    if (auto* c = std::get_if<Conv1D>(&l)) { randomize(c->w, scale); randomize(c->bias, scale); }
    if (auto* f = std::get_if<FullyConnected>(&l)) { randomize(f->w, scale); randomize(f->bias, scale); }
  }
}

TEST_CASE("dense model: learnable bookkeeping") {
  auto m = build_original();
  // counted from first principles, layer by layer
  int64_t conv1 = 1 * 3 * 1 * 50 + 50;
  int64_t conv2 = 1 * 3 * 50 * 50 + 50;
  int64_t conv3 = 1 * 3 * 50 * 50 + 50;
  int64_t fc = 750 * 3 + 3;
  CHECK(conv1 == 200);
  CHECK(conv2 == 7550);
  CHECK(fc == 2253);
  CHECK(learnable_count(m) == conv1 + conv2 + conv3 + fc);
  CHECK(learnable_count(m) == 17553);
  CHECK(memory_bytes(learnable_count(m), 32) == 70212);
}

TEST_CASE("dense model: activation chain") {
  auto m = build_original();
  auto shapes = infer_shapes(m);
  // entering: conv1, relu, conv2, relu, pool, conv3, relu, pool, dropout, fc, relu; + output
  REQUIRE(shapes.size() == 12);
  CHECK(shapes[0] == StageShape{66, 1});
  CHECK(shapes[2] == StageShape{66, 50});   // conv1 preserves length
  CHECK(shapes[4] == StageShape{64, 50});   // conv2 output
  CHECK(shapes[5] == StageShape{32, 50});
  CHECK(shapes[7] == StageShape{30, 50});
  CHECK(shapes[8] == StageShape{15, 50});
  CHECK(shapes[9] == StageShape{15, 50});   // flattened into fc: 750
  CHECK(shapes.back() == StageShape{1, 3});
}

TEST_CASE("projected model: learnable bookkeeping per group") {
  auto m = build_projected();
  CHECK(learnable_count(m) == 419);
  CHECK(memory_bytes(419, 4) == 210);
  // group sums computed independently from the sublayer shapes
  int64_t g1 = (3 * 1 * 1 + 1) + (1 * 1 * 10 + 10);
  int64_t g2 = (1 * 10 * 1 + 1) + (3 * 1 * 1 + 1) + (1 * 1 * 10 + 10);
  int64_t g3 = (1 * 10 * 1 + 1) + (3 * 1 * 2 + 2) + (1 * 2 * 10 + 10);
  int64_t g4 = (150 * 2 + 2) + (2 * 3 + 3);
  CHECK(g1 == 24);
  CHECK(g2 == 35);
  CHECK(g3 == 49);
  CHECK(g4 == 311);
  CHECK(g1 + g2 + g3 + g4 == 419);
}

TEST_CASE("projected model: sublayer weight shapes") {
  auto m = build_projected();
  std::vector<TensorShape> want = {
      {1, 3, 1, 1}, {1, 1, 1, 10},                  // conv1 core, proj out
      {1, 1, 10, 1}, {1, 3, 1, 1}, {1, 1, 1, 10},   // conv2
      {1, 1, 10, 1}, {1, 3, 1, 2}, {1, 1, 2, 10},   // conv3
  };
  std::vector<TensorShape> got;
  for (const auto& l : m.layers)
    if (const auto* c = std::get_if<Conv1D>(&l)) got.push_back(c->w.shape);
  CHECK(got == want);
  std::vector<std::pair<int,int>> fcs;
  for (const auto& l : m.layers)
    if (const auto* f = std::get_if<FullyConnected>(&l)) fcs.push_back({f->out_dim, f->in_dim});
  CHECK(fcs == std::vector<std::pair<int,int>>{{2, 150}, {3, 2}});
  auto shapes = infer_shapes(m);
  CHECK(shapes.back() == StageShape{1, 3});
  // activation entering the conv3 projection-in is post-pool: 32 positions
  CHECK(shapes[8] == StageShape{32, 10});
}

TEST_CASE("shape errors name the offending layer") {
  auto m = build_original();
  std::get<FullyConnected>(m.layers[9]).in_dim = 700;
  try {
    infer_shapes(m);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("layer 9") != std::string::npos);
    CHECK(msg.find("700") != std::string::npos);
  }
  NetworkModel tiny;
  tiny.input_len = 2;
  tiny.input_ch = 1;
  tiny.class_count = 3;
  tiny.layers.push_back(make_conv(3, 1, 3));  // 2 - 2 = 0 length
  CHECK_THROWS_AS(infer_shapes(tiny), ShapeError);
}

// naive convolution written directly from the definition
static std::vector<double> naive_conv(const std::vector<double>& in, int len, int in_ch,
                                      const Conv1D& c) {
  int pad = c.same_pad ? 1 : 0;
  int out_len = len + 2 * pad - (c.kernel - 1);
  std::vector<double> out(size_t(out_len) * c.out_ch);
  for (int co = 0; co < c.out_ch; ++co)
    for (int j = 0; j < out_len; ++j) {
      double s = c.bias.at(0, 0, 0, co);
      for (int ci = 0; ci < c.in_ch; ++ci)
        for (int t = 0; t < c.kernel; ++t) {
          int p = j - pad + t;
          double x = (p >= 0 && p < len) ? in[size_t(p) * in_ch + ci] : 0.0;
          s += x * c.w.at(0, t, ci, co);
        }
      out[size_t(j) * c.out_ch + co] = s;
    }
  return out;
}

TEST_CASE("conv forward matches naive reference") {
  for (bool pad : {false, true}) {
    for (int trial = 0; trial < 20; ++trial) {
      int len = 5 + int(g_rng() % 20);
      int in_ch = 1 + int(g_rng() % 4);
      int out_ch = 1 + int(g_rng() % 5);
      auto c = make_conv(3, in_ch, out_ch, pad);
      randomize(c.w);
      randomize(c.bias);
      Act in{len, in_ch, std::vector<double>(size_t(len) * in_ch)};
      std::uniform_real_distribution<double> d(-2.0, 2.0);
      for (auto& v : in.v) v = d(g_rng);
      auto got = conv_forward(c, in);
      auto want = naive_conv(in.v, len, in_ch, c);
      REQUIRE(got.v.size() == want.size());
      for (size_t i = 0; i < want.size(); ++i)
        CHECK_THAT(got.v[i], Catch::Matchers::WithinAbs(want[i], 1e-12));
    }
  }
}

TEST_CASE("forward composes: hand computed two layer stack") {
  // conv k3 valid (1->1) then fc over 3 outputs
  NetworkModel m;
  m.input_len = 5;
  m.class_count = 2;
  auto c = make_conv(3, 1, 1);
  c.w.data = {1.0, -1.0, 2.0};
  c.bias.data = {0.5};
  m.layers.push_back(c);
  m.layers.push_back(ReLU{});
  auto f = make_fc(3, 2);
  f.w.data = {1, 1, 1,  -1, 0, 1};   // row major [out][in]
  f.bias.data = {0.0, 0.25};
  m.layers.push_back(f);
  std::vector<double> x{1, 2, 3, 4, 5};
  // conv: [1-2+6+.5, 2-3+8+.5, 3-4+10+.5] = [5.5, 7.5, 9.5]; relu id
  auto y = forward(m, x);
  REQUIRE(y.size() == 2);
  CHECK_THAT(y[0], Catch::Matchers::WithinAbs(22.5, 1e-12));
  CHECK_THAT(y[1], Catch::Matchers::WithinAbs(-5.5 + 9.5 + 0.25, 1e-12));
}

TEST_CASE("flatten order is position major") {
  // two channels, two positions; fc weight picks out single flat slots
  NetworkModel m;
  m.input_len = 2;
  m.input_ch = 2;
  m.class_count = 4;
  auto f = make_fc(4, 4);
  for (int o = 0; o < 4; ++o)
    for (int i = 0; i < 4; ++i) f.w.at(o, i, 0, 0) = (o == i) ? 1.0 : 0.0;
  m.layers.push_back(f);
  m.layers.push_back(ReLU{});
  // input laid out position major: pos0(ch0,ch1), pos1(ch0,ch1)
  std::vector<double> x{10, 20, 30, 40};
  auto y = forward(m, x);
  CHECK(y == std::vector<double>{10, 20, 30, 40});
}

TEST_CASE("maxpool resolution halving and dropout inference identity") {
  NetworkModel m;
  m.input_len = 6;
  m.input_ch = 1;
  m.class_count = 3;
  m.layers.push_back(MaxPool1D{});
  m.layers.push_back(Dropout{0.5});
  auto f = make_fc(3, 3);
  for (int o = 0; o < 3; ++o) f.w.at(o, o, 0, 0) = 1.0;
  m.layers.push_back(f);
  std::vector<double> x{1, 5, -2, -7, 4, 4};
  auto y = forward(m, x);
  CHECK(y == std::vector<double>{5, -2, 4});
}

// hand-rolled fixed point reference for a tiny quantized stack
static int32_t ref_q_dot(const std::vector<int32_t>& w, const std::vector<int32_t>& x,
                         int32_t braw, int bias_shift, int acc_frac, int out_frac) {
  long long acc = (long long)braw << bias_shift;
  for (size_t i = 0; i < w.size(); ++i) {
    acc += (long long)w[i] * x[i];
    if (acc > 2147483647LL) acc = 2147483647LL;
    if (acc < -2147483648LL) acc = -2147483648LL;
  }
  int sh = acc_frac - out_frac;
  long long d = 1LL << sh;
  long long r = acc >= 0 ? (acc + d / 2) / d : -((-acc + d / 2) / d);
  if (r > 511) r = 511;
  if (r < -512) r = -512;
  return int32_t(r);
}

TEST_CASE("quantized fc matches a hand reference") {
  NetworkModel m;
  m.input_len = 4;
  m.input_ch = 1;
  m.class_count = 2;
  m.quantized = true;
  m.quant_bits = 8;
  auto f = make_fc(4, 2);
  f.q.valid = true;
  f.q.wq = TensorQuant{8, 6};
  f.q.bq = TensorQuant{8, 5};
  f.q.w = {64, -32, 16, 8,  127, 1, -1, -128};
  f.q.b = {10, -20};
  m.layers.push_back(f);
  std::vector<int32_t> xraw{100, -200, 300, 511};
  auto got = forward_quantized_raw(m, xraw);
  // acc frac = 6+7 = 13; bias shift = 13-5 = 8; output frac 7
  auto want0 = ref_q_dot({64, -32, 16, 8}, {100, -200, 300, 511}, 10, 8, 13, 7);
  auto want1 = ref_q_dot({127, 1, -1, -128}, {100, -200, 300, 511}, -20, 8, 13, 7);
  CHECK(got[0] == want0);
  CHECK(got[1] == want1);
}

TEST_CASE("quantized conv matches float forward when weights are exact") {
  // weights and inputs chosen representable: quantized and float paths agree
  NetworkModel m;
  m.input_len = 8;
  m.input_ch = 1;
  m.class_count = 2;
  auto c = make_conv(3, 1, 2, true);
  c.w.data = {0.5, -0.25, 1.0,  0.125, 0.75, -0.5};  // [t][ci][co] order: t-major
  // w layout {1,3,1,2}: index (t*1+0)*2+co
  c.w.data = {0.5, 0.125,  -0.25, 0.75,  1.0, -0.5};
  c.bias.data = {0.25, -0.125};
  m.layers.push_back(c);
  m.layers.push_back(ReLU{});
  m.layers.push_back(MaxPool1D{});
  auto f = make_fc(8, 2);
  for (auto& v : f.w.data) v = 0.0;
  f.w.at(0, 0, 0, 0) = 1.0;
  f.w.at(1, 5, 0, 0) = -0.5;
  f.bias.data = {0.5, 0.0};
  m.layers.push_back(f);
  m.layers.push_back(ReLU{});

  // quantize by hand at 8 bits (all values need <= 3 frac bits, exact)
  auto& cq = std::get<Conv1D>(m.layers[0]);
  cq.q.valid = true;
  cq.q.wq = TensorQuant{8, 3};
  cq.q.bq = TensorQuant{8, 3};
  for (double v : cq.w.data) cq.q.w.push_back(int32_t(v * 8));
  for (double v : cq.bias.data) cq.q.b.push_back(int32_t(v * 8));
  auto& fq = std::get<FullyConnected>(m.layers[3]);
  fq.q.valid = true;
  fq.q.wq = TensorQuant{8, 1};
  fq.q.bq = TensorQuant{8, 1};
  for (double v : fq.w.data) fq.q.w.push_back(int32_t(v * 2));
  for (double v : fq.bias.data) fq.q.b.push_back(int32_t(v * 2));
  m.quantized = true;
  m.quant_bits = 8;

  std::vector<double> x{0.5, -1.0, 0.25, 2.0, -0.125, 1.5, 0.75, -2.0};
  auto yf = forward(m, x);
  auto yq = forward_quantized(m, x);
  REQUIRE(yq.size() == yf.size());
  for (size_t i = 0; i < yf.size(); ++i)
    CHECK_THAT(double(yq[i]) / 128.0, Catch::Matchers::WithinAbs(yf[i], 1e-9));
}

TEST_CASE("quantized forward requires quant parameters") {
  auto m = build_projected();
  randomize_model(m, 0.3);
  m.quantized = true;
  std::vector<double> x(66, 0.1);
  CHECK_THROWS_AS(forward_quantized(m, x), std::logic_error);
  m.quantized = false;
  CHECK_THROWS_AS(forward_quantized(m, x), std::logic_error);
}

TEST_CASE("projected topology forward runs end to end") {
  auto m = build_projected();
  randomize_model(m, 0.4);
  std::vector<double> x(66);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (auto& v : x) v = d(g_rng);
  auto y = forward(m, x);
  REQUIRE(y.size() == 3);
  int lab = predict(m, x);
  CHECK(lab >= 0);
  CHECK(lab < 3);
}

TEST_CASE("input length is validated") {
  auto m = build_original();
  randomize_model(m, 0.1);
  std::vector<double> x(65, 0.0);
  CHECK_THROWS_AS(forward(m, x), ShapeError);
}
