#pragma once
// Dense tensors in SSCB order (spatial, spatial, channel, batch/filter).

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsd {

struct TensorShape {
  int s1 = 1, s2 = 1, c = 1, b = 1;

  int64_t count() const { return int64_t(s1) * s2 * c * b; }
  bool operator==(const TensorShape&) const = default;
  std::string str() const {
    return std::to_string(s1) + "x" + std::to_string(s2) + "x" +
           std::to_string(c) + "x" + std::to_string(b);
  }
};

struct Tensor {
  TensorShape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(TensorShape sh) : shape(sh), data(size_t(sh.count()), 0.0) {}

  double& at(int i1, int i2, int ic, int ib) {
    return data[size_t(((int64_t(i1) * shape.s2 + i2) * shape.c + ic) * shape.b + ib)];
  }
  double at(int i1, int i2, int ic, int ib) const {
    return data[size_t(((int64_t(i1) * shape.s2 + i2) * shape.c + ic) * shape.b + ib)];
  }
};

}  // namespace dsd
