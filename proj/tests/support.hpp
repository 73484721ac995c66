#pragma once

#include "data.hpp"
#include "diffnet.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace milkid::testing {

inline std::vector<uint8_t> idx_bytes(uint8_t type, const std::vector<uint32_t>& dims,
                                      const std::vector<uint8_t>& payload) {
  std::vector<uint8_t> out{0, 0, type, static_cast<uint8_t>(dims.size())};
  for (uint32_t d : dims) {
    out.push_back(static_cast<uint8_t>(d >> 24));
    out.push_back(static_cast<uint8_t>(d >> 16));
    out.push_back(static_cast<uint8_t>(d >> 8));
    out.push_back(static_cast<uint8_t>(d));
  }
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

// Ten 4x4 "digits": image i has every pixel equal to 20*i + 5, label i % 10.
inline void fake_digits(std::size_t count, IdxTensor& images, IdxTensor& labels) {
  images.dims = {static_cast<uint32_t>(count), 4, 4};
  labels.dims = {static_cast<uint32_t>(count)};
  images.data.clear();
  labels.data.clear();
  for (std::size_t i = 0; i < count; ++i) {
    const uint8_t digit = static_cast<uint8_t>(i % 10);
    labels.data.push_back(digit);
    for (int p = 0; p < 16; ++p) images.data.push_back(static_cast<uint8_t>(20 * digit + 5));
  }
}

inline Bag labelled_bag(const std::string& id, const Matrix& x, std::vector<uint8_t> inst) {
  Bag b;
  b.id = id;
  b.instances = x;
  int any = 0;
  for (uint8_t l : inst) any |= l;
  b.bag_label = any;
  b.instance_labels = std::move(inst);
  return b;
}

inline ModelShape tiny_shape(std::size_t d = 4, std::size_t e = 3, std::size_t m = 2) {
  ModelShape s;
  s.input_dim = d;
  s.hidden = {e};
  s.attention_dim = m;
  return s;
}

inline Matrix uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
  return x;
}

}  // namespace milkid::testing
