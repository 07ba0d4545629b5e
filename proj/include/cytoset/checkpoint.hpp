#pragma once

#include "cytoset/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace cyto {

/// Flat (name, shape, float32 little-endian payload) container with a
/// version header. Records keep insertion order.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> records;

  void add(const std::string& name, const Tensor& t);
  const Tensor* find(const std::string& name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace cyto
