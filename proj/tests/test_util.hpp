#pragma once

#include <random>
#include <string>

#include "infodiff/numcore.hpp"

namespace infodiff::testing {

inline nc::Tensor random_tensor(nc::Shape shape, std::mt19937_64& rng, float scale = 1.0f) {
  nc::Tensor t(std::move(shape));
  std::normal_distribution<float> normal(0.0f, scale);
  for (auto& x : t.data()) x = normal(rng);
  return t;
}

inline std::string data_path(const std::string& name) { return std::string(INFODIFF_TEST_DATA) + "/" + name; }

}  // namespace infodiff::testing
