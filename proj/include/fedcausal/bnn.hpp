#pragma once

// Fully connected network with ELU hidden activations, generic over the
// scalar type so the same forward pass serves tape-recorded training and
// plain-double sampling. Weights are a flat vector laid out per layer as
// [W row-major (out x in), b].

#include <vector>

#include "fedcausal/autodiff.hpp"
#include "fedcausal/errors.hpp"

namespace fedcausal {

struct MlpShape {
  int in = 0;
  int out = 0;
  std::vector<int> hidden{20, 20, 20};

  int param_count() const {
    int count = 0;
    int prev = in;
    for (int h : hidden) {
      count += prev * h + h;
      prev = h;
    }
    count += prev * out + out;
    return count;
  }
};

template <typename T, typename WeightVec, typename InputVec>
std::vector<T> mlp_forward(const MlpShape& shape, const WeightVec& weights,
                           const InputVec& input) {
  if (static_cast<int>(input.size()) != shape.in)
    throw SchemaError("mlp_forward: input dimension mismatch");
  std::vector<T> act(input.begin(), input.end());
  std::size_t p = 0;
  int prev = shape.in;
  auto layer = [&](int width, bool activate) {
    std::vector<T> next(width);
    for (int o = 0; o < width; ++o) {
      T acc = weights[p + static_cast<std::size_t>(width) * prev + o];  // bias
      for (int i = 0; i < prev; ++i) acc += weights[p + static_cast<std::size_t>(o) * prev + i] * act[i];
      using fedcausal::ad::elu;
      next[o] = activate ? elu(acc) : acc;
    }
    p += static_cast<std::size_t>(width) * prev + width;
    prev = width;
    act = std::move(next);
  };
  for (int h : shape.hidden) layer(h, true);
  layer(shape.out, false);
  return act;
}

}  // namespace fedcausal
