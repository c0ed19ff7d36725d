#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "djfk/tensor.hpp"

namespace djfk {

/// A trainable tensor with its gradient accumulator and Adam moments.
template <class T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> first_moment;
  Tensor<T> second_moment;
  std::uint64_t step_count = 0;

  Parameter() = default;
  explicit Parameter(Tensor<T> v)
      : value(std::move(v)), grad(value.shape()), first_moment(value.shape()), second_moment(value.shape()) {}

  const Shape& shape() const noexcept { return value.shape(); }
  void zero_grad() { grad.fill(T{0}); }
};

template <class T>
struct NamedParameter {
  std::string name;
  Parameter<T>* param;
};

template <class T>
using ParameterList = std::vector<NamedParameter<T>>;

}  // namespace djfk
