#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "perfect/tensor.hpp"

namespace perfect {

// Named parameter leaves in registration order. Names are unique; the
// trainer's freeze policies and the checkpoint format both key on them.
class ParameterStore {
 public:
  Tensor& add(std::string name, Tensor tensor);
  bool contains(std::string_view name) const;
  Tensor& get(std::string_view name);
  const Tensor& get(std::string_view name) const;

  const std::vector<NamedTensor>& items() const { return items_; }
  std::vector<NamedTensor>& items() { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t element_count() const;

  void zero_grad();

 private:
  std::vector<NamedTensor> items_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

}  // namespace perfect
