#include "perfect/parameters.hpp"

#include "perfect/errors.hpp"

namespace perfect {

Tensor& ParameterStore::add(std::string name, Tensor tensor) {
  if (index_.contains(name)) throw ContractError("parameter '" + name + "' registered twice");
  index_.emplace(name, items_.size());
  items_.push_back({std::move(name), std::move(tensor)});
  return items_.back().tensor;
}

bool ParameterStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

Tensor& ParameterStore::get(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return items_[it->second].tensor;
}

const Tensor& ParameterStore::get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return items_[it->second].tensor;
}

std::size_t ParameterStore::element_count() const {
  std::size_t total = 0;
  for (const auto& item : items_) total += item.tensor.size();
  return total;
}

void ParameterStore::zero_grad() {
  for (auto& item : items_) item.tensor.zero_grad();
}

}  // namespace perfect
