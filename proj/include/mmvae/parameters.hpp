#pragma once

#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mmvae/errors.hpp"

namespace mmvae {

// Named, shaped double arrays with deterministic (insertion) iteration order.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::vector<double> value;
  };

  void add(const std::string& name, std::vector<int> shape, std::vector<double> value) {
    require(!index_.count(name), "parameters: duplicate name " + name);
    std::size_t n = 1;
    for (int d : shape) {
      require(d > 0, "parameters: non-positive dimension in " + name);
      n *= static_cast<std::size_t>(d);
    }
    require(n == value.size(), "parameters: shape/value size mismatch for " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(shape), std::move(value)});
  }

  void add(const std::string& name, std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(std::max(d, 0));
    add(name, std::move(shape), std::vector<double>(n, 0.0));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Entry& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "parameters: unknown name " + name);
    return entries_[it->second];
  }
  const Entry& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "parameters: unknown name " + name);
    return entries_[it->second];
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t count() const { return entries_.size(); }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Gradients keyed by parameter name; shapes follow the owning ParameterSet.
using GradMap = std::map<std::string, std::vector<double>>;

}  // namespace mmvae
