#pragma once

#include <cstddef>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "klgrade/error.hpp"

namespace klg {

// Records every dataset index read through a DataView, tagged by phase, so
// tests can prove training never touched test items.
class AccessLog {
 public:
  void set_phase(std::string phase) { phase_ = std::move(phase); }
  void record(std::size_t index) { reads_.insert({phase_, index}); }
  std::set<std::size_t> indices(const std::string& phase) const {
    std::set<std::size_t> out;
    for (const auto& [p, i] : reads_)
      if (p == phase) out.insert(i);
    return out;
  }
  void clear() { reads_.clear(); }

 private:
  std::string phase_ = "default";
  std::set<std::pair<std::string, std::size_t>> reads_;
};

// Read-only subset of a shared item vector.
template <class T>
class DataView {
 public:
  DataView() = default;
  DataView(std::shared_ptr<const std::vector<T>> items, std::vector<std::size_t> indices,
           AccessLog* log = nullptr)
      : items_(std::move(items)), indices_(std::move(indices)), log_(log) {
    for (auto i : indices_)
      if (i >= items_->size()) throw ValueError("DataView index out of range");
  }
  // View over every item.
  explicit DataView(std::shared_ptr<const std::vector<T>> items, AccessLog* log = nullptr)
      : items_(std::move(items)), log_(log) {
    for (std::size_t i = 0; i < items_->size(); ++i) indices_.push_back(i);
  }

  std::size_t size() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }
  const T& operator[](std::size_t i) const {
    const auto global = indices_.at(i);
    if (log_) log_->record(global);
    return (*items_)[global];
  }
  std::size_t global_index(std::size_t i) const { return indices_.at(i); }
  const std::vector<std::size_t>& indices() const { return indices_; }

 private:
  std::shared_ptr<const std::vector<T>> items_;
  std::vector<std::size_t> indices_;
  AccessLog* log_ = nullptr;
};

}  // namespace klg
