#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "palimpsa/errors.hpp"
#include "palimpsa/types.hpp"

namespace palimpsa::mqar {

/// Named blocks inside one flat parameter vector. Every block is a row-major
/// matrix; vectors are 1 x n.
class ParamLayout {
 public:
  struct Entry {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::size_t offset = 0;
    bool decay = false;  // subject to decoupled weight decay

    std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
  };

  std::size_t add(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool decay) {
    if (index_.count(name)) throw ConfigError("ParamLayout: duplicate block " + name);
    entries_.push_back({name, rows, cols, total_, decay});
    total_ += entries_.back().size();
    index_[name] = entries_.size() - 1;
    return entries_.size() - 1;
  }

  std::size_t size() const { return total_; }
  const std::vector<Entry>& entries() const { return entries_; }
  const Entry& operator[](std::size_t i) const { return entries_.at(i); }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("ParamLayout: no block named " + name);
    return it->second;
  }

  const Entry& find(const std::string& name) const { return entries_[index(name)]; }

  template <typename T>
  Eigen::Map<Mat<T>> view(Vec<T>& flat, std::size_t i) const {
    const auto& e = entries_.at(i);
    return Eigen::Map<Mat<T>>(flat.data() + e.offset, e.rows, e.cols);
  }

  template <typename T>
  Eigen::Map<const Mat<T>> view(const Vec<T>& flat, std::size_t i) const {
    const auto& e = entries_.at(i);
    return Eigen::Map<const Mat<T>>(flat.data() + e.offset, e.rows, e.cols);
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::size_t total_ = 0;
};

}  // namespace palimpsa::mqar
