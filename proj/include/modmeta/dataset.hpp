#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "modmeta/error.hpp"

namespace modmeta {

/// Input/output pairs stored as two dense row-major matrices.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::size_t in_dim, std::size_t out_dim) : in_dim_(in_dim), out_dim_(out_dim) {}

  std::size_t size() const { return in_dim_ ? xs_.size() / in_dim_ : 0; }
  bool empty() const { return xs_.empty(); }
  std::size_t in_dim() const { return in_dim_; }
  std::size_t out_dim() const { return out_dim_; }

  std::span<const double> x(std::size_t i) const { return {xs_.data() + i * in_dim_, in_dim_}; }
  std::span<const double> y(std::size_t i) const { return {ys_.data() + i * out_dim_, out_dim_}; }
  std::span<double> mutable_y(std::size_t i) { return {ys_.data() + i * out_dim_, out_dim_}; }

  void add(std::span<const double> x, std::span<const double> y) {
    if (x.size() != in_dim_ || y.size() != out_dim_)
      throw ShapeError("dataset expects x of length " + std::to_string(in_dim_) +
                       " and y of length " + std::to_string(out_dim_));
    xs_.insert(xs_.end(), x.begin(), x.end());
    ys_.insert(ys_.end(), y.begin(), y.end());
  }
  void add(std::initializer_list<double> x, std::initializer_list<double> y) {
    add(std::span<const double>(x.begin(), x.size()), std::span<const double>(y.begin(), y.size()));
  }

  Dataset prefix(std::size_t n) const {
    Dataset d(in_dim_, out_dim_);
    for (std::size_t i = 0; i < n && i < size(); ++i) d.add(x(i), y(i));
    return d;
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset d(in_dim_, out_dim_);
    for (auto i : indices) d.add(x(i), y(i));
    return d;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  std::size_t in_dim_ = 0, out_dim_ = 0;
  std::vector<double> xs_, ys_;
};

}  // namespace modmeta
