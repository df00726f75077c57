#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ee {

// Dense row-major matrix of doubles. Vectors are stored as 1 x n.
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor2 row_vector(std::vector<double> values);
  static Tensor2 identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  const std::vector<double>& data() const { return data_; }

  std::string shape_string() const;

  friend bool operator==(const Tensor2&, const Tensor2&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// A bijection on {0..n-1}; map()[i] is the image of i. As a matrix it acts on
// column vectors: (P x)[map[i]] = x[i].
class PermTable {
 public:
  PermTable() = default;
  // Throws a range error unless `map` is a bijection.
  explicit PermTable(std::vector<std::uint32_t> map);

  static PermTable identity(std::size_t n);

  std::size_t size() const { return map_.size(); }
  const std::vector<std::uint32_t>& map() const { return map_; }
  std::uint32_t operator[](std::size_t i) const { return map_[i]; }

  bool is_identity() const;
  PermTable inverse() const;
  // (this ∘ other)[i] = this[other[i]]
  PermTable compose(const PermTable& other) const;

  // Index lookup: out[k] = map[ids[k]].
  std::vector<std::uint32_t> apply(std::span<const std::uint32_t> ids) const;
  // Vector permutation: out[map[i]] = x[i].
  std::vector<double> permute(std::span<const double> x) const;

  void swap_images(std::size_t a, std::size_t b);

  friend bool operator==(const PermTable&, const PermTable&) = default;
  friend auto operator<=>(const PermTable& a, const PermTable& b) {
    return a.map_ <=> b.map_;
  }

 private:
  std::vector<std::uint32_t> map_;
};

bool is_bijection(std::span<const std::uint32_t> map);

// Block-diagonal permutation built from equally sized blocks.
PermTable block_diagonal(std::span<const PermTable> blocks);

// P_out * a * P_in^T: out(map_out[i], map_in[j]) = a(i, j). Pass an empty
// table to leave an axis untouched.
Tensor2 permute_axes(const Tensor2& a, const PermTable& row_perm, const PermTable& col_perm);

}  // namespace ee
