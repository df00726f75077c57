#include "ee/tensor.hpp"

#include <algorithm>

#include "ee/error.hpp"

namespace ee {

Tensor2::Tensor2(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2::Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw Error(ErrorKind::kShape, "tensor data length " + std::to_string(data_.size()) +
                                       " does not match " + shape_string());
  }
}

Tensor2 Tensor2::row_vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor2(1, n, std::move(values));
}

Tensor2 Tensor2::identity(std::size_t n) {
  Tensor2 t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::string Tensor2::shape_string() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

bool is_bijection(std::span<const std::uint32_t> map) {
  std::vector<bool> seen(map.size(), false);
  for (auto v : map) {
    if (v >= map.size() || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

PermTable::PermTable(std::vector<std::uint32_t> map) : map_(std::move(map)) {
  if (!is_bijection(map_)) {
    throw Error(ErrorKind::kRange,
                "permutation table of size " + std::to_string(map_.size()) +
                    " is not a bijection");
  }
}

PermTable PermTable::identity(std::size_t n) {
  std::vector<std::uint32_t> map(n);
  for (std::size_t i = 0; i < n; ++i) map[i] = static_cast<std::uint32_t>(i);
  return PermTable(std::move(map));
}

bool PermTable::is_identity() const {
  for (std::size_t i = 0; i < map_.size(); ++i) {
    if (map_[i] != i) return false;
  }
  return true;
}

PermTable PermTable::inverse() const {
  std::vector<std::uint32_t> inv(map_.size());
  for (std::size_t i = 0; i < map_.size(); ++i) {
    inv[map_[i]] = static_cast<std::uint32_t>(i);
  }
  PermTable out;
  out.map_ = std::move(inv);
  return out;
}

PermTable PermTable::compose(const PermTable& other) const {
  if (other.size() != size()) {
    throw Error(ErrorKind::kShape, "cannot compose permutations of size " +
                                       std::to_string(size()) + " and " +
                                       std::to_string(other.size()));
  }
  PermTable out;
  out.map_.resize(size());
  for (std::size_t i = 0; i < size(); ++i) out.map_[i] = map_[other.map_[i]];
  return out;
}

std::vector<std::uint32_t> PermTable::apply(std::span<const std::uint32_t> ids) const {
  std::vector<std::uint32_t> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (id >= map_.size()) {
      throw Error(ErrorKind::kRange, "index " + std::to_string(id) +
                                         " outside permutation of size " +
                                         std::to_string(map_.size()));
    }
    out.push_back(map_[id]);
  }
  return out;
}

std::vector<double> PermTable::permute(std::span<const double> x) const {
  if (x.size() != map_.size()) {
    throw Error(ErrorKind::kShape, "vector of length " + std::to_string(x.size()) +
                                       " vs permutation of size " +
                                       std::to_string(map_.size()));
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[map_[i]] = x[i];
  return out;
}

void PermTable::swap_images(std::size_t a, std::size_t b) { std::swap(map_[a], map_[b]); }

PermTable block_diagonal(std::span<const PermTable> blocks) {
  std::vector<std::uint32_t> map;
  std::uint32_t offset = 0;
  for (const auto& block : blocks) {
    for (auto v : block.map()) map.push_back(offset + v);
    offset += static_cast<std::uint32_t>(block.size());
  }
  return PermTable(std::move(map));
}

Tensor2 permute_axes(const Tensor2& a, const PermTable& row_perm, const PermTable& col_perm) {
  const bool rows = row_perm.size() != 0;
  const bool cols = col_perm.size() != 0;
  if ((rows && row_perm.size() != a.rows()) || (cols && col_perm.size() != a.cols())) {
    throw Error(ErrorKind::kShape, "permutation sizes (" + std::to_string(row_perm.size()) +
                                       ", " + std::to_string(col_perm.size()) +
                                       ") do not fit tensor " + a.shape_string());
  }
  Tensor2 out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const std::size_t oi = rows ? row_perm[i] : i;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const std::size_t oj = cols ? col_perm[j] : j;
      out(oi, oj) = a(i, j);
    }
  }
  return out;
}

}  // namespace ee
