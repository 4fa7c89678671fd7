#pragma once

// Internal: odometer-style iteration over N strided operands sharing one
// iteration shape. Used by broadcasting, reductions, and layout ops.

#include "bfr/tensor.hpp"

#include <array>
#include <vector>

namespace bfr::detail {

inline std::vector<Index> contiguous_strides(const Shape& shape) {
  std::vector<Index> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[static_cast<std::size_t>(i)] =
        strides[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  }
  return strides;
}

/// Strides for reading `shape` as if broadcast to `target` (same rank after
/// left-padding with ones); broadcast axes get stride 0.
inline std::vector<Index> broadcast_strides(const Shape& shape, const Shape& target) {
  const std::size_t rank = target.size();
  Shape padded(rank, 1);
  std::copy(shape.begin(), shape.end(), padded.begin() + static_cast<long>(rank - shape.size()));
  auto strides = contiguous_strides(padded);
  for (std::size_t i = 0; i < rank; ++i) {
    if (padded[i] == 1) strides[i] = 0;
  }
  return strides;
}

template <std::size_t N>
struct StridedLoop {
  Shape extents;
  std::array<std::vector<Index>, N> strides;
  std::array<Index, N> offsets{};

  /// Drops unit axes and merges adjacent axes that are contiguous for every operand.
  void coalesce() {
    Shape ext;
    std::array<std::vector<Index>, N> str;
    for (std::size_t i = 0; i < extents.size(); ++i) {
      if (extents[i] == 1) continue;
      if (!ext.empty()) {
        bool mergeable = true;
        for (std::size_t k = 0; k < N; ++k) {
          if (str[k].back() != strides[k][i] * extents[i]) mergeable = false;
        }
        if (mergeable) {
          ext.back() *= extents[i];
          for (std::size_t k = 0; k < N; ++k) str[k].back() = strides[k][i];
          continue;
        }
      }
      ext.push_back(extents[i]);
      for (std::size_t k = 0; k < N; ++k) str[k].push_back(strides[k][i]);
    }
    extents = std::move(ext);
    strides = std::move(str);
  }

  template <typename F>
  void run(F&& f) const {
    const int nd = static_cast<int>(extents.size());
    if (nd == 0) {
      f(offsets);
      return;
    }
    std::array<Index, N> inner_stride;
    for (std::size_t k = 0; k < N; ++k) inner_stride[k] = strides[k].back();
    const Index inner = extents.back();
    std::vector<Index> counter(static_cast<std::size_t>(nd), 0);
    std::array<Index, N> base = offsets;
    while (true) {
      std::array<Index, N> idx = base;
      for (Index i = 0; i < inner; ++i) {
        f(idx);
        for (std::size_t k = 0; k < N; ++k) idx[k] += inner_stride[k];
      }
      int d = nd - 2;
      for (; d >= 0; --d) {
        const auto du = static_cast<std::size_t>(d);
        if (++counter[du] < extents[du]) {
          for (std::size_t k = 0; k < N; ++k) base[k] += strides[k][du];
          break;
        }
        for (std::size_t k = 0; k < N; ++k) base[k] -= strides[k][du] * (extents[du] - 1);
        counter[du] = 0;
      }
      if (d < 0) break;
    }
  }
};

}  // namespace bfr::detail
