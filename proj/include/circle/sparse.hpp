#pragma once

#include "circle/common.hpp"
#include "circle/tape.hpp"

#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

namespace circle::tape {

/// Ordered set of voxel keys with O(1) row lookup.
class KeyIndex {
 public:
  KeyIndex() = default;
  /// Keeps the given order; duplicate keys are rejected.
  explicit KeyIndex(std::vector<Key> keys);

  const std::vector<Key>& keys() const { return keys_; }
  std::size_t size() const { return keys_.size(); }
  bool empty() const { return keys_.empty(); }
  /// Row of `k`, or -1.
  int find(const Key& k) const;
  bool contains(const Key& k) const { return find(k) >= 0; }

 private:
  std::vector<Key> keys_;
  std::unordered_map<Key, int, KeyHash> rows_;
};

using KeyIndexPtr = std::shared_ptr<const KeyIndex>;

KeyIndexPtr make_index(std::vector<Key> keys);
/// Sorted unique parents floor(k / 2).
KeyIndexPtr parent_index(const KeyIndex& children);
/// All 8 children of every key, sorted.
KeyIndexPtr children_index(const KeyIndex& parents);

/// Features on an active voxel set at one resolution level (0 = finest).
struct SparseTensor {
  KeyIndexPtr index;
  int level = 0;
  Var features;

  std::size_t size() const { return index ? index->size() : 0; }
  const std::vector<Key>& keys() const { return index->keys(); }
};

/// Tap for offset (dx, dy, dz) in {-1, 0, 1}^3 of a 3x3x3 kernel.
constexpr int conv_tap(int dx, int dy, int dz) { return (dx + 1) + 3 * (dy + 1) + 9 * (dz + 1); }

/// out[k] = sum over active neighbors k + d of x[k + d] * W[tap(d)].
std::shared_ptr<const Rulebook> submanifold_rules(const KeyIndex& index);
/// Child slot of every input key into its parent row of `out`.
std::shared_ptr<const Rulebook> downsample_rules(const KeyIndex& in, const KeyIndex& out);
/// Parent row of every target key, by the target's child slot; parents missing
/// from `in` contribute nothing.
std::shared_ptr<const Rulebook> upsample_rules(const KeyIndex& in, const KeyIndex& targets);

/// Submanifold 3x3x3 convolution; kernel is 27 x Cin x Cout. Active set unchanged.
SparseTensor sparse_conv(const SparseTensor& x, const Var& kernel);
/// Stride-2 2x2x2 convolution; kernel is 8 x Cin x Cout. Output keys floor(k / 2).
SparseTensor sparse_down(const SparseTensor& x, const Var& kernel);
/// Transposed stride-2 convolution onto `targets` (each a child of some key in x
/// or of an absent parent); kernel is 8 x Cin x Cout.
SparseTensor sparse_up(const SparseTensor& x, const Var& kernel, KeyIndexPtr targets);

}  // namespace circle::tape
