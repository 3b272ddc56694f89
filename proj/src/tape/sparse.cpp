#include "circle/sparse.hpp"

#include <algorithm>

namespace circle::tape {

KeyIndex::KeyIndex(std::vector<Key> keys) : keys_(std::move(keys)) {
  rows_.reserve(keys_.size() * 2);
  for (std::size_t i = 0; i < keys_.size(); ++i) {
    if (!rows_.emplace(keys_[i], static_cast<int>(i)).second) {
      throw Error(ErrorCode::InvalidArgument, "duplicate key in sparse index");
    }
  }
}

int KeyIndex::find(const Key& k) const {
  const auto it = rows_.find(k);
  return it == rows_.end() ? -1 : it->second;
}

KeyIndexPtr make_index(std::vector<Key> keys) {
  return std::make_shared<const KeyIndex>(std::move(keys));
}

KeyIndexPtr parent_index(const KeyIndex& children) {
  std::vector<Key> parents;
  parents.reserve(children.size());
  for (const auto& k : children.keys()) parents.push_back(k.parent());
  std::sort(parents.begin(), parents.end());
  parents.erase(std::unique(parents.begin(), parents.end()), parents.end());
  return make_index(std::move(parents));
}

KeyIndexPtr children_index(const KeyIndex& parents) {
  std::vector<Key> out;
  out.reserve(parents.size() * 8);
  for (const auto& k : parents.keys()) {
    for (int s = 0; s < 8; ++s) out.push_back(k.child(s));
  }
  std::sort(out.begin(), out.end());
  return make_index(std::move(out));
}

std::shared_ptr<const Rulebook> submanifold_rules(const KeyIndex& index) {
  auto rules = std::make_shared<Rulebook>();
  rules->out_rows = index.size();
  rules->taps.resize(27);
  const auto& keys = index.keys();
  for (int dz = -1; dz <= 1; ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        auto& pairs = rules->taps[conv_tap(dx, dy, dz)];
        const Key d{dx, dy, dz};
        for (std::size_t o = 0; o < keys.size(); ++o) {
          const int i = index.find(keys[o] + d);
          if (i >= 0) pairs.emplace_back(i, static_cast<int>(o));
        }
      }
    }
  }
  return rules;
}

std::shared_ptr<const Rulebook> downsample_rules(const KeyIndex& in, const KeyIndex& out) {
  auto rules = std::make_shared<Rulebook>();
  rules->out_rows = out.size();
  rules->taps.resize(8);
  const auto& keys = in.keys();
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const int o = out.find(keys[i].parent());
    if (o < 0) throw Error(ErrorCode::InvalidArgument, "downsample target lacks a parent");
    rules->taps[keys[i].child_slot()].emplace_back(static_cast<int>(i), o);
  }
  return rules;
}

std::shared_ptr<const Rulebook> upsample_rules(const KeyIndex& in, const KeyIndex& targets) {
  auto rules = std::make_shared<Rulebook>();
  rules->out_rows = targets.size();
  rules->taps.resize(8);
  const auto& keys = targets.keys();
  for (std::size_t o = 0; o < keys.size(); ++o) {
    const int i = in.find(keys[o].parent());
    if (i >= 0) rules->taps[keys[o].child_slot()].emplace_back(i, static_cast<int>(o));
  }
  return rules;
}

SparseTensor sparse_conv(const SparseTensor& x, const Var& kernel) {
  return {x.index, x.level, rulebook_conv(x.features, kernel, submanifold_rules(*x.index))};
}

SparseTensor sparse_down(const SparseTensor& x, const Var& kernel) {
  auto out = parent_index(*x.index);
  auto rules = downsample_rules(*x.index, *out);
  return {out, x.level + 1, rulebook_conv(x.features, kernel, rules)};
}

SparseTensor sparse_up(const SparseTensor& x, const Var& kernel, KeyIndexPtr targets) {
  auto rules = upsample_rules(*x.index, *targets);
  return {targets, x.level - 1, rulebook_conv(x.features, kernel, rules)};
}

}  // namespace circle::tape
