// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vpq/errors.hpp"
#include "vpq/tensor.hpp"

namespace vpq {

/// Ordered collection of named tensors. Insertion order is the serialisation
/// order and the order gradients are reduced in.
template <typename T>
class BasicParamStore {
 public:
  struct Entry {
    std::string name;
    BasicTensor<T> value;
  };

  std::size_t add(std::string name, BasicTensor<T> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.size() - 1;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  BasicTensor<T>& operator[](const std::string& name) { return entries_[index_of(name)].value; }
  const BasicTensor<T>& operator[](const std::string& name) const {
    return entries_[index_of(name)].value;
  }

  Entry& entry(std::size_t i) { return entries_.at(i); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  std::size_t size() const noexcept { return entries_.size(); }
  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Same names and shapes, zero-filled.
  BasicParamStore zeros_like() const {
    BasicParamStore out;
    for (const auto& e : entries_) out.add(e.name, BasicTensor<T>(e.value.shape()));
    return out;
  }

  template <typename U>
  BasicParamStore<U> cast() const {
    BasicParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

  friend bool operator==(const BasicParamStore& a, const BasicParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value))
        return false;
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

using ParamStore = BasicParamStore<float>;

/// Gradients share the parameter layout.
template <typename T>
using BasicGradStore = BasicParamStore<T>;
using GradStore = BasicGradStore<float>;

}  // namespace vpq
