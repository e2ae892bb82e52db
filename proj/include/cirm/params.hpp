#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cirm/tensor.hpp"

namespace cirm {

// Named parameter tensors in a fixed insertion order. Optimizer state,
// checkpoints and gradient reports all key off this order.
class ParameterStore {
public:
    void add(std::string name, Tensor t) {
        items_.emplace_back(std::move(name), std::move(t));
    }

    std::size_t count() const { return items_.size(); }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.size();
        return n;
    }

    Tensor& operator[](std::size_t i) { return items_[i].second; }
    const Tensor& operator[](std::size_t i) const { return items_[i].second; }
    const std::string& name(std::size_t i) const { return items_[i].first; }

    Tensor* find(const std::string& name) {
        for (auto& [n, t] : items_)
            if (n == name) return &t;
        return nullptr;
    }
    const Tensor* find(const std::string& name) const {
        return const_cast<ParameterStore*>(this)->find(name);
    }

    Tensor& at(const std::string& name) {
        Tensor* t = find(name);
        if (!t) throw LookupError("parameter not found: " + name);
        return *t;
    }

    // Same names and shapes, zero values. Used as a gradient accumulator.
    ParameterStore zeros_like() const {
        ParameterStore g;
        for (const auto& [n, t] : items_) g.add(n, Tensor(t.shape()));
        return g;
    }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

}  // namespace cirm
