#include "grad2task/param_store.hpp"

#include <stdexcept>

namespace g2t {

Tensor& ParamStore::create(const std::string& name, Tensor init, bool trainable) {
    if (index_.count(name)) {
        throw std::invalid_argument("ParamStore: duplicate parameter name '" + name + "'");
    }
    if (!init.defined()) throw std::invalid_argument("ParamStore: undefined tensor for '" + name + "'");
    init.node()->requires_grad = true;
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(init), trainable});
    return entries_.back().tensor;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

Tensor& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
    return entries_[it->second].tensor;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
    return entries_[it->second].tensor;
}

void ParamStore::set_trainable(const std::string& name, bool trainable) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
    entries_[it->second].trainable = trainable;
}

void ParamStore::set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (auto& e : entries_) {
        if (e.name.rfind(prefix, 0) == 0) e.trainable = trainable;
    }
}

bool ParamStore::trainable(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
    return entries_[it->second].trainable;
}

void ParamStore::set_requires_grad_prefix(const std::string& prefix, bool requires_grad) {
    for (auto& e : entries_) {
        if (e.name.rfind(prefix, 0) == 0) e.tensor.node()->requires_grad = requires_grad;
    }
}

void ParamStore::zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

std::size_t ParamStore::num_values() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
}

} // namespace g2t
