#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "grad2task/tensor.hpp"

namespace g2t {

/// Named parameter tensors with stable (insertion) iteration order and a
/// per-name trainable flag. Frozen parameters never receive optimizer
/// updates; requires-grad can be toggled independently so frozen parameters
/// can still expose gradients (used for Fisher feature extraction).
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
        bool trainable = true;
    };

    Tensor& create(const std::string& name, Tensor init, bool trainable = true);

    bool has(const std::string& name) const;
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;

    void set_trainable(const std::string& name, bool trainable);
    void set_trainable_prefix(const std::string& prefix, bool trainable);
    bool trainable(const std::string& name) const;

    void set_requires_grad_prefix(const std::string& prefix, bool requires_grad);

    void zero_grads();

    std::size_t size() const { return entries_.size(); }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    std::size_t num_values() const; // total scalar count

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace g2t
