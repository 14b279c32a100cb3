#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "grad2task/param_store.hpp"

namespace g2t {

/// Adam optimizer with bias correction. Moment buffers persist across steps
/// and are serialized into checkpoints under reserved name prefixes.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    /// One update over all trainable parameters in the store. Requires a
    /// gradient on every trainable parameter (error otherwise); frozen
    /// parameters are untouched. Gradients are zeroed afterwards.
    void step(ParamStore& store);

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    std::uint64_t steps_taken() const { return t_; }

    // Checkpoint access.
    struct Moments {
        std::vector<double> m, v;
    };
    const std::unordered_map<std::string, Moments>& moments() const { return moments_; }
    void restore(std::uint64_t t, std::unordered_map<std::string, Moments> moments);

private:
    double lr_, beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::unordered_map<std::string, Moments> moments_;
};

} // namespace g2t
