#include "grad2task/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace g2t {

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr < 0.0) throw std::invalid_argument("Adam: negative learning rate");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw std::invalid_argument("Adam: betas must be in [0, 1)");
    }
}

void Adam::step(ParamStore& store) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& e : store.entries()) {
        if (!e.trainable) {
            e.tensor.zero_grad();
            continue;
        }
        if (!e.tensor.has_grad()) {
            throw std::runtime_error("Adam: trainable parameter '" + e.name +
                                     "' has no gradient");
        }
        auto& mom = moments_[e.name];
        std::size_t n = e.tensor.size();
        if (mom.m.empty()) {
            mom.m.assign(n, 0.0);
            mom.v.assign(n, 0.0);
        }
        if (mom.m.size() != n) {
            throw std::runtime_error("Adam: moment size mismatch for '" + e.name + "'");
        }
        auto g = e.tensor.grad();
        auto w = e.tensor.mutable_values();
        for (std::size_t i = 0; i < n; ++i) {
            mom.m[i] = beta1_ * mom.m[i] + (1.0 - beta1_) * g[i];
            mom.v[i] = beta2_ * mom.v[i] + (1.0 - beta2_) * g[i] * g[i];
            double mhat = mom.m[i] / bc1;
            double vhat = mom.v[i] / bc2;
            w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
        e.tensor.zero_grad();
    }
}

void Adam::restore(std::uint64_t t, std::unordered_map<std::string, Moments> moments) {
    t_ = t;
    moments_ = std::move(moments);
}

} // namespace g2t
