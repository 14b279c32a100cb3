#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "grad2task/param_store.hpp"
#include "grad2task/tensor.hpp"

namespace testutil {

/// Central finite difference of `f` with respect to every entry of every
/// listed parameter. Step scales with the entry's magnitude.
inline std::vector<std::vector<double>> finite_diff(g2t::ParamStore& store,
                                                    const std::vector<std::string>& names,
                                                    const std::function<double()>& f,
                                                    double h0 = 1e-5) {
    std::vector<std::vector<double>> grads;
    for (const auto& name : names) {
        auto vals = store.get(name).mutable_values();
        std::vector<double> g(vals.size());
        for (std::size_t i = 0; i < vals.size(); ++i) {
            double x = vals[i];
            double h = h0 * std::max(1.0, std::abs(x));
            vals[i] = x + h;
            double fp = f();
            vals[i] = x - h;
            double fm = f();
            vals[i] = x;
            g[i] = (fp - fm) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

} // namespace testutil
