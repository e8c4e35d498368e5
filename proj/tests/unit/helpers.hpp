#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "pdial/autograd.hpp"

namespace testutil {

using pdial::Parameter;
using pdial::Tensor;
using pdial::Var;

inline Tensor<double> randn(pdial::Shape s, std::mt19937_64& rng, double sd = 1.0) {
    Tensor<double> t(std::move(s));
    std::normal_distribution<double> d(0.0, sd);
    for (auto& v : t.data) v = d(rng);
    return t;
}

/// Largest element-wise relative error between analytic and central-difference
/// gradients of f over every entry of every parameter.
inline double fd_max_rel_error(std::vector<Parameter<double>*> params, const std::function<Var<double>()>& f,
                               double h = 1e-5, double floor = 1e-8) {
    for (auto* p : params) p->zero_grad();
    pdial::backward(f());
    double worst = 0.0;
    for (auto* p : params) {
        const std::vector<double> analytic = p->grad().data;
        for (std::size_t i = 0; i < p->value().size(); ++i) {
            const double keep = p->value().data[i];
            p->value().data[i] = keep + h;
            const double up = f().item();
            p->value().data[i] = keep - h;
            const double down = f().item();
            p->value().data[i] = keep;
            const double numeric = (up - down) / (2 * h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
    }
    return worst;
}

/// Scalar readout that mixes every entry of a matrix nonlinearly, so each
/// entry gets its own gradient.
inline Var<double> readout(const Var<double>& x, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    auto w = pdial::constant(randn({x.cols(), 3}, rng));
    return pdial::sum(pdial::gelu(pdial::matmul(x, w)));
}

}  // namespace testutil
