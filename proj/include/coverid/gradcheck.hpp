#ifndef COVERID_GRADCHECK_HPP
#define COVERID_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "coverid/autodiff.hpp"
#include "coverid/rng.hpp"

namespace coverid {

struct GradCheckReport {
    std::string name;
    double max_rel_err = 0.0;
    size_t coords_checked = 0;
    bool pass(double tol = 1e-6) const { return max_rel_err < tol; }
};

// Compares the analytic gradient of a random scalar projection of the
// output against central finite differences (h = 1e-5).  Runs in 64-bit
// only; rel err = |a - n| / max(1e-8, |a| + |n|).
//
// `build` must construct the forward graph from `inputs` on the given
// tape and return the output node.  It is re-invoked for every numeric
// evaluation, so any state it creates (e.g. BN running stats) must be
// fresh per call.
inline GradCheckReport gradient_check(
    const std::string& name,
    std::vector<NodePtr<double>> inputs,
    const std::function<NodePtr<double>(Tape<double>&,
                                        const std::vector<NodePtr<double>>&)>& build,
    uint64_t seed, size_t max_coords_per_input = static_cast<size_t>(-1)) {
    const double h = 1e-5;
    Rng rng(seed ^ 0xa5a5a5a5ULL);

    // analytic pass
    Tape<double> tape;
    auto out = build(tape, inputs);
    Tensor<double> proj(out->value.shape);
    for (size_t i = 0; i < proj.size(); ++i) proj[i] = rng.uniform(-1.0, 1.0);
    for (auto& in : inputs)
        std::fill(in->grad.data.begin(), in->grad.data.end(), 0.0);
    tape.backward_seeded(out, proj);
    std::vector<Tensor<double>> analytic;
    for (auto& in : inputs) analytic.push_back(in->grad);

    auto eval = [&]() {
        Tape<double> t;
        auto o = build(t, inputs);
        double s = 0;
        for (size_t i = 0; i < o->value.size(); ++i) s += proj[i] * o->value[i];
        return s;
    };

    GradCheckReport rep{name, 0.0, 0};
    for (size_t k = 0; k < inputs.size(); ++k) {
        auto& in = inputs[k];
        if (!in->requires_grad) continue;
        const size_t n = in->value.size();
        std::vector<size_t> coords;
        if (n <= max_coords_per_input) {
            coords.resize(n);
            for (size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (size_t i = 0; i < max_coords_per_input; ++i)
                coords.push_back(static_cast<size_t>(
                    rng.uniform_int(0, static_cast<int64_t>(n) - 1)));
        }
        for (size_t i : coords) {
            const double orig = in->value[i];
            in->value[i] = orig + h;
            double fp = eval();
            in->value[i] = orig - h;
            double fm = eval();
            in->value[i] = orig;
            double num = (fp - fm) / (2 * h);
            double ana = analytic[k][i];
            double rel = std::abs(ana - num) / std::max(1e-8, std::abs(ana) + std::abs(num));
            if (rel > rep.max_rel_err) rep.max_rel_err = rel;
            ++rep.coords_checked;
        }
    }
    return rep;
}

inline Tensor<double> random_tensor(std::vector<size_t> shape, Rng& rng,
                                    double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// values bounded away from zero by `margin` (for ReLU-style kinks)
inline Tensor<double> random_tensor_off_zero(std::vector<size_t> shape, Rng& rng,
                                             double margin = 0.1) {
    Tensor<double> t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) {
        double v = rng.uniform(margin, 1.0);
        t[i] = rng.uniform() < 0.5 ? -v : v;
    }
    return t;
}

}  // namespace coverid

#endif
