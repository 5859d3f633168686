#ifndef COVERID_AUTODIFF_HPP
#define COVERID_AUTODIFF_HPP

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "coverid/tensor.hpp"

namespace coverid {

// A value in the computation graph, with its gradient buffer.
template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = true;

    explicit Node(Tensor<T> v, bool rg = true)
        : value(std::move(v)), grad(value.shape), requires_grad(rg) {}
};

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
NodePtr<T> make_node(Tensor<T> v, bool requires_grad = true) {
    return std::make_shared<Node<T>>(std::move(v), requires_grad);
}

// Ordered record of executed ops.  backward() replays the closures in
// exact reverse execution order; gradients accumulate additively.
template <class T>
class Tape {
public:
    void record(std::function<void()> back) { back_.push_back(std::move(back)); }

    // out must be scalar (1 element); seeds its grad with 1
    void backward(const NodePtr<T>& out) {
        require(out->value.size() == 1, "Tape::backward: output is not scalar");
        out->grad.data[0] = T(1);
        for (auto it = back_.rbegin(); it != back_.rend(); ++it) (*it)();
    }

    // seed the output gradient with an arbitrary cotangent
    void backward_seeded(const NodePtr<T>& out, const Tensor<T>& seed) {
        require(seed.shape == out->value.shape, "Tape::backward_seeded: seed shape");
        out->grad = seed;
        for (auto it = back_.rbegin(); it != back_.rend(); ++it) (*it)();
    }

    size_t size() const { return back_.size(); }
    void clear() { back_.clear(); }

private:
    std::vector<std::function<void()>> back_;
};

// Trainable parameter: value/grad plus Adam state.
template <class T>
struct Parameter {
    std::string name;
    NodePtr<T> node;
    Tensor<T> adam_m, adam_v;
    int64_t step_count = 0;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v)
        : name(std::move(n)),
          node(make_node<T>(std::move(v))),
          adam_m(node->value.shape),
          adam_v(node->value.shape) {}

    Tensor<T>& value() { return node->value; }
    const Tensor<T>& value() const { return node->value; }
    Tensor<T>& grad() { return node->grad; }

    void zero_grad() { std::fill(node->grad.data.begin(), node->grad.data.end(), T(0)); }
};

}  // namespace coverid

#endif
