#ifndef COVERID_GRADSUITE_HPP
#define COVERID_GRADSUITE_HPP

#include <vector>

#include "coverid/gradcheck.hpp"
#include "coverid/model.hpp"

namespace coverid {

// Central-difference checks over every differentiable op plus the full
// mini-model loss, all at 64-bit.  inject_broken adds a fixture op with
// a deliberately wrong gradient so the harness can prove it catches
// failures.
inline std::vector<GradCheckReport> run_gradient_suite(uint64_t seed,
                                                       bool inject_broken = false) {
    std::vector<GradCheckReport> reports;
    Rng rng(seed);

    auto check = [&](const std::string& name, std::vector<NodePtr<double>> inputs,
                     auto build, size_t max_coords = static_cast<size_t>(-1)) {
        reports.push_back(gradient_check(name, std::move(inputs), build, seed, max_coords));
    };

    {
        auto x = make_node<double>(random_tensor({2, 3, 6, 7}, rng));
        auto w = make_node<double>(random_tensor({4, 3, 3, 3}, rng));
        check("conv2d", {x, w}, [](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
            return ops::conv2d(t, in[0], in[1], 2, 1, 1, 1);
        });
    }
    {
        auto x = make_node<double>(random_tensor({3, 4, 5, 5}, rng));
        auto g = make_node<double>(random_tensor({4}, rng, 0.5, 1.5));
        auto b = make_node<double>(random_tensor({4}, rng));
        check("batch_norm2d_train", {x, g, b},
              [](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
                  RunningStats<double> stats(4);
                  return ops::batch_norm2d(t, in[0], in[1], in[2], stats, NormMode::kTrain);
              });
        check("batch_norm2d_eval", {x, g, b},
              [](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
                  RunningStats<double> stats(4);
                  for (size_t i = 0; i < 4; ++i) {
                      stats.mean[i] = 0.1 * static_cast<double>(i);
                      stats.var[i] = 1.0 + 0.2 * static_cast<double>(i);
                  }
                  return ops::batch_norm2d(t, in[0], in[1], in[2], stats, NormMode::kEval);
              });
    }
    {
        auto x = make_node<double>(random_tensor({4, 6}, rng));
        auto g = make_node<double>(random_tensor({6}, rng, 0.5, 1.5));
        auto b = make_node<double>(random_tensor({6}, rng));
        check("batch_norm1d_train", {x, g, b},
              [](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
                  RunningStats<double> stats(6);
                  return ops::batch_norm1d(t, in[0], in[1], in[2], stats, NormMode::kTrain);
              });
    }
    {
        auto x = make_node<double>(random_tensor({2, 3, 4, 5}, rng));
        auto g = make_node<double>(random_tensor({3}, rng, 0.5, 1.5));
        auto b = make_node<double>(random_tensor({3}, rng));
        check("instance_norm2d", {x, g, b},
              [](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
                  return ops::instance_norm2d(t, in[0], in[1], in[2]);
              });
    }
    {
        auto x = make_node<double>(random_tensor_off_zero({2, 3, 5, 5}, rng, 0.1));
        check("relu", {x}, [](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
            return ops::relu(t, in[0]);
        });
    }
    {
        auto x = make_node<double>(random_tensor({2, 2, 7, 7}, rng));
        check("max_pool2d", {x}, [](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
            return ops::max_pool2d(t, in[0], 3, 2, 1);
        });
    }
    {
        auto x = make_node<double>(random_tensor({3, 5}, rng));
        auto w = make_node<double>(random_tensor({4, 5}, rng));
        auto b = make_node<double>(random_tensor({4}, rng));
        check("linear", {x, w, b}, [](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
            return ops::linear(t, in[0], in[1], in[2]);
        });
    }
    {
        auto x = make_node<double>(random_tensor({4, 6}, rng));
        std::vector<int> labels{0, 2, 5, 1};
        check("softmax_cross_entropy", {x},
              [labels](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
                  return ops::softmax_cross_entropy(t, in[0], labels);
              });
    }
    {
        auto x = make_node<double>(random_tensor({2, 3, 4, 4}, rng, 0.1, 1.0));
        auto p = make_node<double>(Tensor<double>({1}, 3.0));
        check("gem_pool_x_and_p", {x, p},
              [](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
                  return ops::gem_pool(t, in[0], in[1]);
              });
        auto pf = make_node<double>(Tensor<double>({1}, 2.5));
        check("gem_pool_split", {x, p, pf},
              [](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
                  return ops::gem_pool_split(t, in[0], in[1], in[2]);
              });
    }
    {
        auto f = make_node<double>(random_tensor({8, 4}, rng));
        std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
        check("triplet_batch_hard", {f},
              [labels](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
                  return ops::triplet_batch_hard(t, in[0], labels, 0.3);
              });
    }
    {
        // full mini model, CE + triplet, coordinate-subsampled
        ModelConfig cfg = ModelConfig::mini(2);
        auto model = std::make_shared<ResNetIbnModel<double>>(cfg, seed + 17);
        auto input = make_node<double>(random_tensor({4, 1, 84, 8}, rng, 0.0, 1.0));
        std::vector<NodePtr<double>> inputs{input};
        for (auto* p : model->parameters()) inputs.push_back(p->node);
        // unbalanced on purpose: with balanced labels and near-uniform
        // softmax the bnneck.beta gradient cancels to ~1e-12, below what
        // central differences can resolve
        std::vector<int> labels{0, 0, 0, 1};
        check("mini_model_loss", inputs,
              [model, labels](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
                  auto out = model->forward(t, in[0], NormMode::kTrain, ClassifierInput::kFc);
                  auto ce = ops::softmax_cross_entropy(t, out.logits, labels);
                  auto tri = ops::triplet_batch_hard(t, out.f_t, labels, 0.3);
                  return ops::add(t, ce, tri);
              },
              /*max_coords=*/3);
    }
    if (inject_broken) {
        // fixture: forward x^2, backward claims 3x — must be caught
        auto x = make_node<double>(random_tensor({5}, rng, 0.5, 1.5));
        check("broken_fixture", {x},
              [](Tape<double>& t, const std::vector<NodePtr<double>>& in) {
                  auto x = in[0];
                  auto out = make_node<double>(Tensor<double>(x->value.shape));
                  for (size_t i = 0; i < x->value.size(); ++i)
                      out->value[i] = x->value[i] * x->value[i];
                  t.record([x, out]() {
                      for (size_t i = 0; i < x->value.size(); ++i)
                          x->grad[i] += 3.0 * x->value[i] * out->grad[i];
                  });
                  return out;
              });
    }
    return reports;
}

}  // namespace coverid

#endif
