#ifndef COVERID_MODEL_HPP
#define COVERID_MODEL_HPP

#include <array>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "coverid/ops.hpp"
#include "coverid/rng.hpp"

namespace coverid {

enum class BlockKind { kBasic, kBottleneck };
enum class ClassifierInput { kFc, kFt };

struct ModelConfig {
    std::array<size_t, 4> stage_blocks{1, 1, 1, 1};
    std::array<size_t, 4> stage_widths{16, 32, 64, 128};
    BlockKind block_kind = BlockKind::kBasic;
    std::set<size_t> ibn_stages{1, 2, 3};
    size_t num_classes = 2;
    double gem_p_init = 3.0;
    size_t embed_dim = 0;    // 0 = projection head disabled
    bool gem_split = false;
    std::string preset_name = "mini";

    size_t expansion() const { return block_kind == BlockKind::kBottleneck ? 4 : 1; }
    size_t output_channels() const { return stage_widths[3] * expansion(); }
    // dimension of f_t / f_c
    size_t feature_dim() const { return output_channels() * (gem_split ? 2 : 1); }
    // dimension of the retrieval embedding
    size_t embedding_dim() const { return embed_dim > 0 ? embed_dim : feature_dim(); }

    static ModelConfig mini(size_t num_classes) {
        ModelConfig c;
        c.num_classes = num_classes;
        return c;
    }
    static ModelConfig full(size_t num_classes) {
        ModelConfig c;
        c.stage_blocks = {3, 4, 6, 3};
        c.stage_widths = {64, 128, 256, 512};
        c.block_kind = BlockKind::kBottleneck;
        c.num_classes = num_classes;
        c.preset_name = "full";
        return c;
    }
};

template <class T>
struct ForwardOutput {
    NodePtr<T> feature_map;  // [N,K,H,W']
    NodePtr<T> f_t;          // GeM output
    NodePtr<T> f_c;          // post-BNNeck
    NodePtr<T> embedding;    // projected f_c (or f_c when head disabled)
    NodePtr<T> logits;       // [N,C]
};

template <class T>
class ResNetIbnModel {
public:
    ResNetIbnModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
        Rng rng(seed);
        const size_t in_ch = 1;
        stem_conv_ = make_conv("stem.conv", cfg.stage_widths[0], in_ch, 7, 7, 2, 2, 3, 3, rng);
        stem_bn_ = make_bn("stem.bn", cfg.stage_widths[0]);

        size_t prev = cfg.stage_widths[0];
        for (size_t s = 0; s < 4; ++s) {
            // frequency/time stride of each stage's first block; chosen so an
            // 84-bin input yields H=6 and the time axis is reduced 8x overall
            const size_t sh = (s == 1 || s == 2) ? 2 : 1;
            const size_t sw = (s == 1) ? 2 : 1;
            std::vector<Block> stage;
            const size_t width = cfg.stage_widths[s];
            const size_t out_ch = width * cfg.expansion();
            const bool ibn = cfg.ibn_stages.count(s + 1) > 0;
            for (size_t b = 0; b < cfg.stage_blocks[s]; ++b) {
                const std::string pfx = "s" + std::to_string(s + 1) + ".b" + std::to_string(b);
                Block blk;
                blk.bottleneck = (cfg.block_kind == BlockKind::kBottleneck);
                blk.ibn = ibn;
                const size_t bsh = (b == 0) ? sh : 1;
                const size_t bsw = (b == 0) ? sw : 1;
                if (blk.bottleneck) {
                    blk.conv1 = make_conv(pfx + ".conv1", width, prev, 1, 1, bsh, bsw, 0, 0, rng);
                    blk.conv2 = make_conv(pfx + ".conv2", width, width, 3, 3, 1, 1, 1, 1, rng);
                    blk.conv3 = make_conv(pfx + ".conv3", out_ch, width, 1, 1, 1, 1, 0, 0, rng);
                    blk.bn3 = make_bn(pfx + ".bn3", out_ch);
                } else {
                    blk.conv1 = make_conv(pfx + ".conv1", width, prev, 3, 3, bsh, bsw, 1, 1, rng);
                    blk.conv2 = make_conv(pfx + ".conv2", out_ch, width, 3, 3, 1, 1, 1, 1, rng);
                }
                if (ibn) {
                    require(width % 2 == 0, "ibn block: odd first-conv channel count");
                    blk.in1 = make_in(pfx + ".in1", width / 2);
                    blk.bn1 = make_bn(pfx + ".bn1", width / 2);
                } else {
                    blk.bn1 = make_bn(pfx + ".bn1", width);
                }
                blk.bn2 = make_bn(pfx + ".bn2", blk.bottleneck ? width : out_ch);
                if (bsh != 1 || bsw != 1 || prev != out_ch) {
                    blk.has_shortcut = true;
                    blk.sc_conv = make_conv(pfx + ".sc.conv", out_ch, prev, 1, 1, bsh, bsw, 0, 0, rng);
                    blk.sc_bn = make_bn(pfx + ".sc.bn", out_ch);
                }
                stage.push_back(std::move(blk));
                prev = out_ch;
            }
            stages_.push_back(std::move(stage));
        }

        gem_p_ = add_param("gem.p", Tensor<T>({1}, static_cast<T>(cfg.gem_p_init)));
        if (cfg.gem_split)
            gem_p_f_ = add_param("gem.p_f", Tensor<T>({1}, static_cast<T>(cfg.gem_p_init)));

        const size_t D = cfg.feature_dim();
        bnneck_ = make_bn("bnneck", D);

        if (cfg.embed_dim > 0) {
            Tensor<T> pw({cfg.embed_dim, D});
            const double std = std::sqrt(2.0 / static_cast<double>(D));
            for (size_t i = 0; i < pw.size(); ++i) pw[i] = static_cast<T>(rng.normal() * std);
            proj_w_ = add_param("proj.w", std::move(pw));
            proj_b_ = add_param("proj.b", Tensor<T>({cfg.embed_dim}));
        }

        Tensor<T> cw({cfg.num_classes, cfg.embedding_dim()});
        for (size_t i = 0; i < cw.size(); ++i) cw[i] = static_cast<T>(rng.normal() * 0.001);
        classifier_w_ = add_param("classifier.w", std::move(cw));
    }

    ForwardOutput<T> forward(Tape<T>& tape, const NodePtr<T>& input, NormMode mode,
                             ClassifierInput cls_in = ClassifierInput::kFc) {
        require(input->value.rank() == 4 && input->value.shape[1] == 1,
                "forward: expected [N,1,84,T] input");
        require(input->value.shape[2] == 84, "forward: expected 84 frequency bins");
        require(input->value.shape[3] >= 8, "forward: T must be >= 8");

        auto x = ops::conv2d(tape, input, stem_conv_.w->node, stem_conv_.sh,
                             stem_conv_.sw, stem_conv_.ph, stem_conv_.pw);
        x = ops::batch_norm2d(tape, x, stem_bn_->gamma->node, stem_bn_->beta->node,
                              stem_bn_->stats, mode);
        x = ops::relu(tape, x);
        x = ops::max_pool2d(tape, x, 3, 2, 1);

        for (auto& stage : stages_)
            for (auto& blk : stage) x = block_forward(tape, blk, x, mode);

        ForwardOutput<T> out;
        out.feature_map = x;
        if (cfg_.gem_split)
            out.f_t = ops::gem_pool_split(tape, x, gem_p_->node, gem_p_f_->node);
        else
            out.f_t = ops::gem_pool(tape, x, gem_p_->node);
        out.f_c = ops::batch_norm1d(tape, out.f_t, bnneck_->gamma->node,
                                    bnneck_->beta->node, bnneck_->stats, mode);
        out.embedding = (cfg_.embed_dim > 0)
                            ? ops::linear(tape, out.f_c, proj_w_->node, proj_b_->node)
                            : out.f_c;
        NodePtr<T> head_in;
        if (cls_in == ClassifierInput::kFt) {
            require(cfg_.embed_dim == 0, "classifier-on-f_t requires projection head off");
            head_in = out.f_t;
        } else {
            head_in = out.embedding;
        }
        out.logits = ops::linear(tape, head_in, classifier_w_->node);
        return out;
    }

    const ModelConfig& config() const { return cfg_; }

    std::vector<Parameter<T>*>& parameters() { return params_; }

    // named non-trainable buffers (BN running stats)
    std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (auto& [name, bn] : bns_) {
            out.emplace_back(name + ".running_mean", &bn->stats.mean);
            out.emplace_back(name + ".running_var", &bn->stats.var);
        }
        return out;
    }

    Parameter<T>* gem_p() { return gem_p_; }
    Parameter<T>* gem_p_f() { return gem_p_f_; }

private:
    struct Conv {
        Parameter<T>* w = nullptr;
        size_t sh = 1, sw = 1, ph = 0, pw = 0;
    };
    struct Bn {
        Parameter<T>* gamma = nullptr;
        Parameter<T>* beta = nullptr;
        RunningStats<T> stats;
    };
    struct In {
        Parameter<T>* gamma = nullptr;
        Parameter<T>* beta = nullptr;
    };
    struct Block {
        bool bottleneck = false;
        bool ibn = false;
        Conv conv1, conv2, conv3;
        In in1;                      // IN half (when ibn)
        std::shared_ptr<Bn> bn1;     // BN half (when ibn) or full first norm
        std::shared_ptr<Bn> bn2, bn3;
        bool has_shortcut = false;
        Conv sc_conv;
        std::shared_ptr<Bn> sc_bn;
    };

    Parameter<T>* add_param(const std::string& name, Tensor<T> v) {
        owned_.push_back(std::make_unique<Parameter<T>>(name, std::move(v)));
        params_.push_back(owned_.back().get());
        return owned_.back().get();
    }

    Conv make_conv(const std::string& name, size_t out_ch, size_t in_ch, size_t kh,
                   size_t kw, size_t sh, size_t sw, size_t ph, size_t pw, Rng& rng) {
        Tensor<T> w({out_ch, in_ch, kh, kw});
        const double std = std::sqrt(2.0 / static_cast<double>(in_ch * kh * kw));
        for (size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.normal() * std);
        Conv c;
        c.w = add_param(name + ".w", std::move(w));
        c.sh = sh; c.sw = sw; c.ph = ph; c.pw = pw;
        return c;
    }

    std::shared_ptr<Bn> make_bn(const std::string& name, size_t ch) {
        auto bn = std::make_shared<Bn>();
        bn->gamma = add_param(name + ".gamma", Tensor<T>({ch}, T(1)));
        bn->beta = add_param(name + ".beta", Tensor<T>({ch}));
        bn->stats = RunningStats<T>(ch);
        bns_.emplace_back(name, bn);
        return bn;
    }

    In make_in(const std::string& name, size_t ch) {
        In in;
        in.gamma = add_param(name + ".gamma", Tensor<T>({ch}, T(1)));
        in.beta = add_param(name + ".beta", Tensor<T>({ch}));
        return in;
    }

    NodePtr<T> apply_conv(Tape<T>& tape, const Conv& c, const NodePtr<T>& x) {
        return ops::conv2d(tape, x, c.w->node, c.sh, c.sw, c.ph, c.pw);
    }
    NodePtr<T> apply_bn(Tape<T>& tape, const std::shared_ptr<Bn>& bn,
                        const NodePtr<T>& x, NormMode mode) {
        return ops::batch_norm2d(tape, x, bn->gamma->node, bn->beta->node, bn->stats, mode);
    }

    NodePtr<T> block_forward(Tape<T>& tape, Block& blk, const NodePtr<T>& x, NormMode mode) {
        auto y = apply_conv(tape, blk.conv1, x);
        if (blk.ibn) {
            auto [lo, hi] = ops::split_channels(tape, y);
            lo = ops::instance_norm2d(tape, lo, blk.in1.gamma->node, blk.in1.beta->node);
            hi = ops::batch_norm2d(tape, hi, blk.bn1->gamma->node, blk.bn1->beta->node,
                                   blk.bn1->stats, mode);
            y = ops::concat_channels(tape, lo, hi);
        } else {
            y = apply_bn(tape, blk.bn1, y, mode);
        }
        y = ops::relu(tape, y);
        y = apply_conv(tape, blk.conv2, y);
        y = apply_bn(tape, blk.bn2, y, mode);
        if (blk.bottleneck) {
            y = ops::relu(tape, y);
            y = apply_conv(tape, blk.conv3, y);
            y = apply_bn(tape, blk.bn3, y, mode);
        }
        NodePtr<T> sc = x;
        if (blk.has_shortcut) {
            sc = apply_conv(tape, blk.sc_conv, x);
            sc = apply_bn(tape, blk.sc_bn, sc, mode);
        }
        return ops::relu(tape, ops::add(tape, y, sc));
    }

    ModelConfig cfg_;
    std::vector<std::unique_ptr<Parameter<T>>> owned_;
    std::vector<Parameter<T>*> params_;
    std::vector<std::pair<std::string, std::shared_ptr<Bn>>> bns_;

    Conv stem_conv_;
    std::shared_ptr<Bn> stem_bn_;
    std::vector<std::vector<Block>> stages_;
    Parameter<T>* gem_p_ = nullptr;
    Parameter<T>* gem_p_f_ = nullptr;
    std::shared_ptr<Bn> bnneck_;
    Parameter<T>* proj_w_ = nullptr;
    Parameter<T>* proj_b_ = nullptr;
    Parameter<T>* classifier_w_ = nullptr;
};

}  // namespace coverid

#endif
