#ifndef COVERID_OPS_HPP
#define COVERID_OPS_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "coverid/autodiff.hpp"

namespace coverid {

enum class NormMode { kTrain, kEval };

// Per-channel running statistics of a batch-norm layer.
template <class T>
struct RunningStats {
    Tensor<T> mean, var;
    explicit RunningStats(size_t channels = 0)
        : mean({channels}), var({channels}, T(1)) {}
};

namespace ops {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

constexpr double kNormEps = 1e-5;
constexpr double kGemEps = 1e-6;

// ---------------------------------------------------------------- conv2d

template <class T>
inline void im2col(const Tensor<T>& x, size_t n, size_t kh, size_t kw,
                   size_t sh, size_t sw, size_t ph, size_t pw,
                   size_t Ho, size_t Wo, std::vector<T>& cols) {
    const size_t C = x.shape[1], H = x.shape[2], W = x.shape[3];
    cols.assign(C * kh * kw * Ho * Wo, T(0));
    const size_t cols_w = Ho * Wo;
    for (size_t c = 0; c < C; ++c) {
        for (size_t ki = 0; ki < kh; ++ki) {
            for (size_t kj = 0; kj < kw; ++kj) {
                T* dst = cols.data() + ((c * kh + ki) * kw + kj) * cols_w;
                for (size_t oh = 0; oh < Ho; ++oh) {
                    const int64_t ih = static_cast<int64_t>(oh * sh + ki) - static_cast<int64_t>(ph);
                    if (ih < 0 || ih >= static_cast<int64_t>(H)) { dst += Wo; continue; }
                    const T* src = &x.at4(n, c, static_cast<size_t>(ih), 0);
                    for (size_t ow = 0; ow < Wo; ++ow) {
                        const int64_t iw = static_cast<int64_t>(ow * sw + kj) - static_cast<int64_t>(pw);
                        *dst++ = (iw >= 0 && iw < static_cast<int64_t>(W)) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
inline void col2im_add(const std::vector<T>& cols, Tensor<T>& gx, size_t n,
                       size_t kh, size_t kw, size_t sh, size_t sw,
                       size_t ph, size_t pw, size_t Ho, size_t Wo) {
    const size_t C = gx.shape[1], H = gx.shape[2], W = gx.shape[3];
    const size_t cols_w = Ho * Wo;
    for (size_t c = 0; c < C; ++c) {
        for (size_t ki = 0; ki < kh; ++ki) {
            for (size_t kj = 0; kj < kw; ++kj) {
                const T* src = cols.data() + ((c * kh + ki) * kw + kj) * cols_w;
                for (size_t oh = 0; oh < Ho; ++oh) {
                    const int64_t ih = static_cast<int64_t>(oh * sh + ki) - static_cast<int64_t>(ph);
                    if (ih < 0 || ih >= static_cast<int64_t>(H)) { src += Wo; continue; }
                    T* dst = &gx.at4(n, c, static_cast<size_t>(ih), 0);
                    for (size_t ow = 0; ow < Wo; ++ow) {
                        const int64_t iw = static_cast<int64_t>(ow * sw + kj) - static_cast<int64_t>(pw);
                        if (iw >= 0 && iw < static_cast<int64_t>(W)) dst[iw] += *src;
                        ++src;
                    }
                }
            }
        }
    }
}

// Bias-free cross-correlation; x [N,C,H,W], w [K,C,kh,kw].
template <class T>
NodePtr<T> conv2d(Tape<T>& tape, const NodePtr<T>& x, const NodePtr<T>& w,
                  size_t sh, size_t sw, size_t ph, size_t pw) {
    require(x->value.rank() == 4 && w->value.rank() == 4, "conv2d: rank");
    const size_t N = x->value.shape[0], C = x->value.shape[1];
    const size_t H = x->value.shape[2], W = x->value.shape[3];
    const size_t K = w->value.shape[0], kh = w->value.shape[2], kw = w->value.shape[3];
    require(w->value.shape[1] == C, "conv2d: channel mismatch " +
            shape_str(x->value.shape) + " vs " + shape_str(w->value.shape));
    require(H + 2 * ph >= kh && W + 2 * pw >= kw, "conv2d: kernel larger than padded input");
    const size_t Ho = (H + 2 * ph - kh) / sh + 1;
    const size_t Wo = (W + 2 * pw - kw) / sw + 1;
    require(Ho >= 1 && Wo >= 1, "conv2d: empty output");

    auto out = make_node<T>(Tensor<T>({N, K, Ho, Wo}));
    std::vector<T> cols;
    CMapRM<T> wm(w->value.data.data(), K, C * kh * kw);
    for (size_t n = 0; n < N; ++n) {
        im2col(x->value, n, kh, kw, sh, sw, ph, pw, Ho, Wo, cols);
        CMapRM<T> cm(cols.data(), C * kh * kw, Ho * Wo);
        MapRM<T> ym(out->value.data.data() + n * K * Ho * Wo, K, Ho * Wo);
        ym.noalias() = wm * cm;
    }

    tape.record([x, w, out, sh, sw, ph, pw, Ho, Wo]() {
        const size_t N = x->value.shape[0], C = x->value.shape[1];
        const size_t K = w->value.shape[0], kh = w->value.shape[2], kw = w->value.shape[3];
        std::vector<T> cols, gcols(C * kh * kw * Ho * Wo);
        CMapRM<T> wm(w->value.data.data(), K, C * kh * kw);
        for (size_t n = 0; n < N; ++n) {
            CMapRM<T> gym(out->grad.data.data() + n * K * Ho * Wo, K, Ho * Wo);
            if (w->requires_grad) {
                im2col(x->value, n, kh, kw, sh, sw, ph, pw, Ho, Wo, cols);
                CMapRM<T> cm(cols.data(), C * kh * kw, Ho * Wo);
                MapRM<T> gw(w->grad.data.data(), K, C * kh * kw);
                gw.noalias() += gym * cm.transpose();
            }
            if (x->requires_grad) {
                MapRM<T> gc(gcols.data(), C * kh * kw, Ho * Wo);
                gc.noalias() = wm.transpose() * gym;
                col2im_add(gcols, x->grad, n, kh, kw, sh, sw, ph, pw, Ho, Wo);
            }
        }
    });
    return out;
}

// -------------------------------------------------------- normalization

// Shared batch-norm kernel: normalizes over the index groups described
// by `group_of` (channel id per flat element).  Used by the 2-d and 1-d
// variants below.
template <class T>
NodePtr<T> batch_norm_impl(Tape<T>& tape, const NodePtr<T>& x,
                           const NodePtr<T>& gamma, const NodePtr<T>& beta,
                           RunningStats<T>& stats, NormMode mode,
                           size_t C, size_t inner, size_t batch_span) {
    // layout contract: flat index = (n * C + c) * inner + i
    const size_t N = batch_span;
    const size_t reduce_n = N * inner;
    require(mode == NormMode::kEval || N >= 2, "batch_norm: train mode needs batch size >= 2");
    require(stats.mean.size() == C && stats.var.size() == C, "batch_norm: stats size");

    auto out = make_node<T>(Tensor<T>(x->value.shape));
    std::vector<T> mean(C), inv_std(C);
    const T eps = static_cast<T>(kNormEps);

    if (mode == NormMode::kTrain) {
        for (size_t c = 0; c < C; ++c) {
            double m = 0;
            for (size_t n = 0; n < N; ++n) {
                const T* p = x->value.data.data() + (n * C + c) * inner;
                for (size_t i = 0; i < inner; ++i) m += p[i];
            }
            m /= static_cast<double>(reduce_n);
            double v = 0;
            for (size_t n = 0; n < N; ++n) {
                const T* p = x->value.data.data() + (n * C + c) * inner;
                for (size_t i = 0; i < inner; ++i) {
                    double d = p[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<double>(reduce_n);
            mean[c] = static_cast<T>(m);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(v + kNormEps));
            const T mom = static_cast<T>(0.1);
            stats.mean[c] = (T(1) - mom) * stats.mean[c] + mom * static_cast<T>(m);
            stats.var[c] = (T(1) - mom) * stats.var[c] + mom * static_cast<T>(v);
        }
    } else {
        for (size_t c = 0; c < C; ++c) {
            mean[c] = stats.mean[c];
            inv_std[c] = T(1) / std::sqrt(stats.var[c] + eps);
        }
    }

    for (size_t n = 0; n < N; ++n) {
        for (size_t c = 0; c < C; ++c) {
            const T* p = x->value.data.data() + (n * C + c) * inner;
            T* q = out->value.data.data() + (n * C + c) * inner;
            const T g = gamma->value[c], b = beta->value[c];
            for (size_t i = 0; i < inner; ++i)
                q[i] = g * (p[i] - mean[c]) * inv_std[c] + b;
        }
    }

    const bool train = (mode == NormMode::kTrain);
    tape.record([x, gamma, beta, out, mean, inv_std, C, inner, N, train]() {
        const size_t reduce_n = N * inner;
        for (size_t c = 0; c < C; ++c) {
            const T g = gamma->value[c];
            double sum_g = 0, sum_gx = 0;
            for (size_t n = 0; n < N; ++n) {
                const T* gp = out->grad.data.data() + (n * C + c) * inner;
                const T* xp = x->value.data.data() + (n * C + c) * inner;
                for (size_t i = 0; i < inner; ++i) {
                    double xh = (xp[i] - mean[c]) * inv_std[c];
                    sum_g += gp[i];
                    sum_gx += gp[i] * xh;
                }
            }
            if (gamma->requires_grad) gamma->grad[c] += static_cast<T>(sum_gx);
            if (beta->requires_grad) beta->grad[c] += static_cast<T>(sum_g);
            if (!x->requires_grad) continue;
            const double mg = sum_g / static_cast<double>(reduce_n);
            const double mgx = sum_gx / static_cast<double>(reduce_n);
            for (size_t n = 0; n < N; ++n) {
                const T* gp = out->grad.data.data() + (n * C + c) * inner;
                const T* xp = x->value.data.data() + (n * C + c) * inner;
                T* dst = x->grad.data.data() + (n * C + c) * inner;
                for (size_t i = 0; i < inner; ++i) {
                    double xh = (xp[i] - mean[c]) * inv_std[c];
                    double d = train ? (gp[i] - mg - xh * mgx) : gp[i];
                    dst[i] += static_cast<T>(g * inv_std[c] * d);
                }
            }
        }
    });
    return out;
}

template <class T>
NodePtr<T> batch_norm2d(Tape<T>& tape, const NodePtr<T>& x,
                        const NodePtr<T>& gamma, const NodePtr<T>& beta,
                        RunningStats<T>& stats, NormMode mode) {
    require(x->value.rank() == 4, "batch_norm2d: rank");
    const size_t C = x->value.shape[1];
    return batch_norm_impl(tape, x, gamma, beta, stats, mode, C,
                           x->value.shape[2] * x->value.shape[3], x->value.shape[0]);
}

template <class T>
NodePtr<T> batch_norm1d(Tape<T>& tape, const NodePtr<T>& x,
                        const NodePtr<T>& gamma, const NodePtr<T>& beta,
                        RunningStats<T>& stats, NormMode mode) {
    require(x->value.rank() == 2, "batch_norm1d: rank");
    return batch_norm_impl(tape, x, gamma, beta, stats, mode,
                           x->value.shape[1], 1, x->value.shape[0]);
}

// Per-sample per-channel normalization over (H,W); no running stats,
// same behavior in train and eval.
template <class T>
NodePtr<T> instance_norm2d(Tape<T>& tape, const NodePtr<T>& x,
                           const NodePtr<T>& gamma, const NodePtr<T>& beta) {
    require(x->value.rank() == 4, "instance_norm2d: rank");
    const size_t N = x->value.shape[0], C = x->value.shape[1];
    const size_t inner = x->value.shape[2] * x->value.shape[3];
    require(inner >= 2, "instance_norm2d: needs H*W >= 2");

    auto out = make_node<T>(Tensor<T>(x->value.shape));
    std::vector<T> mean(N * C), inv_std(N * C);
    for (size_t n = 0; n < N; ++n) {
        for (size_t c = 0; c < C; ++c) {
            const T* p = x->value.data.data() + (n * C + c) * inner;
            double m = 0;
            for (size_t i = 0; i < inner; ++i) m += p[i];
            m /= static_cast<double>(inner);
            double v = 0;
            for (size_t i = 0; i < inner; ++i) {
                double d = p[i] - m;
                v += d * d;
            }
            v /= static_cast<double>(inner);
            mean[n * C + c] = static_cast<T>(m);
            inv_std[n * C + c] = static_cast<T>(1.0 / std::sqrt(v + kNormEps));
            T* q = out->value.data.data() + (n * C + c) * inner;
            const T g = gamma->value[c], b = beta->value[c];
            for (size_t i = 0; i < inner; ++i)
                q[i] = g * (p[i] - m) * inv_std[n * C + c] + b;
        }
    }

    tape.record([x, gamma, beta, out, mean, inv_std, N, C, inner]() {
        for (size_t n = 0; n < N; ++n) {
            for (size_t c = 0; c < C; ++c) {
                const size_t k = n * C + c;
                const T* gp = out->grad.data.data() + k * inner;
                const T* xp = x->value.data.data() + k * inner;
                double sum_g = 0, sum_gx = 0;
                for (size_t i = 0; i < inner; ++i) {
                    double xh = (xp[i] - mean[k]) * inv_std[k];
                    sum_g += gp[i];
                    sum_gx += gp[i] * xh;
                }
                if (gamma->requires_grad) gamma->grad[c] += static_cast<T>(sum_gx);
                if (beta->requires_grad) beta->grad[c] += static_cast<T>(sum_g);
                if (!x->requires_grad) continue;
                const double mg = sum_g / static_cast<double>(inner);
                const double mgx = sum_gx / static_cast<double>(inner);
                T* dst = x->grad.data.data() + k * inner;
                const T g = gamma->value[c];
                for (size_t i = 0; i < inner; ++i) {
                    double xh = (xp[i] - mean[k]) * inv_std[k];
                    dst[i] += static_cast<T>(g * inv_std[k] * (gp[i] - mg - xh * mgx));
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------- elementwise

template <class T>
NodePtr<T> relu(Tape<T>& tape, const NodePtr<T>& x) {
    auto out = make_node<T>(Tensor<T>(x->value.shape));
    for (size_t i = 0; i < x->value.size(); ++i)
        out->value[i] = x->value[i] > T(0) ? x->value[i] : T(0);
    tape.record([x, out]() {
        if (!x->requires_grad) return;
        // subgradient 0 at x == 0
        for (size_t i = 0; i < x->value.size(); ++i)
            if (x->value[i] > T(0)) x->grad[i] += out->grad[i];
    });
    return out;
}

template <class T>
NodePtr<T> add(Tape<T>& tape, const NodePtr<T>& a, const NodePtr<T>& b) {
    require(a->value.same_shape(b->value), "add: shape mismatch");
    auto out = make_node<T>(Tensor<T>(a->value.shape));
    for (size_t i = 0; i < a->value.size(); ++i)
        out->value[i] = a->value[i] + b->value[i];
    tape.record([a, b, out]() {
        for (size_t i = 0; i < out->grad.size(); ++i) {
            if (a->requires_grad) a->grad[i] += out->grad[i];
            if (b->requires_grad) b->grad[i] += out->grad[i];
        }
    });
    return out;
}

// ------------------------------------------------------------- pooling

template <class T>
NodePtr<T> max_pool2d(Tape<T>& tape, const NodePtr<T>& x, size_t k = 3,
                      size_t stride = 2, size_t pad = 1) {
    require(x->value.rank() == 4, "max_pool2d: rank");
    const size_t N = x->value.shape[0], C = x->value.shape[1];
    const size_t H = x->value.shape[2], W = x->value.shape[3];
    const size_t Ho = (H + 2 * pad - k) / stride + 1;
    const size_t Wo = (W + 2 * pad - k) / stride + 1;
    auto out = make_node<T>(Tensor<T>({N, C, Ho, Wo}));
    // flat input index of each window's argmax (first index on ties)
    auto argmax = std::make_shared<std::vector<size_t>>(N * C * Ho * Wo);
    size_t o = 0;
    for (size_t n = 0; n < N; ++n) {
        for (size_t c = 0; c < C; ++c) {
            for (size_t oh = 0; oh < Ho; ++oh) {
                for (size_t ow = 0; ow < Wo; ++ow, ++o) {
                    T best = -std::numeric_limits<T>::infinity();
                    size_t best_idx = 0;
                    for (size_t ki = 0; ki < k; ++ki) {
                        const int64_t ih = static_cast<int64_t>(oh * stride + ki) - static_cast<int64_t>(pad);
                        if (ih < 0 || ih >= static_cast<int64_t>(H)) continue;
                        for (size_t kj = 0; kj < k; ++kj) {
                            const int64_t iw = static_cast<int64_t>(ow * stride + kj) - static_cast<int64_t>(pad);
                            if (iw < 0 || iw >= static_cast<int64_t>(W)) continue;
                            const size_t idx = ((n * C + c) * H + static_cast<size_t>(ih)) * W + static_cast<size_t>(iw);
                            if (x->value[idx] > best) {
                                best = x->value[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out->value[o] = best;
                    (*argmax)[o] = best_idx;
                }
            }
        }
    }
    tape.record([x, out, argmax]() {
        if (!x->requires_grad) return;
        for (size_t o = 0; o < out->grad.size(); ++o)
            x->grad[(*argmax)[o]] += out->grad[o];
    });
    return out;
}

// -------------------------------------------------------------- linear

// y = x * w^T (+ bias); w is [Dout, Din], bias optional (empty NodePtr).
template <class T>
NodePtr<T> linear(Tape<T>& tape, const NodePtr<T>& x, const NodePtr<T>& w,
                  const NodePtr<T>& bias = nullptr) {
    require(x->value.rank() == 2 && w->value.rank() == 2, "linear: rank");
    const size_t N = x->value.shape[0], Din = x->value.shape[1];
    const size_t Dout = w->value.shape[0];
    require(w->value.shape[1] == Din, "linear: dim mismatch");
    auto out = make_node<T>(Tensor<T>({N, Dout}));
    CMapRM<T> xm(x->value.data.data(), N, Din);
    CMapRM<T> wm(w->value.data.data(), Dout, Din);
    MapRM<T> ym(out->value.data.data(), N, Dout);
    ym.noalias() = xm * wm.transpose();
    if (bias) {
        require(bias->value.size() == Dout, "linear: bias dim");
        for (size_t n = 0; n < N; ++n)
            for (size_t d = 0; d < Dout; ++d) out->value.at2(n, d) += bias->value[d];
    }
    tape.record([x, w, bias, out, N, Din, Dout]() {
        CMapRM<T> gym(out->grad.data.data(), N, Dout);
        if (w->requires_grad) {
            CMapRM<T> xm(x->value.data.data(), N, Din);
            MapRM<T> gw(w->grad.data.data(), Dout, Din);
            gw.noalias() += gym.transpose() * xm;
        }
        if (x->requires_grad) {
            CMapRM<T> wm(w->value.data.data(), Dout, Din);
            MapRM<T> gx(x->grad.data.data(), N, Din);
            gx.noalias() += gym * wm;
        }
        if (bias && bias->requires_grad) {
            for (size_t n = 0; n < N; ++n)
                for (size_t d = 0; d < Dout; ++d) bias->grad[d] += out->grad.at2(n, d);
        }
    });
    return out;
}

// ---------------------------------------------------------------- loss

// Mean over the batch of -log softmax(logits)[label].
template <class T>
NodePtr<T> softmax_cross_entropy(Tape<T>& tape, const NodePtr<T>& logits,
                                 const std::vector<int>& labels) {
    require(logits->value.rank() == 2, "softmax_ce: rank");
    const size_t N = logits->value.shape[0], C = logits->value.shape[1];
    require(labels.size() == N, "softmax_ce: label count");
    for (int l : labels)
        require(l >= 0 && static_cast<size_t>(l) < C, "softmax_ce: label out of range");

    auto probs = std::make_shared<Tensor<T>>(logits->value.shape);
    double loss = 0;
    for (size_t n = 0; n < N; ++n) {
        const T* row = logits->value.data.data() + n * C;
        T mx = row[0];
        for (size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        double z = 0;
        for (size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(row[c] - mx));
        for (size_t c = 0; c < C; ++c)
            probs->at2(n, c) = static_cast<T>(std::exp(static_cast<double>(row[c] - mx)) / z);
        loss -= static_cast<double>(row[labels[n]] - mx) - std::log(z);
    }
    auto out = make_node<T>(Tensor<T>({1}, static_cast<T>(loss / N)));
    tape.record([logits, probs, labels, out, N, C]() {
        if (!logits->requires_grad) return;
        const T g = out->grad[0] / static_cast<T>(N);
        for (size_t n = 0; n < N; ++n)
            for (size_t c = 0; c < C; ++c) {
                T d = probs->at2(n, c) - (static_cast<size_t>(labels[n]) == c ? T(1) : T(0));
                logits->grad.at2(n, c) += g * d;
            }
    });
    return out;
}

// ------------------------------------------------------------ plumbing

// Split [N,C,...] into two halves along the channel axis.
template <class T>
std::pair<NodePtr<T>, NodePtr<T>> split_channels(Tape<T>& tape, const NodePtr<T>& x) {
    require(x->value.rank() == 4, "split_channels: rank");
    const size_t N = x->value.shape[0], C = x->value.shape[1];
    require(C % 2 == 0, "split_channels: odd channel count");
    const size_t inner = x->value.shape[2] * x->value.shape[3];
    const size_t Ch = C / 2;
    auto a = make_node<T>(Tensor<T>({N, Ch, x->value.shape[2], x->value.shape[3]}));
    auto b = make_node<T>(Tensor<T>({N, Ch, x->value.shape[2], x->value.shape[3]}));
    for (size_t n = 0; n < N; ++n) {
        std::copy_n(x->value.data.data() + (n * C) * inner, Ch * inner,
                    a->value.data.data() + n * Ch * inner);
        std::copy_n(x->value.data.data() + (n * C + Ch) * inner, Ch * inner,
                    b->value.data.data() + n * Ch * inner);
    }
    tape.record([x, a, b, N, C, Ch, inner]() {
        if (!x->requires_grad) return;
        for (size_t n = 0; n < N; ++n) {
            for (size_t i = 0; i < Ch * inner; ++i) {
                x->grad.data[(n * C) * inner + i] += a->grad.data[n * Ch * inner + i];
                x->grad.data[(n * C + Ch) * inner + i] += b->grad.data[n * Ch * inner + i];
            }
        }
    });
    return {a, b};
}

// Concatenate along axis 1 (channels for 4-d, features for 2-d).
template <class T>
NodePtr<T> concat_channels(Tape<T>& tape, const NodePtr<T>& a, const NodePtr<T>& b) {
    require(a->value.rank() == b->value.rank() && a->value.rank() >= 2, "concat: rank");
    size_t inner = 1;
    for (size_t i = 2; i < a->value.rank(); ++i) {
        require(a->value.shape[i] == b->value.shape[i], "concat: trailing dims");
        inner *= a->value.shape[i];
    }
    require(a->value.shape[0] == b->value.shape[0], "concat: batch dims");
    const size_t N = a->value.shape[0], Ca = a->value.shape[1], Cb = b->value.shape[1];
    std::vector<size_t> shp = a->value.shape;
    shp[1] = Ca + Cb;
    auto out = make_node<T>(Tensor<T>(shp));
    for (size_t n = 0; n < N; ++n) {
        std::copy_n(a->value.data.data() + n * Ca * inner, Ca * inner,
                    out->value.data.data() + n * (Ca + Cb) * inner);
        std::copy_n(b->value.data.data() + n * Cb * inner, Cb * inner,
                    out->value.data.data() + (n * (Ca + Cb) + Ca) * inner);
    }
    tape.record([a, b, out, N, Ca, Cb, inner]() {
        for (size_t n = 0; n < N; ++n) {
            if (a->requires_grad)
                for (size_t i = 0; i < Ca * inner; ++i)
                    a->grad.data[n * Ca * inner + i] += out->grad.data[n * (Ca + Cb) * inner + i];
            if (b->requires_grad)
                for (size_t i = 0; i < Cb * inner; ++i)
                    b->grad.data[n * Cb * inner + i] += out->grad.data[(n * (Ca + Cb) + Ca) * inner + i];
        }
    });
    return out;
}

template <class T>
NodePtr<T> reshape(Tape<T>& tape, const NodePtr<T>& x, std::vector<size_t> shp) {
    require(Tensor<T>::numel(shp) == x->value.size(), "reshape: element count");
    auto out = make_node<T>(Tensor<T>(shp));
    out->value.data = x->value.data;
    tape.record([x, out]() {
        if (!x->requires_grad) return;
        for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += out->grad[i];
    });
    return out;
}

// Swap the two spatial axes of a 4-d tensor.
template <class T>
NodePtr<T> transpose_hw(Tape<T>& tape, const NodePtr<T>& x) {
    require(x->value.rank() == 4, "transpose_hw: rank");
    const size_t N = x->value.shape[0], C = x->value.shape[1];
    const size_t H = x->value.shape[2], W = x->value.shape[3];
    auto out = make_node<T>(Tensor<T>({N, C, W, H}));
    for (size_t n = 0; n < N; ++n)
        for (size_t c = 0; c < C; ++c)
            for (size_t h = 0; h < H; ++h)
                for (size_t w = 0; w < W; ++w)
                    out->value.at4(n, c, w, h) = x->value.at4(n, c, h, w);
    tape.record([x, out, N, C, H, W]() {
        if (!x->requires_grad) return;
        for (size_t n = 0; n < N; ++n)
            for (size_t c = 0; c < C; ++c)
                for (size_t h = 0; h < H; ++h)
                    for (size_t w = 0; w < W; ++w)
                        x->grad.at4(n, c, h, w) += out->grad.at4(n, c, w, h);
    });
    return out;
}

// ------------------------------------------------------------ GeM pool

// Core generalized-mean reduction over contiguous groups of `n` values:
// f = (mean((x + eps)^p))^(1/p), computed in shifted log space.
// Differentiable w.r.t. both x and the scalar exponent p.
template <class T>
NodePtr<T> gem_reduce_groups(Tape<T>& tape, const NodePtr<T>& x,
                             const NodePtr<T>& p, std::vector<size_t> out_shape,
                             size_t n) {
    const size_t groups = x->value.size() / n;
    require(groups * n == x->value.size(), "gem: group size");
    const T pv = p->value[0];
    require(pv >= T(1), "gem: p < 1");
    for (size_t i = 0; i < x->value.size(); ++i)
        require(x->value[i] >= T(0), "gem: negative input");

    auto out = make_node<T>(Tensor<T>(std::move(out_shape)));
    require(out->value.size() == groups, "gem: output shape");

    // saved for backward: per-element u' = exp(p*(L - Lmax)), per-group m', Lmax
    auto u = std::make_shared<std::vector<T>>(x->value.size());
    auto mprime = std::make_shared<std::vector<T>>(groups);
    auto lmax = std::make_shared<std::vector<T>>(groups);
    const double eps = kGemEps;
    for (size_t g = 0; g < groups; ++g) {
        const T* xs = x->value.data.data() + g * n;
        double Lm = -std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < n; ++i)
            Lm = std::max(Lm, std::log(static_cast<double>(xs[i]) + eps));
        double m = 0;
        for (size_t i = 0; i < n; ++i) {
            double L = std::log(static_cast<double>(xs[i]) + eps);
            double ui = std::exp(static_cast<double>(pv) * (L - Lm));
            (*u)[g * n + i] = static_cast<T>(ui);
            m += ui;
        }
        m /= static_cast<double>(n);
        (*mprime)[g] = static_cast<T>(m);
        (*lmax)[g] = static_cast<T>(Lm);
        out->value[g] = static_cast<T>(std::exp(Lm + std::log(m) / static_cast<double>(pv)));
    }

    tape.record([x, p, out, u, mprime, lmax, groups, n, pv, eps]() {
        double gp_acc = 0;
        for (size_t g = 0; g < groups; ++g) {
            const T go = out->grad[g];
            const double f = out->value[g];
            const double m = (*mprime)[g];
            const T* xs = x->value.data.data() + g * n;
            if (x->requires_grad) {
                T* gx = x->grad.data.data() + g * n;
                for (size_t i = 0; i < n; ++i) {
                    double d = f * (*u)[g * n + i] /
                               (m * static_cast<double>(n) * (static_cast<double>(xs[i]) + eps));
                    gx[i] += static_cast<T>(go * d);
                }
            }
            if (p->requires_grad && go != T(0)) {
                double s = 0;
                for (size_t i = 0; i < n; ++i) {
                    double L = std::log(static_cast<double>(xs[i]) + eps);
                    s += (*u)[g * n + i] * (L - (*lmax)[g]);
                }
                s /= static_cast<double>(n);
                double dp = f * (-std::log(m) / (static_cast<double>(pv) * pv) +
                                 s / (static_cast<double>(pv) * m));
                gp_acc += static_cast<double>(go) * dp;
            }
        }
        if (p->requires_grad) p->grad[0] += static_cast<T>(gp_acc);
    });
    return out;
}

// GeM over the full (H,W) plane: [N,K,H,W] -> [N,K].
template <class T>
NodePtr<T> gem_pool(Tape<T>& tape, const NodePtr<T>& x, const NodePtr<T>& p) {
    require(x->value.rank() == 4, "gem_pool: rank");
    const size_t N = x->value.shape[0], K = x->value.shape[1];
    return gem_reduce_groups(tape, x, p, {N, K},
                             x->value.shape[2] * x->value.shape[3]);
}

// GeM over the last axis only; drops that axis.
template <class T>
NodePtr<T> gem_last_axis(Tape<T>& tape, const NodePtr<T>& x, const NodePtr<T>& p) {
    require(x->value.rank() >= 2, "gem_last_axis: rank");
    std::vector<size_t> shp(x->value.shape.begin(), x->value.shape.end() - 1);
    return gem_reduce_groups(tape, x, p, shp, x->value.shape.back());
}

// Split GeM: time-then-frequency with p_t, frequency-then-time with p_f,
// concatenated to [N,2K].
template <class T>
NodePtr<T> gem_pool_split(Tape<T>& tape, const NodePtr<T>& x,
                          const NodePtr<T>& p_t, const NodePtr<T>& p_f) {
    require(x->value.rank() == 4, "gem_pool_split: rank");
    auto t1 = gem_last_axis(tape, x, p_t);           // pool W -> [N,K,H]
    auto t2 = gem_last_axis(tape, t1, p_t);          // pool H -> [N,K]
    auto xt = transpose_hw(tape, x);                 // [N,K,W,H]
    auto f1 = gem_last_axis(tape, xt, p_f);          // pool H -> [N,K,W]
    auto f2 = gem_last_axis(tape, f1, p_f);          // pool W -> [N,K]
    return concat_channels(tape, t2, f2);
}

// ------------------------------------------------- batch-hard triplet

// Hardest-positive / hardest-negative hinge within the batch on
// Euclidean distances.  Anchors whose label has no other occurrence or
// no non-match are skipped and counted in *skipped.
template <class T>
NodePtr<T> triplet_batch_hard(Tape<T>& tape, const NodePtr<T>& f,
                              const std::vector<int>& labels, T alpha,
                              int* skipped = nullptr) {
    require(f->value.rank() == 2, "triplet: rank");
    const size_t N = f->value.shape[0], D = f->value.shape[1];
    require(labels.size() == N, "triplet: label count");

    auto dist = [&](size_t a, size_t b) {
        double s = 0;
        const T* pa = f->value.data.data() + a * D;
        const T* pb = f->value.data.data() + b * D;
        for (size_t d = 0; d < D; ++d) {
            double diff = pa[d] - pb[d];
            s += diff * diff;
        }
        return std::sqrt(std::max(s, 1e-24));
    };

    struct Sel { size_t anchor, pos, neg; double dp, dn; bool active; };
    auto sels = std::make_shared<std::vector<Sel>>();
    int skip = 0;
    double loss = 0;
    for (size_t a = 0; a < N; ++a) {
        double dp = -1, dn = std::numeric_limits<double>::infinity();
        size_t jp = N, jn = N;
        for (size_t b = 0; b < N; ++b) {
            if (b == a) continue;
            double d = dist(a, b);
            if (labels[b] == labels[a]) {
                if (d > dp) { dp = d; jp = b; }
            } else {
                if (d < dn) { dn = d; jn = b; }
            }
        }
        if (jp == N || jn == N) { ++skip; continue; }
        double h = dp - dn + static_cast<double>(alpha);
        sels->push_back({a, jp, jn, dp, dn, h > 0});
        if (h > 0) loss += h;
    }
    if (skipped) *skipped = skip;
    const size_t M = sels->size();
    require(M > 0, "triplet: no usable anchors in batch");
    auto out = make_node<T>(Tensor<T>({1}, static_cast<T>(loss / M)));

    tape.record([f, out, sels, M, D]() {
        if (!f->requires_grad) return;
        const double g = static_cast<double>(out->grad[0]) / static_cast<double>(M);
        for (size_t i = 0; i < M; ++i) {
            const Sel& s = (*sels)[i];
            if (!s.active) continue;
            const size_t a = s.anchor;
            const T* fa = f->value.data.data() + a * D;
            const T* fp = f->value.data.data() + s.pos * D;
            const T* fn = f->value.data.data() + s.neg * D;
            T* ga = f->grad.data.data() + a * D;
            T* gp = f->grad.data.data() + s.pos * D;
            T* gn = f->grad.data.data() + s.neg * D;
            for (size_t d = 0; d < D; ++d) {
                double ap = (fa[d] - fp[d]) / s.dp;
                double an = (fa[d] - fn[d]) / s.dn;
                ga[d] += static_cast<T>(g * (ap - an));
                gp[d] += static_cast<T>(-g * ap);
                gn[d] += static_cast<T>(g * an);
            }
        }
    });
    return out;
}

// scalar add of two loss terms
template <class T>
NodePtr<T> add_scalars(Tape<T>& tape, const NodePtr<T>& a, const NodePtr<T>& b) {
    return add(tape, a, b);
}

}  // namespace ops
}  // namespace coverid

#endif
