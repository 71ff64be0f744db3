// SPDX-License-Identifier: Apache-2.0
//
// Minimal decoder-only transformer with explicit forward traces and manual
// backprop. Two gradient paths: standard next-token cross-entropy, and
// gradients injected at the last-token hidden states of selected layers.
// Parameters live in one flat vector whose layout is the checkpoint's
// canonical order; everything before the first trainable block is frozen.
#ifndef LENS_MODEL_HPP
#define LENS_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lens/error.hpp"
#include "lens/hash.hpp"
#include "lens/rng.hpp"
#include "lens/types.hpp"

namespace lens {

template <class Scalar>
using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
    int vocab = 0;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 128;
    int ctx = 32;
    double init_std = 0.02;
    std::uint64_t seed = 0;

    void validate() const {
        if (vocab < 2) throw std::invalid_argument("ModelConfig: vocab too small");
        if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || ctx < 1)
            throw std::invalid_argument("ModelConfig: nonpositive dimension");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
    }

    // Closed-form parameter count for the canonical layout below.
    std::int64_t param_count() const {
        const std::int64_t d = d_model, ff = d_ff;
        const std::int64_t per_layer = 4 * d * d + 2 * d * ff + 9 * d + ff;
        return static_cast<std::int64_t>(vocab) * d + static_cast<std::int64_t>(ctx) * d +
               static_cast<std::int64_t>(n_layers) * per_layer + 2 * d;
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab", c.vocab},     {"d_model", c.d_model},
                       {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
                       {"d_ff", c.d_ff},       {"ctx", c.ctx},
                       {"init_std", c.init_std}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("vocab").get_to(c.vocab);
    j.at("d_model").get_to(c.d_model);
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_ff").get_to(c.d_ff);
    j.at("ctx").get_to(c.ctx);
    j.at("init_std").get_to(c.init_std);
    j.at("seed").get_to(c.seed);
}

// Canonical flat-parameter layout. Checkpoints serialize the flat vector in
// exactly this order: tok_emb, pos_emb, blocks 0..n-1, final norm.
struct ParamLayout {
    struct Block {
        Index ln1_g, ln1_b;
        Index wq, bq, wk, bk, wv, bv, wo, bo;
        Index ln2_g, ln2_b;
        Index w1, b1, w2, b2;
        Index begin, end;
    };
    Index tok_emb = 0, pos_emb = 0, ln_f_g = 0, ln_f_b = 0;
    std::vector<Block> blocks;
    Index total = 0;

    explicit ParamLayout(const ModelConfig& cfg) {
        cfg.validate();
        const Index d = cfg.d_model, ff = cfg.d_ff;
        Index off = 0;
        auto take = [&off](Index n) {
            const Index at = off;
            off += n;
            return at;
        };
        tok_emb = take(static_cast<Index>(cfg.vocab) * d);
        pos_emb = take(static_cast<Index>(cfg.ctx) * d);
        blocks.resize(static_cast<std::size_t>(cfg.n_layers));
        for (auto& b : blocks) {
            b.begin = off;
            b.ln1_g = take(d);
            b.ln1_b = take(d);
            b.wq = take(d * d);
            b.bq = take(d);
            b.wk = take(d * d);
            b.bk = take(d);
            b.wv = take(d * d);
            b.bv = take(d);
            b.wo = take(d * d);
            b.bo = take(d);
            b.ln2_g = take(d);
            b.ln2_b = take(d);
            b.w1 = take(d * ff);
            b.b1 = take(ff);
            b.w2 = take(ff * d);
            b.b2 = take(d);
            b.end = off;
        }
        ln_f_g = take(d);
        ln_f_b = take(d);
        total = off;
    }

    // First flat index owned by `layer`; everything before it is "below".
    Index frozen_prefix(int trainable_from, int n_layers) const {
        if (trainable_from >= n_layers) return total;
        if (trainable_from <= 0) return 0;
        return blocks[static_cast<std::size_t>(trainable_from)].begin;
    }
};

namespace detail {

template <class S>
Eigen::Map<MatRM<S>> mat_view(Vec<S>& flat, Index off, Index rows, Index cols) {
    return Eigen::Map<MatRM<S>>(flat.data() + off, rows, cols);
}
template <class S>
Eigen::Map<const MatRM<S>> mat_view(const Vec<S>& flat, Index off, Index rows, Index cols) {
    return Eigen::Map<const MatRM<S>>(flat.data() + off, rows, cols);
}
template <class S>
Eigen::Map<Vec<S>> vec_view(Vec<S>& flat, Index off, Index n) {
    return Eigen::Map<Vec<S>>(flat.data() + off, n);
}
template <class S>
Eigen::Map<const Vec<S>> vec_view(const Vec<S>& flat, Index off, Index n) {
    return Eigen::Map<const Vec<S>>(flat.data() + off, n);
}

constexpr double kLnEps = 1e-5;

// Per-row products keep each position's arithmetic independent of the
// sequence length, so extending a sequence is bit-exact on earlier rows.
template <class S, class WView, class BView>
MatRM<S> rowwise_affine(const MatRM<S>& x, const WView& w, const BView& b) {
    MatRM<S> y(x.rows(), w.cols());
    for (Index i = 0; i < x.rows(); ++i)
        y.row(i) = x.row(i) * w + b.transpose();
    return y;
}

template <class S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2)));
}

template <class S>
S gelu_grad(S x) {
    const S cdf = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
    const S pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014326779); // 1/sqrt(2*pi)
    return cdf + x * pdf;
}

} // namespace detail

template <class Scalar>
struct LayerTrace {
    MatRM<Scalar> xhat1;               // LN1 normalized input
    Vec<Scalar> inv_std1;
    MatRM<Scalar> a_norm;              // LN1 output
    MatRM<Scalar> q, k, v;
    std::vector<MatRM<Scalar>> probs;  // per-head attention rows
    MatRM<Scalar> ctx;                 // concatenated head outputs
    MatRM<Scalar> h_mid;               // after attention residual
    MatRM<Scalar> xhat2;
    Vec<Scalar> inv_std2;
    MatRM<Scalar> m_norm;              // LN2 output
    MatRM<Scalar> mlp_pre;             // before GELU
    MatRM<Scalar> mlp_act;             // after GELU
    MatRM<Scalar> h_out;               // block output (residual stream)
};

template <class Scalar>
struct ForwardTrace {
    std::vector<std::int32_t> tokens;
    Index last_pos = 0; // last non-PAD position
    MatRM<Scalar> h0;
    std::vector<LayerTrace<Scalar>> layers;
    MatRM<Scalar> xhat_f;
    Vec<Scalar> inv_std_f;
    MatRM<Scalar> logits;

    // Last-token residual-stream state of a block (pre final norm).
    Vec<Scalar> last_token_hidden(int layer) const {
        return layers[static_cast<std::size_t>(layer)].h_out.row(last_pos).transpose();
    }
};

template <class Scalar>
class ToyTransformer {
public:
    ModelConfig config;
    ParamLayout layout;
    Vec<Scalar> params;
    int trainable_from = 0; // first trainable block; blocks/embeddings below are frozen

    explicit ToyTransformer(const ModelConfig& cfg) : config(cfg), layout(cfg) {
        params = Vec<Scalar>::Zero(layout.total);
        init_parameters();
    }

    Index frozen_prefix() const {
        return layout.frozen_prefix(trainable_from, config.n_layers);
    }

    ForwardTrace<Scalar> forward(const std::vector<std::int32_t>& tokens) const {
        const Index t_len = static_cast<Index>(tokens.size());
        if (t_len < 1) throw std::invalid_argument("forward: empty token sequence");
        if (t_len > config.ctx)
            throw std::invalid_argument("forward: sequence longer than context window");
        const Index d = config.d_model;
        const Index h = config.n_heads;
        const Index dh = d / h;
        const Index ff = config.d_ff;

        ForwardTrace<Scalar> tr;
        tr.tokens = tokens;
        Index last = -1;
        for (Index i = 0; i < t_len; ++i) {
            const std::int32_t tok = tokens[static_cast<std::size_t>(i)];
            if (tok < 0 || tok >= config.vocab)
                throw std::invalid_argument("forward: token id out of vocabulary");
            if (tok != pad_token_) last = i;
        }
        if (last < 0) throw std::invalid_argument("forward: all-PAD sequence");
        tr.last_pos = last;

        const auto tok_emb = detail::mat_view<Scalar>(params, layout.tok_emb, config.vocab, d);
        const auto pos_emb = detail::mat_view<Scalar>(params, layout.pos_emb, config.ctx, d);
        tr.h0.resize(t_len, d);
        for (Index i = 0; i < t_len; ++i)
            tr.h0.row(i) = tok_emb.row(tokens[static_cast<std::size_t>(i)]) + pos_emb.row(i);

        MatRM<Scalar> hcur = tr.h0;
        tr.layers.resize(static_cast<std::size_t>(config.n_layers));
        for (int l = 0; l < config.n_layers; ++l) {
            auto& lt = tr.layers[static_cast<std::size_t>(l)];
            const auto& blk = layout.blocks[static_cast<std::size_t>(l)];

            layer_norm(hcur, blk.ln1_g, blk.ln1_b, lt.xhat1, lt.inv_std1, lt.a_norm);

            const auto wq = detail::mat_view<Scalar>(params, blk.wq, d, d);
            const auto wk = detail::mat_view<Scalar>(params, blk.wk, d, d);
            const auto wv = detail::mat_view<Scalar>(params, blk.wv, d, d);
            const auto wo = detail::mat_view<Scalar>(params, blk.wo, d, d);
            const auto bq = detail::vec_view<Scalar>(params, blk.bq, d);
            const auto bk = detail::vec_view<Scalar>(params, blk.bk, d);
            const auto bv = detail::vec_view<Scalar>(params, blk.bv, d);
            const auto bo = detail::vec_view<Scalar>(params, blk.bo, d);

            lt.q = detail::rowwise_affine<Scalar>(lt.a_norm, wq, bq);
            lt.k = detail::rowwise_affine<Scalar>(lt.a_norm, wk, bk);
            lt.v = detail::rowwise_affine<Scalar>(lt.a_norm, wv, bv);

            lt.probs.assign(static_cast<std::size_t>(h), MatRM<Scalar>());
            lt.ctx.resize(t_len, d);
            const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
            for (Index head = 0; head < h; ++head) {
                const auto qh = lt.q.middleCols(head * dh, dh);
                const auto kh = lt.k.middleCols(head * dh, dh);
                const auto vh = lt.v.middleCols(head * dh, dh);
                MatRM<Scalar>& p = lt.probs[static_cast<std::size_t>(head)];
                p.setZero(t_len, t_len);
                // Row-wise products over the causal prefix only, so position
                // i's arithmetic is independent of later tokens (bit-exact
                // causality).
                for (Index i = 0; i < t_len; ++i) {
                    Vec<Scalar> row = kh.topRows(i + 1) * qh.row(i).transpose() * scale;
                    const Scalar m = row.maxCoeff();
                    Scalar sum = Scalar(0);
                    for (Index j = 0; j <= i; ++j) {
                        p(i, j) = std::exp(row(j) - m);
                        sum += p(i, j);
                    }
                    for (Index j = 0; j <= i; ++j) p(i, j) /= sum;
                    lt.ctx.row(i).segment(head * dh, dh) =
                        p.row(i).head(i + 1) * vh.topRows(i + 1);
                }
            }

            lt.h_mid = hcur + detail::rowwise_affine<Scalar>(lt.ctx, wo, bo);

            layer_norm(lt.h_mid, blk.ln2_g, blk.ln2_b, lt.xhat2, lt.inv_std2, lt.m_norm);

            const auto w1 = detail::mat_view<Scalar>(params, blk.w1, d, ff);
            const auto b1 = detail::vec_view<Scalar>(params, blk.b1, ff);
            const auto w2 = detail::mat_view<Scalar>(params, blk.w2, ff, d);
            const auto b2 = detail::vec_view<Scalar>(params, blk.b2, d);

            lt.mlp_pre = detail::rowwise_affine<Scalar>(lt.m_norm, w1, b1);
            lt.mlp_act = lt.mlp_pre.unaryExpr([](Scalar x) { return detail::gelu(x); });
            lt.h_out = lt.h_mid + detail::rowwise_affine<Scalar>(lt.mlp_act, w2, b2);
            hcur = lt.h_out;
        }

        MatRM<Scalar> hn;
        layer_norm(hcur, layout.ln_f_g, layout.ln_f_b, tr.xhat_f, tr.inv_std_f, hn);
        tr.logits.resize(t_len, config.vocab);
        for (Index i = 0; i < t_len; ++i)
            tr.logits.row(i) = hn.row(i) * tok_emb.transpose();
        if (!tr.logits.allFinite()) throw numeric_error("forward: non-finite logits");
        return tr;
    }

    // Next-token cross-entropy over one sequence, PAD targets masked.
    // Returns the summed loss and the number of predicted positions, and
    // accumulates parameter gradients scaled by `grad_scale`.
    std::pair<Scalar, Index> backward_lm_sequence(const ForwardTrace<Scalar>& tr,
                                                  Vec<Scalar>& grads,
                                                  Scalar grad_scale) const {
        const Index t_len = static_cast<Index>(tr.tokens.size());
        const Index d = config.d_model;
        Scalar loss = Scalar(0);
        Index n_pred = 0;
        MatRM<Scalar> dlogits = MatRM<Scalar>::Zero(t_len, config.vocab);
        for (Index i = 0; i + 1 < t_len; ++i) {
            const std::int32_t target = tr.tokens[static_cast<std::size_t>(i + 1)];
            if (target == pad_token_) continue;
            const Scalar m = tr.logits.row(i).maxCoeff();
            Scalar lse = Scalar(0);
            for (Index v = 0; v < config.vocab; ++v)
                lse += std::exp(tr.logits(i, v) - m);
            lse = m + std::log(lse);
            loss += lse - tr.logits(i, target);
            for (Index v = 0; v < config.vocab; ++v)
                dlogits(i, v) = std::exp(tr.logits(i, v) - lse);
            dlogits(i, target) -= Scalar(1);
            ++n_pred;
        }
        if (n_pred == 0) return {Scalar(0), 0};
        dlogits *= grad_scale;

        // head (tied to token embeddings)
        const auto tok_emb = detail::mat_view<Scalar>(params, layout.tok_emb, config.vocab, d);
        MatRM<Scalar> hn;
        {
            const auto g = detail::vec_view<Scalar>(params, layout.ln_f_g, d);
            const auto b = detail::vec_view<Scalar>(params, layout.ln_f_b, d);
            hn = (tr.xhat_f.array().rowwise() * g.transpose().array()).matrix();
            hn.rowwise() += b.transpose();
        }
        if (trainable_from == 0)
            detail::mat_view<Scalar>(grads, layout.tok_emb, config.vocab, d)
                .noalias() += dlogits.transpose() * hn;
        MatRM<Scalar> dh = dlogits * tok_emb;

        backward_final_norm_and_blocks(tr, dh, grads);
        return {loss, n_pred};
    }

    // Backprop gradients injected at the last-token residual state of chosen
    // blocks. `grads_by_layer` is keyed by block index; keys must lie within
    // `manipulated`. Accumulates into `grads`.
    void backward_lens(const ForwardTrace<Scalar>& tr,
                       const std::map<int, Vec<Scalar>>& grads_by_layer,
                       const LayerRange& manipulated, Vec<Scalar>& grads) const {
        const Index t_len = static_cast<Index>(tr.tokens.size());
        const Index d = config.d_model;
        for (const auto& [layer, g] : grads_by_layer) {
            if (!manipulated.contains(layer))
                throw std::invalid_argument(
                    "backward_lens: gradient supplied for non-manipulated layer " +
                    std::to_string(layer));
            if (layer < 0 || layer >= config.n_layers)
                throw std::invalid_argument("backward_lens: layer index out of range");
            if (g.size() != d)
                throw std::invalid_argument("backward_lens: gradient dimension mismatch");
        }
        if (trainable_from >= config.n_layers) return; // nothing trainable
        MatRM<Scalar> dh = MatRM<Scalar>::Zero(t_len, d);
        for (int l = config.n_layers - 1; l >= trainable_from; --l) {
            auto it = grads_by_layer.find(l);
            if (it != grads_by_layer.end())
                dh.row(tr.last_pos) += it->second.transpose();
            backward_block(l, tr.layers[static_cast<std::size_t>(l)], dh, grads);
        }
        accumulate_embedding_grads(tr, dh, grads);
        // Activation gradients below trainable_from can only reach frozen
        // parameters, so backpropagation stops there.
    }

    std::vector<std::int32_t> generate(const std::vector<std::int32_t>& prompt,
                                       int max_new) const {
        if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
        if (static_cast<Index>(prompt.size()) > config.ctx)
            throw std::invalid_argument("generate: prompt longer than context window");
        std::vector<std::int32_t> seq = prompt;
        std::vector<std::int32_t> out;
        for (int step = 0; step < max_new; ++step) {
            if (static_cast<Index>(seq.size()) >= config.ctx) break; // window full
            const ForwardTrace<Scalar> tr = forward(seq);
            const Index t = static_cast<Index>(seq.size()) - 1;
            Index best = 0;
            tr.logits.row(t).maxCoeff(&best);
            const auto tok = static_cast<std::int32_t>(best);
            seq.push_back(tok);
            out.push_back(tok);
            if (tok == eos_token_) break;
        }
        return out;
    }

    void set_special_tokens(std::int32_t eos, std::int32_t pad) {
        eos_token_ = eos;
        pad_token_ = pad;
    }

    std::int32_t eos_token() const { return eos_token_; }
    std::int32_t pad_token() const { return pad_token_; }

    std::string params_hash() const {
        std::vector<float> as_f32(static_cast<std::size_t>(params.size()));
        for (Index i = 0; i < params.size(); ++i)
            as_f32[static_cast<std::size_t>(i)] = static_cast<float>(params(i));
        return hash_hex(fnv1a64(as_f32.data(), as_f32.size() * sizeof(float)));
    }

private:
    std::int32_t eos_token_ = 1;
    std::int32_t pad_token_ = 2;

    void init_parameters() {
        Rng rng = Rng::seeded(config.seed);
        const Index d = config.d_model;
        auto fill_normal = [&](Index off, Index n) {
            for (Index i = 0; i < n; ++i)
                params(off + i) = static_cast<Scalar>(rng.normal(0.0, config.init_std));
        };
        auto fill_ones = [&](Index off, Index n) {
            for (Index i = 0; i < n; ++i) params(off + i) = Scalar(1);
        };
        fill_normal(layout.tok_emb, static_cast<Index>(config.vocab) * d);
        fill_normal(layout.pos_emb, static_cast<Index>(config.ctx) * d);
        for (const auto& blk : layout.blocks) {
            fill_ones(blk.ln1_g, d);
            fill_normal(blk.wq, d * d);
            fill_normal(blk.wk, d * d);
            fill_normal(blk.wv, d * d);
            fill_normal(blk.wo, d * d);
            fill_ones(blk.ln2_g, d);
            fill_normal(blk.w1, d * config.d_ff);
            fill_normal(blk.w2, static_cast<Index>(config.d_ff) * d);
            // biases and norm offsets stay zero
        }
        fill_ones(layout.ln_f_g, d);
    }

    void layer_norm(const MatRM<Scalar>& x, Index g_off, Index b_off, MatRM<Scalar>& xhat,
                    Vec<Scalar>& inv_std, MatRM<Scalar>& y) const {
        const Index t_len = x.rows();
        const Index d = x.cols();
        const auto g = detail::vec_view<Scalar>(params, g_off, d);
        const auto b = detail::vec_view<Scalar>(params, b_off, d);
        xhat.resize(t_len, d);
        inv_std.resize(t_len);
        y.resize(t_len, d);
        for (Index t = 0; t < t_len; ++t) {
            const Scalar mu = x.row(t).mean();
            const Scalar var = (x.row(t).array() - mu).square().mean();
            const Scalar is = Scalar(1) / std::sqrt(var + static_cast<Scalar>(detail::kLnEps));
            inv_std(t) = is;
            xhat.row(t) = (x.row(t).array() - mu) * is;
            y.row(t) = xhat.row(t).array() * g.transpose().array() + b.transpose().array();
        }
    }

    // dy -> dx for y = g*xhat + b given cached xhat and inv_std; accumulates
    // gain/offset gradients when the segment is trainable.
    void layer_norm_backward(const MatRM<Scalar>& dy, const MatRM<Scalar>& xhat,
                             const Vec<Scalar>& inv_std, Index g_off, Index b_off,
                             Vec<Scalar>& grads, bool param_trainable,
                             MatRM<Scalar>& dx) const {
        const Index t_len = dy.rows();
        const Index d = dy.cols();
        const auto g = detail::vec_view<Scalar>(params, g_off, d);
        if (param_trainable) {
            auto dg = detail::vec_view<Scalar>(grads, g_off, d);
            auto db = detail::vec_view<Scalar>(grads, b_off, d);
            dg += (dy.array() * xhat.array()).colwise().sum().matrix().transpose();
            db += dy.colwise().sum().transpose();
        }
        dx.resize(t_len, d);
        for (Index t = 0; t < t_len; ++t) {
            const Eigen::Array<Scalar, 1, Eigen::Dynamic> dxhat =
                dy.row(t).array() * g.transpose().array();
            const Scalar m1 = dxhat.mean();
            const Scalar m2 = (dxhat * xhat.row(t).array()).mean();
            dx.row(t) = ((dxhat - m1 - xhat.row(t).array() * m2) * inv_std(t)).matrix();
        }
    }

    // dh holds d(loss)/d(block output); on return it holds d(loss)/d(block
    // input). Parameter gradients accumulate only if the block is trainable.
    void backward_block(int layer, const LayerTrace<Scalar>& lt, MatRM<Scalar>& dh,
                        Vec<Scalar>& grads) const {
        const Index t_len = dh.rows();
        const Index d = config.d_model;
        const Index ff = config.d_ff;
        const Index h = config.n_heads;
        const Index dh_head = d / h;
        const bool trainable = layer >= trainable_from;
        const auto& blk = layout.blocks[static_cast<std::size_t>(layer)];

        const auto w1 = detail::mat_view<Scalar>(params, blk.w1, d, ff);
        const auto w2 = detail::mat_view<Scalar>(params, blk.w2, ff, d);

        // MLP branch
        MatRM<Scalar> d_act = dh * w2.transpose();
        if (trainable) {
            detail::mat_view<Scalar>(grads, blk.w2, ff, d).noalias() +=
                lt.mlp_act.transpose() * dh;
            detail::vec_view<Scalar>(grads, blk.b2, d) += dh.colwise().sum().transpose();
        }
        MatRM<Scalar> d_pre =
            (d_act.array() *
             lt.mlp_pre.unaryExpr([](Scalar x) { return detail::gelu_grad(x); }).array())
                .matrix();
        if (trainable) {
            detail::mat_view<Scalar>(grads, blk.w1, d, ff).noalias() +=
                lt.m_norm.transpose() * d_pre;
            detail::vec_view<Scalar>(grads, blk.b1, ff) += d_pre.colwise().sum().transpose();
        }
        MatRM<Scalar> d_m_norm = d_pre * w1.transpose();

        MatRM<Scalar> d_h_mid;
        layer_norm_backward(d_m_norm, lt.xhat2, lt.inv_std2, blk.ln2_g, blk.ln2_b, grads,
                            trainable, d_h_mid);
        d_h_mid += dh; // residual path

        // attention branch
        const auto wq = detail::mat_view<Scalar>(params, blk.wq, d, d);
        const auto wk = detail::mat_view<Scalar>(params, blk.wk, d, d);
        const auto wv = detail::mat_view<Scalar>(params, blk.wv, d, d);
        const auto wo = detail::mat_view<Scalar>(params, blk.wo, d, d);

        if (trainable) {
            detail::mat_view<Scalar>(grads, blk.wo, d, d).noalias() +=
                lt.ctx.transpose() * d_h_mid;
            detail::vec_view<Scalar>(grads, blk.bo, d) += d_h_mid.colwise().sum().transpose();
        }
        MatRM<Scalar> d_ctx = d_h_mid * wo.transpose();

        MatRM<Scalar> dq = MatRM<Scalar>::Zero(t_len, d);
        MatRM<Scalar> dk = MatRM<Scalar>::Zero(t_len, d);
        MatRM<Scalar> dv = MatRM<Scalar>::Zero(t_len, d);
        const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh_head));
        for (Index head = 0; head < h; ++head) {
            const auto& p = lt.probs[static_cast<std::size_t>(head)];
            const auto vh = lt.v.middleCols(head * dh_head, dh_head);
            const auto qh = lt.q.middleCols(head * dh_head, dh_head);
            const auto kh = lt.k.middleCols(head * dh_head, dh_head);
            const auto d_ctx_h = d_ctx.middleCols(head * dh_head, dh_head);

            dv.middleCols(head * dh_head, dh_head).noalias() = p.transpose() * d_ctx_h;
            MatRM<Scalar> d_p = d_ctx_h * vh.transpose();
            // softmax backward per row; masked entries have p = 0
            MatRM<Scalar> d_scores(t_len, t_len);
            for (Index i = 0; i < t_len; ++i) {
                const Scalar dot = (d_p.row(i).array() * p.row(i).array()).sum();
                d_scores.row(i) = (p.row(i).array() * (d_p.row(i).array() - dot)).matrix();
            }
            dq.middleCols(head * dh_head, dh_head).noalias() = d_scores * kh * scale;
            dk.middleCols(head * dh_head, dh_head).noalias() =
                d_scores.transpose() * qh * scale;
        }

        if (trainable) {
            detail::mat_view<Scalar>(grads, blk.wq, d, d).noalias() +=
                lt.a_norm.transpose() * dq;
            detail::vec_view<Scalar>(grads, blk.bq, d) += dq.colwise().sum().transpose();
            detail::mat_view<Scalar>(grads, blk.wk, d, d).noalias() +=
                lt.a_norm.transpose() * dk;
            detail::vec_view<Scalar>(grads, blk.bk, d) += dk.colwise().sum().transpose();
            detail::mat_view<Scalar>(grads, blk.wv, d, d).noalias() +=
                lt.a_norm.transpose() * dv;
            detail::vec_view<Scalar>(grads, blk.bv, d) += dv.colwise().sum().transpose();
        }
        MatRM<Scalar> d_a_norm = dq * wq.transpose();
        d_a_norm.noalias() += dk * wk.transpose();
        d_a_norm.noalias() += dv * wv.transpose();

        MatRM<Scalar> d_h_in_norm;
        layer_norm_backward(d_a_norm, lt.xhat1, lt.inv_std1, blk.ln1_g, blk.ln1_b, grads,
                            trainable, d_h_in_norm);
        dh = d_h_mid + d_h_in_norm;
    }

    void backward_final_norm_and_blocks(const ForwardTrace<Scalar>& tr,
                                        const MatRM<Scalar>& dh_norm,
                                        Vec<Scalar>& grads) const {
        const bool ln_f_trainable = trainable_from < config.n_layers;
        MatRM<Scalar> dh;
        layer_norm_backward(dh_norm, tr.xhat_f, tr.inv_std_f, layout.ln_f_g, layout.ln_f_b,
                            grads, ln_f_trainable, dh);
        for (int l = config.n_layers - 1; l >= trainable_from; --l)
            backward_block(l, tr.layers[static_cast<std::size_t>(l)], dh, grads);
        accumulate_embedding_grads(tr, dh, grads);
    }

    // dh is the gradient at the embedding sum h0; embeddings sit below every
    // block so they only train when everything does.
    void accumulate_embedding_grads(const ForwardTrace<Scalar>& tr, const MatRM<Scalar>& dh,
                                    Vec<Scalar>& grads) const {
        if (trainable_from != 0) return;
        const Index d = config.d_model;
        auto d_tok = detail::mat_view<Scalar>(grads, layout.tok_emb, config.vocab, d);
        auto d_pos = detail::mat_view<Scalar>(grads, layout.pos_emb, config.ctx, d);
        for (Index i = 0; i < static_cast<Index>(tr.tokens.size()); ++i) {
            d_tok.row(tr.tokens[static_cast<std::size_t>(i)]) += dh.row(i);
            d_pos.row(i) += dh.row(i);
        }
    }
};

// Mean next-token cross-entropy and parameter gradients over a batch of
// sequences. The loss is averaged over all predicted (non-PAD-target)
// positions in the batch.
template <class Scalar>
std::pair<Scalar, Vec<Scalar>> backward_lm(const ToyTransformer<Scalar>& model,
                                           const std::vector<std::vector<std::int32_t>>& batch) {
    if (batch.empty()) throw std::invalid_argument("backward_lm: empty batch");
    std::vector<ForwardTrace<Scalar>> traces;
    traces.reserve(batch.size());
    Index n_pred_total = 0;
    for (const auto& seq : batch) {
        traces.push_back(model.forward(seq));
        const auto& tr = traces.back();
        for (Index i = 0; i + 1 < static_cast<Index>(seq.size()); ++i)
            if (tr.tokens[static_cast<std::size_t>(i + 1)] != model.pad_token()) ++n_pred_total;
    }
    if (n_pred_total == 0)
        throw std::invalid_argument("backward_lm: batch has no predictable positions");
    Vec<Scalar> grads = Vec<Scalar>::Zero(model.layout.total);
    Scalar loss = Scalar(0);
    const Scalar scale = Scalar(1) / static_cast<Scalar>(n_pred_total);
    for (const auto& tr : traces) {
        auto [l, n] = model.backward_lm_sequence(tr, grads, scale);
        loss += l;
        (void)n;
    }
    return {loss * scale, std::move(grads)};
}

// Mean next-token cross-entropy without gradients plus argmax accuracy,
// for validation splits.
template <class Scalar>
std::pair<Scalar, double> lm_eval(const ToyTransformer<Scalar>& model,
                                  const std::vector<std::vector<std::int32_t>>& batch) {
    Scalar loss = Scalar(0);
    Index n_pred = 0, n_correct = 0;
    for (const auto& seq : batch) {
        const ForwardTrace<Scalar> tr = model.forward(seq);
        for (Index i = 0; i + 1 < static_cast<Index>(seq.size()); ++i) {
            const std::int32_t target = tr.tokens[static_cast<std::size_t>(i + 1)];
            if (target == model.pad_token()) continue;
            const Scalar m = tr.logits.row(i).maxCoeff();
            Scalar lse = Scalar(0);
            for (Index v = 0; v < model.config.vocab; ++v)
                lse += std::exp(tr.logits(i, v) - m);
            loss += m + std::log(lse) - tr.logits(i, target);
            Index best = 0;
            tr.logits.row(i).maxCoeff(&best);
            if (static_cast<std::int32_t>(best) == target) ++n_correct;
            ++n_pred;
        }
    }
    if (n_pred == 0) throw std::invalid_argument("lm_eval: no predictable positions");
    return {loss / static_cast<Scalar>(n_pred),
            static_cast<double>(n_correct) / static_cast<double>(n_pred)};
}

// Frozen deep copy of a model, used as the reference for manipulation.
template <class Scalar>
struct ReferenceSnapshot {
    ToyTransformer<Scalar> model;

    explicit ReferenceSnapshot(const ToyTransformer<Scalar>& m) : model(m) {}

    Vec<Scalar> rep(const std::vector<std::int32_t>& tokens, int layer) const {
        return model.forward(tokens).last_token_hidden(layer);
    }
};

// --- checkpoint I/O -----------------------------------------------------------
// Layout: "LENSCKPT" | u32 version=1 | u32 json_len | config JSON |
// f32 parameter blob in canonical order. A sidecar `<path>.manifest.json`
// records byte size and content hash.

namespace detail {
constexpr char kCkptMagic[8] = {'L', 'E', 'N', 'S', 'C', 'K', 'P', 'T'};
}

template <class Scalar>
void save_checkpoint(const ToyTransformer<Scalar>& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
    const std::uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::string cfg = nlohmann::json(model.config).dump();
    const auto json_len = static_cast<std::uint32_t>(cfg.size());
    out.write(reinterpret_cast<const char*>(&json_len), sizeof(json_len));
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    std::vector<float> blob(static_cast<std::size_t>(model.params.size()));
    for (Index i = 0; i < model.params.size(); ++i)
        blob[static_cast<std::size_t>(i)] = static_cast<float>(model.params(i));
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size() * sizeof(float)));
    if (!out) throw io_error("write failed: " + path);
    out.close();

    nlohmann::json manifest;
    manifest["file"] = path.substr(path.find_last_of('/') + 1);
    manifest["bytes"] = 16 + cfg.size() + blob.size() * sizeof(float);
    manifest["fnv1a64"] = hash_file_hex(path);
    manifest["config"] = model.config;
    std::ofstream mout(path + ".manifest.json", std::ios::trunc);
    if (!mout) throw io_error("cannot write manifest for: " + path);
    mout << manifest.dump(2) << "\n";
}

template <class Scalar>
ToyTransformer<Scalar> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (in.gcount() != sizeof(magic) ||
        std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
        throw io_error("bad checkpoint magic at byte offset 0: " + path);
    std::uint32_t version = 0, json_len = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&json_len), sizeof(json_len));
    if (!in || version != 1)
        throw io_error("unsupported checkpoint version in: " + path);
    std::string cfg_text(json_len, '\0');
    in.read(cfg_text.data(), json_len);
    if (in.gcount() != static_cast<std::streamsize>(json_len))
        throw io_error("checkpoint truncated in config block: " + path);
    ModelConfig cfg;
    try {
        cfg = nlohmann::json::parse(cfg_text).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw io_error("checkpoint config parse failure: " + std::string(e.what()));
    }
    ToyTransformer<Scalar> model(cfg);
    std::vector<float> blob(static_cast<std::size_t>(model.layout.total));
    in.read(reinterpret_cast<char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(blob.size() * sizeof(float)))
        throw io_error("checkpoint truncated in parameter blob: " + path);
    char extra;
    if (in.read(&extra, 1)) throw io_error("trailing bytes in checkpoint: " + path);
    for (Index i = 0; i < model.layout.total; ++i)
        model.params(i) = static_cast<Scalar>(blob[static_cast<std::size_t>(i)]);
    if (!model.params.allFinite())
        throw io_error("checkpoint contains non-finite parameters: " + path);
    return model;
}

} // namespace lens

#endif
