// SPDX-License-Identifier: Apache-2.0
//
// Manipulation losses: pull parallel representations together in the
// agnostic subspace, push the target's specific component toward its
// expression direction, and retain the central representations. Analytic
// gradients are supplied with respect to the current-model representations;
// reference representations are constants.
#ifndef LENS_LOSS_HPP
#define LENS_LOSS_HPP

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lens/subspace.hpp"
#include "lens/types.hpp"

namespace lens {

struct LensWeights {
    double lambda1 = 1.0;
    double lambda3 = 1.0;
    std::map<std::string, double> lambda_l; // target language id -> push strength
    LayerRange manipulated_layers;

    void validate(const std::vector<std::string>& target_languages) const {
        if (lambda1 < 0 || lambda3 < 0)
            throw std::invalid_argument("LensWeights: lambda1/lambda3 must be >= 0");
        if (manipulated_layers.empty())
            throw std::invalid_argument("LensWeights: manipulated layer range is empty");
        for (const auto& lang : target_languages) {
            auto it = lambda_l.find(lang);
            if (it == lambda_l.end())
                throw std::invalid_argument("LensWeights: missing lambda_l for language '" +
                                            lang + "'");
            if (it->second < 0)
                throw std::invalid_argument("LensWeights: lambda_l must be >= 0 for '" +
                                            lang + "'");
        }
    }
};

// Representations for one parallel pair across the manipulated layers;
// vectors are indexed by (layer - manipulated_layers.first).
template <class Scalar>
struct RepPair {
    std::vector<Vec<Scalar>> x_l;     // current target reps
    std::vector<Vec<Scalar>> x_c;     // current central reps
    std::vector<Vec<Scalar>> x_l_ref; // frozen reference target reps
    std::vector<Vec<Scalar>> x_c_ref; // frozen reference central reps
};

template <class Scalar>
struct RepBatch {
    std::string target_lang;
    LayerRange layers;
    std::vector<RepPair<Scalar>> items;
};

struct LayerLossRow {
    int layer = 0;
    double l1 = 0, l2 = 0, l3 = 0; // batch means for this layer
};

template <class Scalar>
struct LossBreakdown {
    double l1 = 0, l2 = 0, l3 = 0; // summed over layers, averaged over items
    double total = 0;              // lambda1*l1 + l2 + lambda3*l3
    std::vector<LayerLossRow> per_layer;
    // d(total)/d(rep), [item][layer offset]
    std::vector<std::vector<Vec<Scalar>>> grad_x_l;
    std::vector<std::vector<Vec<Scalar>>> grad_x_c;
};

template <class Scalar>
Scalar pull_loss(const SubspaceModel<Scalar>& model, const Vec<Scalar>& x_l,
                 const Vec<Scalar>& x_c) {
    if (x_l.size() != model.dim() || x_c.size() != model.dim())
        throw std::invalid_argument("pull_loss: dimension mismatch");
    const Scalar t = model.u_a.dot(x_l - x_c);
    return t * t;
}

// d(pull)/d(x_l); d/d(x_c) is the negation.
template <class Scalar>
Vec<Scalar> pull_loss_grad(const SubspaceModel<Scalar>& model, const Vec<Scalar>& x_l,
                           const Vec<Scalar>& x_c) {
    if (x_l.size() != model.dim() || x_c.size() != model.dim())
        throw std::invalid_argument("pull_loss: dimension mismatch");
    return Scalar(2) * model.u_a.dot(x_l - x_c) * model.u_a;
}

template <class Scalar>
Scalar push_loss(const SubspaceModel<Scalar>& model, const Vec<Scalar>& x_l,
                 const Vec<Scalar>& x_l_ref, const Vec<Scalar>& delta,
                 Scalar lambda_l) {
    if (x_l.size() != model.dim() || x_l_ref.size() != model.dim() ||
        delta.size() != model.dim())
        throw std::invalid_argument("push_loss: dimension mismatch");
    const Vec<Scalar> res =
        model.m_s * (model.m_s.transpose() * (x_l - x_l_ref)) - lambda_l * delta;
    return res.squaredNorm();
}

// d(push)/d(x_l), valid for delta in span(m_s) as produced by direction().
template <class Scalar>
Vec<Scalar> push_loss_grad(const SubspaceModel<Scalar>& model, const Vec<Scalar>& x_l,
                           const Vec<Scalar>& x_l_ref, const Vec<Scalar>& delta,
                           Scalar lambda_l) {
    if (x_l.size() != model.dim() || x_l_ref.size() != model.dim() ||
        delta.size() != model.dim())
        throw std::invalid_argument("push_loss: dimension mismatch");
    return Scalar(2) *
           (model.m_s * (model.m_s.transpose() * (x_l - x_l_ref)) - lambda_l * delta);
}

template <class Scalar>
Scalar retain_loss(const Vec<Scalar>& x_c, const Vec<Scalar>& x_c_ref) {
    if (x_c.size() != x_c_ref.size())
        throw std::invalid_argument("retain_loss: dimension mismatch");
    return (x_c - x_c_ref).squaredNorm();
}

template <class Scalar>
Vec<Scalar> retain_loss_grad(const Vec<Scalar>& x_c, const Vec<Scalar>& x_c_ref) {
    if (x_c.size() != x_c_ref.size())
        throw std::invalid_argument("retain_loss: dimension mismatch");
    return Scalar(2) * (x_c - x_c_ref);
}

// Total objective over the manipulated layers, averaged over batch items.
// `models` and `deltas` are indexed by layer offset within `batch.layers`;
// deltas[k] is the expression direction of the batch's target language at
// that layer.
template <class Scalar>
LossBreakdown<Scalar> total_loss(const std::vector<SubspaceModel<Scalar>>& models,
                                 const std::vector<Vec<Scalar>>& deltas,
                                 const LensWeights& weights,
                                 const RepBatch<Scalar>& batch) {
    const std::size_t n_layers = static_cast<std::size_t>(batch.layers.count());
    if (models.size() != n_layers || deltas.size() != n_layers)
        throw std::invalid_argument("total_loss: one subspace model and delta per layer required");
    auto it = weights.lambda_l.find(batch.target_lang);
    if (it == weights.lambda_l.end())
        throw std::invalid_argument("total_loss: missing lambda_l for language '" +
                                    batch.target_lang + "'");
    const Scalar lambda_l = static_cast<Scalar>(it->second);
    const Scalar lambda1 = static_cast<Scalar>(weights.lambda1);
    const Scalar lambda3 = static_cast<Scalar>(weights.lambda3);

    LossBreakdown<Scalar> out;
    out.per_layer.resize(n_layers);
    const std::size_t n_items = batch.items.size();
    if (n_items == 0) return out;
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n_items);

    out.grad_x_l.assign(n_items, std::vector<Vec<Scalar>>(n_layers));
    out.grad_x_c.assign(n_items, std::vector<Vec<Scalar>>(n_layers));

    for (std::size_t k = 0; k < n_layers; ++k) {
        auto& row = out.per_layer[k];
        row.layer = batch.layers.first + static_cast<int>(k);
        for (std::size_t i = 0; i < n_items; ++i) {
            const RepPair<Scalar>& item = batch.items[i];
            if (item.x_l.size() != n_layers || item.x_c.size() != n_layers ||
                item.x_l_ref.size() != n_layers || item.x_c_ref.size() != n_layers)
                throw std::invalid_argument("total_loss: item missing per-layer representations");
            const SubspaceModel<Scalar>& m = models[k];

            row.l1 += static_cast<double>(pull_loss(m, item.x_l[k], item.x_c[k])) / n_items;
            row.l2 += static_cast<double>(
                          push_loss(m, item.x_l[k], item.x_l_ref[k], deltas[k], lambda_l)) /
                      n_items;
            row.l3 += static_cast<double>(retain_loss(item.x_c[k], item.x_c_ref[k])) / n_items;

            const Vec<Scalar> g_pull = pull_loss_grad(m, item.x_l[k], item.x_c[k]);
            const Vec<Scalar> g_push =
                push_loss_grad(m, item.x_l[k], item.x_l_ref[k], deltas[k], lambda_l);
            const Vec<Scalar> g_retain = retain_loss_grad(item.x_c[k], item.x_c_ref[k]);

            out.grad_x_l[i][k] = inv_n * (lambda1 * g_pull + g_push);
            out.grad_x_c[i][k] = inv_n * (-lambda1 * g_pull + lambda3 * g_retain);
        }
        out.l1 += row.l1;
        out.l2 += row.l2;
        out.l3 += row.l3;
    }
    out.total = weights.lambda1 * out.l1 + out.l2 + weights.lambda3 * out.l3;
    return out;
}

} // namespace lens

#endif
