// SPDX-License-Identifier: Apache-2.0
//
// Language subspace probing: split a multilingual mean-embedding matrix into
// a 1-d language-agnostic direction and a rank-r language-specific subspace
// with orthogonality between the two, plus the per-language expression
// directions and projectors used by the manipulation losses.
#ifndef LENS_SUBSPACE_HPP
#define LENS_SUBSPACE_HPP

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lens/error.hpp"
#include "lens/linalg.hpp"
#include "lens/types.hpp"

namespace lens {

struct LanguageSet {
    std::vector<std::string> languages; // unique ids, ordered
    Index central_index = 0;

    Index size() const { return static_cast<Index>(languages.size()); }

    void validate() const {
        if (languages.size() < 2)
            throw std::invalid_argument("LanguageSet: need at least 2 languages");
        if (central_index < 0 || central_index >= size())
            throw std::invalid_argument("LanguageSet: central index out of range");
        std::set<std::string> uniq(languages.begin(), languages.end());
        if (uniq.size() != languages.size())
            throw std::invalid_argument("LanguageSet: duplicate language ids");
    }

    Index index_of(const std::string& id) const {
        for (Index i = 0; i < size(); ++i)
            if (languages[static_cast<std::size_t>(i)] == id) return i;
        throw std::invalid_argument("unknown language id: " + id);
    }
};

// Per-language lists of last-token representation vectors, aligned with a
// LanguageSet's language order.
template <class Scalar>
struct RepSampleSet {
    std::vector<std::vector<Vec<Scalar>>> samples; // [language][sample]
};

template <class Scalar>
struct MeanEmbeddings {
    Mat<Scalar> m; // d x L, column l = mean representation of language l
    LanguageSet language_set;
};

// One layer's decomposition. u_a spans the language-agnostic subspace,
// m_s the language-specific one; gamma holds the per-language coordinates.
template <class Scalar>
struct SubspaceModel {
    int layer = 0;
    Vec<Scalar> u_a;      // unit vector, dim d
    Vec<Scalar> m_a_raw;  // unnormalized agnostic component from the probe
    Mat<Scalar> m_s;      // d x r, orthonormal columns
    Mat<Scalar> gamma;    // L x r
    Index r = 0;

    Index dim() const { return u_a.size(); }
};

template <class Scalar>
struct DirectionSet {
    int layer = 0;
    std::map<std::string, Vec<Scalar>> delta; // target language id -> direction
};

enum class MeanScale {
    PerLanguage, // 1/L column mean; keeps the residual column-centered
    PerDim       // 1/d scaling as printed in the source procedure
};

template <class Scalar>
MeanEmbeddings<Scalar> mean_embeddings(const RepSampleSet<Scalar>& set,
                                       const LanguageSet& langs) {
    langs.validate();
    if (static_cast<Index>(set.samples.size()) != langs.size())
        throw std::invalid_argument("mean_embeddings: sample lists do not match language set");
    Index d = -1;
    for (const auto& per_lang : set.samples) {
        if (per_lang.empty())
            throw std::invalid_argument("mean_embeddings: empty sample list for a language");
        for (const auto& v : per_lang) {
            if (d < 0) d = v.size();
            if (v.size() != d)
                throw std::invalid_argument("mean_embeddings: dimension mismatch across samples");
            if (!v.allFinite())
                throw std::invalid_argument("mean_embeddings: non-finite sample");
        }
    }
    MeanEmbeddings<Scalar> out;
    out.language_set = langs;
    out.m.resize(d, langs.size());
    for (Index l = 0; l < langs.size(); ++l) {
        const auto& per_lang = set.samples[static_cast<std::size_t>(l)];
        Vec<Scalar> acc = Vec<Scalar>::Zero(d);
        for (const auto& v : per_lang) acc += v;
        out.m.col(l) = acc / static_cast<Scalar>(per_lang.size());
    }
    return out;
}

namespace detail {

// First standard-basis vector with a usable component orthogonal to the
// columns of `basis`; used to complete m_s when the residual is degenerate.
template <class Scalar>
Vec<Scalar> orthonormal_completion(const Mat<Scalar>& basis, Index d) {
    for (Index e = 0; e < d; ++e) {
        Vec<Scalar> cand = Vec<Scalar>::Unit(d, e);
        cand -= basis * (basis.transpose() * cand);
        const Scalar n = cand.norm();
        if (n > Scalar(0.25)) return cand / n;
    }
    throw numeric_error("orthonormal_completion: no basis vector found");
}

template <class Scalar>
constexpr Scalar probe_runtime_tol() {
    return std::is_same_v<Scalar, double> ? Scalar(1e-6) : Scalar(1e-3);
}

} // namespace detail

// Decompose the mean-embedding matrix: low-rank approximation first, then a
// re-split of the approximant that forces the agnostic direction orthogonal
// to the specific subspace. Orthogonality is verified before returning.
template <class Scalar>
SubspaceModel<Scalar> probe(const MeanEmbeddings<Scalar>& means, Index r,
                            MeanScale scale = MeanScale::PerLanguage,
                            int layer = 0, std::ostream* warn = &std::cerr) {
    means.language_set.validate();
    const Index d = means.m.rows();
    const Index L = means.m.cols();
    if (L < 2) throw std::invalid_argument("probe: need at least 2 languages");
    if (r < 1 || r > L - 1)
        throw std::invalid_argument("probe: rank must satisfy 1 <= r <= L-1");
    if (!means.m.allFinite())
        throw std::invalid_argument("probe: non-finite mean embeddings");

    const Vec<Scalar> ones = Vec<Scalar>::Ones(L);
    const Scalar eps = std::numeric_limits<Scalar>::epsilon();

    // 1) low-rank approximation of M around the (scaled) column mean
    const Scalar mean_div = scale == MeanScale::PerLanguage
                                ? static_cast<Scalar>(L)
                                : static_cast<Scalar>(d);
    const Vec<Scalar> ma_prime = (means.m * ones) / mean_div;
    SvdResult<Scalar> first = top_r_svd<Scalar>(means.m - ma_prime * ones.transpose(), r);
    const Mat<Scalar> gamma_prime = first.v * first.s.asDiagonal();
    const Mat<Scalar> m_prime =
        ma_prime * ones.transpose() + first.u * gamma_prime.transpose();

    SubspaceModel<Scalar> out;
    out.layer = layer;
    out.r = r;

    // 2) force orthogonality: re-derive the agnostic component from the
    //    pseudoinverse of the approximant, then re-decompose the residual
    const Mat<Scalar> m_prime_pinv = pinv<Scalar>(m_prime);
    const Vec<Scalar> y = m_prime_pinv.transpose() * ones;
    const Scalar y2 = y.squaredNorm();
    const Scalar m_prime_scale = m_prime.norm();
    // y vanishes exactly when the all-ones vector has no component in the
    // rowspace of the approximant; then the agnostic direction is undefined.
    const Scalar y_floor = detail::probe_runtime_tol<Scalar>() * Scalar(1e-4) *
                           m_prime_pinv.norm() * std::sqrt(static_cast<Scalar>(L));
    const bool agnostic_degenerate = y.norm() <= y_floor;
    if (agnostic_degenerate) {
        if (warn)
            *warn << "[lens::probe] warning: agnostic component numerically zero; "
                     "completing u_a orthogonal to the specific subspace\n";
        out.m_a_raw = Vec<Scalar>::Zero(d);
    } else {
        out.m_a_raw = y / y2;
    }

    const Mat<Scalar> residual = m_prime - out.m_a_raw * ones.transpose();
    SvdResult<Scalar> second = top_r_svd<Scalar>(residual, r);
    out.m_s = second.u;
    out.gamma = second.v * second.s.asDiagonal();

    // Degenerate residual directions (e.g. all language means identical):
    // replace the useless columns with an orthonormal completion and zero the
    // corresponding coordinates so the invariants still hold.
    // Residual directions below rounding level of the approximant's scale
    // carry no signal.
    const Scalar s_tol = static_cast<Scalar>(std::max(d, L)) * eps * m_prime_scale;
    if (agnostic_degenerate) {
        out.u_a = detail::orthonormal_completion<Scalar>(out.m_s, d);
    } else {
        out.u_a = out.m_a_raw / out.m_a_raw.norm();
    }
    {
        bool warned = false;
        for (Index c = 0; c < r; ++c) {
            if (second.s(c) > s_tol) continue;
            Mat<Scalar> basis(d, c + 1);
            basis.col(0) = out.u_a;
            for (Index k = 0; k < c; ++k) basis.col(k + 1) = out.m_s.col(k);
            out.m_s.col(c) = detail::orthonormal_completion<Scalar>(basis, d);
            out.gamma.col(c).setZero();
            if (warn && !warned) {
                *warn << "[lens::probe] warning: degenerate language-specific signal; "
                         "completed " << (r - c) << " basis column(s) arbitrarily\n";
                warned = true;
            }
        }
    }

    // Verify the orthogonality postcondition; a violation means the
    // re-derivation above was invalid for this input.
    const Scalar tol = detail::probe_runtime_tol<Scalar>();
    if (std::abs(out.u_a.norm() - Scalar(1)) > tol)
        throw numeric_error("probe: agnostic direction is not unit length");
    const Vec<Scalar> cross = out.m_s.transpose() * out.u_a;
    if (cross.cwiseAbs().maxCoeff() > tol)
        throw numeric_error("probe: agnostic/specific orthogonality violated");
    const Mat<Scalar> gram = out.m_s.transpose() * out.m_s -
                             Mat<Scalar>::Identity(r, r);
    if (gram.cwiseAbs().maxCoeff() > tol)
        throw numeric_error("probe: specific basis is not orthonormal");
    return out;
}

// Language expression direction: the specific-subspace component of the
// target-minus-central mean difference.
template <class Scalar>
Vec<Scalar> direction(const SubspaceModel<Scalar>& model,
                      const MeanEmbeddings<Scalar>& means, Index target) {
    const Index L = means.m.cols();
    if (target < 0 || target >= L)
        throw std::invalid_argument("direction: unknown language index");
    if (target == means.language_set.central_index)
        throw std::invalid_argument("direction: target must differ from central");
    if (model.dim() != means.m.rows())
        throw std::invalid_argument("direction: dimension mismatch");
    const Vec<Scalar> diff =
        means.m.col(target) - means.m.col(means.language_set.central_index);
    return model.m_s * (model.m_s.transpose() * diff);
}

template <class Scalar>
Vec<Scalar> direction(const SubspaceModel<Scalar>& model,
                      const MeanEmbeddings<Scalar>& means,
                      const std::string& target_id) {
    return direction(model, means, means.language_set.index_of(target_id));
}

template <class Scalar>
DirectionSet<Scalar> directions(const SubspaceModel<Scalar>& model,
                                const MeanEmbeddings<Scalar>& means) {
    DirectionSet<Scalar> out;
    out.layer = model.layer;
    for (Index l = 0; l < means.language_set.size(); ++l) {
        if (l == means.language_set.central_index) continue;
        out.delta[means.language_set.languages[static_cast<std::size_t>(l)]] =
            direction(model, means, l);
    }
    return out;
}

template <class Scalar>
Vec<Scalar> project_agnostic(const SubspaceModel<Scalar>& model, const Vec<Scalar>& v) {
    if (v.size() != model.dim())
        throw std::invalid_argument("project_agnostic: dimension mismatch");
    return model.u_a * (model.u_a.dot(v));
}

template <class Scalar>
Vec<Scalar> project_specific(const SubspaceModel<Scalar>& model, const Vec<Scalar>& v) {
    if (v.size() != model.dim())
        throw std::invalid_argument("project_specific: dimension mismatch");
    return model.m_s * (model.m_s.transpose() * v);
}

// --- JSON serialization -----------------------------------------------------
// Document layout: {layer, d, r, u_a, m_a_raw, m_s (row-major), gamma
// (row-major), language_ids, central}.

inline nlohmann::json subspace_to_json(const SubspaceModel<double>& model,
                                       const LanguageSet& langs) {
    nlohmann::json j;
    j["layer"] = model.layer;
    j["d"] = model.dim();
    j["r"] = model.r;
    j["u_a"] = std::vector<double>(model.u_a.data(), model.u_a.data() + model.u_a.size());
    j["m_a_raw"] =
        std::vector<double>(model.m_a_raw.data(), model.m_a_raw.data() + model.m_a_raw.size());
    std::vector<double> ms;
    ms.reserve(static_cast<std::size_t>(model.m_s.size()));
    for (Index i = 0; i < model.m_s.rows(); ++i)
        for (Index c = 0; c < model.m_s.cols(); ++c) ms.push_back(model.m_s(i, c));
    j["m_s"] = ms;
    std::vector<double> g;
    g.reserve(static_cast<std::size_t>(model.gamma.size()));
    for (Index i = 0; i < model.gamma.rows(); ++i)
        for (Index c = 0; c < model.gamma.cols(); ++c) g.push_back(model.gamma(i, c));
    j["gamma"] = g;
    j["language_ids"] = langs.languages;
    j["central"] = langs.central_index;
    return j;
}

inline std::pair<SubspaceModel<double>, LanguageSet>
subspace_from_json(const nlohmann::json& j) {
    SubspaceModel<double> model;
    LanguageSet langs;
    model.layer = j.at("layer").get<int>();
    const Index d = j.at("d").get<Index>();
    model.r = j.at("r").get<Index>();
    const auto ua = j.at("u_a").get<std::vector<double>>();
    const auto mar = j.at("m_a_raw").get<std::vector<double>>();
    if (static_cast<Index>(ua.size()) != d || static_cast<Index>(mar.size()) != d)
        throw io_error("subspace json: u_a/m_a_raw length does not match d");
    model.u_a = Eigen::Map<const Vecd>(ua.data(), d);
    model.m_a_raw = Eigen::Map<const Vecd>(mar.data(), d);
    langs.languages = j.at("language_ids").get<std::vector<std::string>>();
    langs.central_index = j.at("central").get<Index>();
    const Index L = static_cast<Index>(langs.languages.size());
    const auto ms = j.at("m_s").get<std::vector<double>>();
    const auto g = j.at("gamma").get<std::vector<double>>();
    if (static_cast<Index>(ms.size()) != d * model.r)
        throw io_error("subspace json: m_s length does not match d*r");
    if (static_cast<Index>(g.size()) != L * model.r)
        throw io_error("subspace json: gamma length does not match L*r");
    model.m_s.resize(d, model.r);
    for (Index i = 0; i < d; ++i)
        for (Index c = 0; c < model.r; ++c)
            model.m_s(i, c) = ms[static_cast<std::size_t>(i * model.r + c)];
    model.gamma.resize(L, model.r);
    for (Index i = 0; i < L; ++i)
        for (Index c = 0; c < model.r; ++c)
            model.gamma(i, c) = g[static_cast<std::size_t>(i * model.r + c)];
    langs.validate();
    return {std::move(model), std::move(langs)};
}

} // namespace lens

#endif
