// SPDX-License-Identifier: Apache-2.0
#include "lens/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "lens/error.hpp"
#include "lens/linalg.hpp"

namespace lens {

namespace {

// Round-trip-exact float formatting for CSV/JSON determinism.
std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

Vecd rep_at(const ToyTransformer<float>& model, const TokenSeq& tokens, int layer) {
    return model.forward(tokens).last_token_hidden(layer).cast<double>();
}

} // namespace

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["run_id"] = run_id;
    j["seed"] = seed;
    j["retrieval_accuracy"] = retrieval_accuracy;
    j["retrieval_skipped"] = retrieval_skipped;
    nlohmann::json langs = nlohmann::json::object();
    for (const auto& [id, ev] : per_language) {
        langs[id] = {{"fidelity", ev.fidelity.fidelity},
                     {"token_fraction", ev.fidelity.token_fraction},
                     {"empty_generations", ev.fidelity.empty_generations},
                     {"next_token_accuracy", ev.next_token_accuracy},
                     {"next_token_ce", ev.next_token_ce}};
    }
    j["languages"] = langs;
    nlohmann::json drift = nlohmann::json::object();
    for (const auto& [layer, v] : central_drift) drift[std::to_string(layer)] = v;
    j["central_drift"] = drift;
    nlohmann::json sep = nlohmann::json::object();
    for (const auto& [layer, s] : separation)
        sep[std::to_string(layer)] = {{"agnostic", s.agnostic}, {"specific", s.specific}};
    j["separation"] = sep;
    return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    r.run_id = j.at("run_id").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.retrieval_accuracy = j.at("retrieval_accuracy").get<double>();
    r.retrieval_skipped = j.at("retrieval_skipped").get<int>();
    for (const auto& [id, ev] : j.at("languages").items()) {
        LanguageEval le;
        le.fidelity.fidelity = ev.at("fidelity").get<double>();
        le.fidelity.token_fraction = ev.at("token_fraction").get<double>();
        le.fidelity.empty_generations = ev.at("empty_generations").get<int>();
        le.next_token_accuracy = ev.at("next_token_accuracy").get<double>();
        le.next_token_ce = ev.at("next_token_ce").get<double>();
        r.per_language[id] = le;
    }
    for (const auto& [layer, v] : j.at("central_drift").items())
        r.central_drift[std::stoi(layer)] = v.get<double>();
    for (const auto& [layer, s] : j.at("separation").items())
        r.separation[std::stoi(layer)] = {s.at("agnostic").get<double>(),
                                          s.at("specific").get<double>()};
    return r;
}

bool response_in_language(const TokenSeq& response, int lang, const ToyLanguageSpec& spec) {
    int mine = 0, other = 0;
    for (std::int32_t tok : response) {
        if (spec.is_special(tok)) continue;
        if (spec.language_of(tok) == lang)
            ++mine;
        else
            ++other;
    }
    return mine + other > 0 && mine > other; // ties count out-of-language
}

FidelityResult language_fidelity(const ToyTransformer<float>& model, int lang,
                                 const std::vector<TokenSeq>& prompts,
                                 const ToyLanguageSpec& spec, const EvalConfig& cfg) {
    FidelityResult out;
    std::int64_t in_lang_tokens = 0, non_special_tokens = 0;
    int in_lang_responses = 0;
    for (const auto& prompt : prompts) {
        const TokenSeq response = model.generate(prompt, cfg.max_new);
        int non_special = 0;
        for (std::int32_t tok : response) {
            if (spec.is_special(tok)) continue;
            ++non_special;
            ++non_special_tokens;
            if (spec.language_of(tok) == lang) ++in_lang_tokens;
        }
        if (non_special == 0) {
            ++out.empty_generations; // flagged; counts out-of-language
            continue;
        }
        if (response_in_language(response, lang, spec)) ++in_lang_responses;
    }
    out.fidelity =
        prompts.empty() ? 0.0 : static_cast<double>(in_lang_responses) / prompts.size();
    out.token_fraction = non_special_tokens == 0
                             ? 0.0
                             : static_cast<double>(in_lang_tokens) / non_special_tokens;
    return out;
}

RetrievalResult retrieval_accuracy(const ToyTransformer<float>& model,
                                   const std::vector<ParallelPair>& pairs, int layer,
                                   const SubspaceModel<double>& subspace,
                                   std::ostream* warn) {
    if (pairs.empty()) throw std::invalid_argument("retrieval_accuracy: no pairs");
    const std::size_t n = pairs.size();
    std::vector<Vecd> target_proj(n), central_proj(n);
    std::vector<bool> usable(n, true);
    for (std::size_t i = 0; i < n; ++i) {
        target_proj[i] = project_agnostic(
            subspace, Vecd(rep_at(model, pairs[i].tokens_a, layer)));
        central_proj[i] = project_agnostic(
            subspace, Vecd(rep_at(model, pairs[i].tokens_b, layer)));
        if (target_proj[i].norm() == 0.0 || central_proj[i].norm() == 0.0) {
            usable[i] = false;
            if (warn)
                *warn << "[lens::retrieval] warning: zero-norm projection, pair " << i
                      << " skipped\n";
        }
    }
    int correct = 0, evaluated = 0;
    RetrievalResult out;
    for (std::size_t i = 0; i < n; ++i) {
        if (!usable[i]) {
            ++out.skipped;
            continue;
        }
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!usable[j]) continue;
            const double cosine = target_proj[i].dot(central_proj[j]) /
                                  (target_proj[i].norm() * central_proj[j].norm());
            if (cosine > best) {
                best = cosine;
                best_j = j;
            }
        }
        if (best_j == i) ++correct;
        ++evaluated;
    }
    out.accuracy = evaluated == 0 ? 0.0 : static_cast<double>(correct) / evaluated;
    return out;
}

std::map<int, double> central_drift(const ToyTransformer<float>& model,
                                    const ReferenceSnapshot<float>& reference,
                                    const std::vector<TokenSeq>& central_sentences,
                                    const std::vector<int>& layers) {
    std::map<int, double> out;
    if (central_sentences.empty())
        throw std::invalid_argument("central_drift: empty sentence set");
    for (int layer : layers) out[layer] = 0.0;
    for (const auto& seq : central_sentences) {
        const auto live = model.forward(seq);
        const auto ref = reference.model.forward(seq);
        for (int layer : layers)
            out[layer] += (live.last_token_hidden(layer) - ref.last_token_hidden(layer))
                              .template cast<double>()
                              .norm();
    }
    for (auto& [layer, v] : out) v /= static_cast<double>(central_sentences.size());
    return out;
}

std::vector<PcaRow> export_pca(const ToyTransformer<float>& model,
                               const std::vector<std::vector<TokenSeq>>& inputs,
                               const LanguageSet& langs, int layer,
                               const SubspaceModel<double>& subspace, SubspaceKind kind) {
    langs.validate();
    if (static_cast<Index>(inputs.size()) != langs.size())
        throw std::invalid_argument("export_pca: inputs do not match language set");
    std::vector<Vecd> projected;
    std::vector<PcaRow> rows;
    for (Index l = 0; l < langs.size(); ++l) {
        for (std::size_t i = 0; i < inputs[static_cast<std::size_t>(l)].size(); ++i) {
            const Vecd rep = rep_at(model, inputs[static_cast<std::size_t>(l)][i], layer);
            projected.push_back(kind == SubspaceKind::Agnostic
                                    ? project_agnostic(subspace, rep)
                                    : project_specific(subspace, rep));
            PcaRow row;
            row.lang = langs.languages[static_cast<std::size_t>(l)];
            row.sample_id = static_cast<int>(i);
            row.subspace = kind == SubspaceKind::Agnostic ? "agnostic" : "specific";
            row.layer = layer;
            rows.push_back(row);
        }
    }
    const auto coords = pca_2d(projected);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i].pc1 = coords[i].first;
        rows[i].pc2 = coords[i].second;
    }
    return rows;
}

void write_pca_csv(const std::vector<PcaRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << "lang,sample_id,pc1,pc2,subspace,layer\n";
    for (const auto& r : rows)
        out << r.lang << ',' << r.sample_id << ',' << fmt_double(r.pc1) << ','
            << fmt_double(r.pc2) << ',' << r.subspace << ',' << r.layer << "\n";
    if (!out) throw io_error("write failed: " + path);
}

SubspaceSeparation subspace_separation(const ToyTransformer<float>& model,
                                       const std::vector<std::vector<TokenSeq>>& inputs,
                                       int layer, const SubspaceModel<double>& subspace) {
    const std::size_t n_lang = inputs.size();
    std::vector<Vecd> centroid_a(n_lang, Vecd::Zero(subspace.dim()));
    std::vector<Vecd> centroid_s(n_lang, Vecd::Zero(subspace.dim()));
    for (std::size_t l = 0; l < n_lang; ++l) {
        if (inputs[l].empty())
            throw std::invalid_argument("subspace_separation: empty language input");
        for (const auto& seq : inputs[l]) {
            const Vecd rep = rep_at(model, seq, layer);
            centroid_a[l] += project_agnostic(subspace, rep);
            centroid_s[l] += project_specific(subspace, rep);
        }
        centroid_a[l] /= static_cast<double>(inputs[l].size());
        centroid_s[l] /= static_cast<double>(inputs[l].size());
    }
    SubspaceSeparation sep;
    int n_pairs = 0;
    for (std::size_t a = 0; a < n_lang; ++a)
        for (std::size_t b = a + 1; b < n_lang; ++b) {
            sep.agnostic += (centroid_a[a] - centroid_a[b]).norm();
            sep.specific += (centroid_s[a] - centroid_s[b]).norm();
            ++n_pairs;
        }
    if (n_pairs > 0) {
        sep.agnostic /= n_pairs;
        sep.specific /= n_pairs;
    }
    return sep;
}

std::vector<std::vector<TokenSeq>> eval_sentences(const ToyLanguageSpec& spec,
                                                  std::uint64_t seed, int per_lang) {
    std::vector<std::vector<TokenSeq>> out(static_cast<std::size_t>(spec.num_languages));
    for (int l = 0; l < spec.num_languages; ++l) {
        const auto sentences = gen_semantic(
            mix_seed(seed, 0xe100 + static_cast<std::uint64_t>(l)),
            static_cast<std::size_t>(per_lang), spec);
        for (const auto& s : sentences)
            out[static_cast<std::size_t>(l)].push_back(render(s, l, spec));
    }
    return out;
}

std::vector<ParallelPair> eval_pairs(const ToyLanguageSpec& spec, int central,
                                     std::uint64_t seed, int per_lang) {
    return build_manipulation_set(mix_seed(seed, 0xe200), spec, central,
                                  static_cast<std::size_t>(per_lang));
}

std::vector<std::vector<TokenSeq>> eval_parallel_inputs(const ToyLanguageSpec& spec,
                                                        std::uint64_t seed, int per_lang) {
    const auto sentences = gen_semantic(mix_seed(seed, 0xe300),
                                        static_cast<std::size_t>(per_lang), spec);
    std::vector<std::vector<TokenSeq>> out(static_cast<std::size_t>(spec.num_languages));
    for (int l = 0; l < spec.num_languages; ++l)
        for (const auto& s : sentences)
            out[static_cast<std::size_t>(l)].push_back(render(s, l, spec));
    return out;
}

EvalReport evaluate(const ToyTransformer<float>& model,
                    const ReferenceSnapshot<float>& reference,
                    const std::vector<SubspaceModel<double>>& layer_subspaces,
                    const LayerRange& layers, const LanguageSet& langs,
                    const ToyLanguageSpec& spec, const EvalConfig& cfg,
                    const std::string& run_id) {
    cfg.validate();
    langs.validate();
    if (static_cast<int>(layer_subspaces.size()) != layers.count())
        throw std::invalid_argument("evaluate: one subspace per manipulated layer required");

    EvalReport report;
    report.seed = cfg.seed;
    report.run_id = run_id;

    const auto sentences = eval_sentences(spec, cfg.seed, cfg.fidelity_prompts);
    for (int l = 0; l < spec.num_languages; ++l) {
        std::vector<TokenSeq> prompts;
        for (const auto& seq : sentences[static_cast<std::size_t>(l)]) {
            const std::size_t k =
                std::min<std::size_t>(static_cast<std::size_t>(cfg.prompt_len), seq.size());
            prompts.emplace_back(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(k));
        }
        LanguageEval ev;
        ev.fidelity = language_fidelity(model, l, prompts, spec, cfg);
        const auto [ce, acc] = lm_eval(model, sentences[static_cast<std::size_t>(l)]);
        ev.next_token_ce = static_cast<double>(ce);
        ev.next_token_accuracy = acc;
        report.per_language[langs.languages[static_cast<std::size_t>(l)]] = ev;
    }

    // retrieval over the top manipulated layer
    const auto pairs = eval_pairs(spec, static_cast<int>(langs.central_index), cfg.seed,
                                  cfg.retrieval_pairs);
    const auto retrieval =
        retrieval_accuracy(model, pairs, layers.last, layer_subspaces.back(), &std::cerr);
    report.retrieval_accuracy = retrieval.accuracy;
    report.retrieval_skipped = retrieval.skipped;

    // central drift per manipulated layer
    std::vector<TokenSeq> central_heldout;
    {
        const auto c_sentences = gen_semantic(mix_seed(cfg.seed, 0xe400),
                                              static_cast<std::size_t>(cfg.drift_sentences),
                                              spec);
        for (const auto& s : c_sentences)
            central_heldout.push_back(
                render(s, static_cast<int>(langs.central_index), spec));
    }
    std::vector<int> layer_list;
    for (int l = layers.first; l <= layers.last; ++l) layer_list.push_back(l);
    report.central_drift = central_drift(model, reference, central_heldout, layer_list);

    // subspace geometry per manipulated layer
    const auto parallel = eval_parallel_inputs(spec, cfg.seed, cfg.pca_samples);
    for (int l = layers.first; l <= layers.last; ++l)
        report.separation[l] = subspace_separation(
            model, parallel, l,
            layer_subspaces[static_cast<std::size_t>(l - layers.first)]);
    return report;
}

} // namespace lens
