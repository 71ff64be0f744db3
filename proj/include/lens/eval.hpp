// SPDX-License-Identifier: Apache-2.0
//
// Toy-scale measurements of the method's qualitative claims: language
// fidelity under greedy generation, a retrieval comprehension proxy,
// central-representation drift, and subspace geometry exports.
#ifndef LENS_EVAL_HPP
#define LENS_EVAL_HPP

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lens/corpus.hpp"
#include "lens/model.hpp"
#include "lens/subspace.hpp"

namespace lens {

struct EvalConfig {
    int prompt_len = 4; // prompt tokens fed to generation (BOS included)
    int max_new = 16;
    int fidelity_prompts = 100; // per language
    int retrieval_pairs = 100;  // per target language
    int drift_sentences = 100;
    int pca_samples = 60; // parallel sentences per language for PCA export
    std::uint64_t seed = 0;

    void validate() const {
        if (prompt_len < 1) throw std::invalid_argument("EvalConfig: prompt_len < 1");
        if (max_new < 1) throw std::invalid_argument("EvalConfig: max_new < 1");
        if (fidelity_prompts < 1 || retrieval_pairs < 1 || drift_sentences < 1 ||
            pca_samples < 1)
            throw std::invalid_argument("EvalConfig: eval set sizes must be >= 1");
    }
};

struct FidelityResult {
    double fidelity = 0.0;       // response-level majority rule
    double token_fraction = 0.0; // token-level diagnostic
    int empty_generations = 0;
};

struct LanguageEval {
    FidelityResult fidelity;
    double next_token_accuracy = 0.0;
    double next_token_ce = 0.0;
};

struct SubspaceSeparation {
    double agnostic = 0.0; // mean inter-language centroid distance, P_a projection
    double specific = 0.0; // same, P_s projection
};

struct EvalReport {
    std::map<std::string, LanguageEval> per_language;
    double retrieval_accuracy = 0.0;
    int retrieval_skipped = 0;
    std::map<int, double> central_drift;              // per manipulated layer
    std::map<int, SubspaceSeparation> separation;     // per manipulated layer
    std::uint64_t seed = 0;
    std::string run_id;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

// Response-level language id: strict majority of non-special tokens in the
// language's vocabulary block. Ties and token-free responses are out.
bool response_in_language(const TokenSeq& response, int lang, const ToyLanguageSpec& spec);

// Fraction of prompts whose greedy responses majority-belong to language
// `lang`'s vocabulary block. Ties and empty responses count out-of-language.
FidelityResult language_fidelity(const ToyTransformer<float>& model, int lang,
                                 const std::vector<TokenSeq>& prompts,
                                 const ToyLanguageSpec& spec, const EvalConfig& cfg);

// Nearest-central retrieval by cosine over agnostic projections of last-token
// representations at `layer`. Pairs with a zero-norm projection are skipped.
struct RetrievalResult {
    double accuracy = 0.0;
    int skipped = 0;
};
RetrievalResult retrieval_accuracy(const ToyTransformer<float>& model,
                                   const std::vector<ParallelPair>& pairs, int layer,
                                   const SubspaceModel<double>& subspace,
                                   std::ostream* warn = nullptr);

// Mean Euclidean distance between live and reference last-token states.
std::map<int, double> central_drift(const ToyTransformer<float>& model,
                                    const ReferenceSnapshot<float>& reference,
                                    const std::vector<TokenSeq>& central_sentences,
                                    const std::vector<int>& layers);

struct PcaRow {
    std::string lang;
    int sample_id = 0;
    double pc1 = 0.0, pc2 = 0.0;
    std::string subspace;
    int layer = 0;
};

enum class SubspaceKind { Agnostic, Specific };

// Project each last-token representation with P_a or P_s and reduce to 2-d
// principal coordinates. `inputs[lang][i]` must be parallel across languages.
std::vector<PcaRow> export_pca(const ToyTransformer<float>& model,
                               const std::vector<std::vector<TokenSeq>>& inputs,
                               const LanguageSet& langs, int layer,
                               const SubspaceModel<double>& subspace, SubspaceKind kind);

void write_pca_csv(const std::vector<PcaRow>& rows, const std::string& path);

// Mean pairwise distance between per-language centroids of projected reps.
SubspaceSeparation subspace_separation(const ToyTransformer<float>& model,
                                       const std::vector<std::vector<TokenSeq>>& inputs,
                                       int layer, const SubspaceModel<double>& subspace);

// Full evaluation bundle over deterministically derived held-out splits.
EvalReport evaluate(const ToyTransformer<float>& model,
                    const ReferenceSnapshot<float>& reference,
                    const std::vector<SubspaceModel<double>>& layer_subspaces,
                    const LayerRange& layers, const LanguageSet& langs,
                    const ToyLanguageSpec& spec, const EvalConfig& cfg,
                    const std::string& run_id = "run");

// Held-out splits used by evaluate(); exposed for tests and PCA export.
std::vector<std::vector<TokenSeq>> eval_sentences(const ToyLanguageSpec& spec,
                                                  std::uint64_t seed, int per_lang);
std::vector<ParallelPair> eval_pairs(const ToyLanguageSpec& spec, int central,
                                     std::uint64_t seed, int per_lang);
std::vector<std::vector<TokenSeq>> eval_parallel_inputs(const ToyLanguageSpec& spec,
                                                        std::uint64_t seed, int per_lang);

} // namespace lens

#endif
