// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multilingual corpus: toy languages share first-order Markov
// semantics but render into disjoint vocabulary blocks, so "language" is
// decidable per token while meaning is parallel across languages.
#ifndef LENS_CORPUS_HPP
#define LENS_CORPUS_HPP

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lens/rng.hpp"
#include "lens/subspace.hpp"
#include "lens/types.hpp"

namespace lens {

using SemanticSentence = std::vector<std::int32_t>; // ids in [0, semantic_vocab)
using TokenSeq = std::vector<std::int32_t>;

struct ToyLanguageSpec {
    int num_languages = 3;
    int semantic_vocab = 64;
    int ctx = 32;
    int min_len = 4;
    int max_len = 24;
    int branching = 6;               // successors per Markov state
    std::uint64_t chain_seed = 2024; // the chain is part of the language spec

    static constexpr std::int32_t BOS = 0;
    static constexpr std::int32_t EOS = 1;
    static constexpr std::int32_t PAD = 2;
    static constexpr std::int32_t num_specials = 3;

    int vocab_size() const { return num_specials + num_languages * semantic_vocab; }
    std::int32_t block_start(int lang) const {
        return num_specials + static_cast<std::int32_t>(lang) * semantic_vocab;
    }
    // Language owning a token id; -1 for specials. Total on valid ids.
    int language_of(std::int32_t token) const;
    bool is_special(std::int32_t token) const { return token >= 0 && token < num_specials; }
    std::vector<std::string> language_ids() const;

    void validate() const;
};

// Row-stochastic transition matrix plus initial distribution over semantic ids.
struct MarkovChain {
    Matd transition; // S x S
    Vecd initial;    // S
};

MarkovChain build_chain(const ToyLanguageSpec& spec);

std::vector<SemanticSentence> gen_semantic(std::uint64_t seed, std::size_t count,
                                           const ToyLanguageSpec& spec);

TokenSeq render(const SemanticSentence& sentence, int lang, const ToyLanguageSpec& spec);

// Inverse of render; rejects sequences that mix vocabulary blocks.
std::pair<int, SemanticSentence> derender(const TokenSeq& tokens,
                                          const ToyLanguageSpec& spec);

struct ParallelPair {
    SemanticSentence semantic;
    int lang_a = 0; // target
    int lang_b = 0; // central
    TokenSeq tokens_a;
    TokenSeq tokens_b;
};

// Non-parallel probing sentences, independently drawn per language.
std::vector<std::vector<TokenSeq>> build_probing_set(std::uint64_t seed,
                                                     const ToyLanguageSpec& spec,
                                                     std::size_t n_per_lang = 300);

// Parallel target<->central pairs, grouped by target language.
std::vector<ParallelPair> build_manipulation_set(std::uint64_t seed,
                                                 const ToyLanguageSpec& spec, int central,
                                                 std::size_t n_per_lang = 200);

// Pretraining stream with a fixed language mixture (deterministic per seed).
// Target-language sentences code-switch token-wise into the central block
// with probability `central_leak`: the backbone then sees central tokens as
// plausible continuations of target contexts, which is what produces the
// off-target behavior the manipulation stage is meant to repair. Probing,
// manipulation and evaluation splits are never code-switched.
struct PretrainSequence {
    int lang = 0;
    TokenSeq tokens;

    bool operator==(const PretrainSequence&) const = default;
};

std::vector<PretrainSequence> build_pretrain_set(std::uint64_t seed,
                                                 const ToyLanguageSpec& spec,
                                                 const std::vector<double>& mixture,
                                                 std::size_t count, int central = 0,
                                                 double central_leak = 0.0);

// --- external embedding dumps ------------------------------------------------
// Binary layout (little-endian): "LENSEMB1" | u32 version=1 | u32 d | u32 L |
// u32 n_samples | L x (u8 len + utf-8 id) | n_samples x (u16 lang + d x f32).

struct EmbeddingDump {
    Index d = 0;
    std::vector<std::string> languages;
    std::vector<std::pair<std::uint16_t, Vecf>> samples;
    std::string source_tag; // provenance only, not serialized
};

void write_embedding_dump(const EmbeddingDump& dump, const std::string& path);
EmbeddingDump read_embedding_dump(const std::string& path);

// CSV alternative with header lang,v0,...,v{d-1}.
EmbeddingDump read_embedding_csv(const std::string& path);

// Group dump samples per language for probing.
std::pair<RepSampleSet<double>, LanguageSet>
dump_to_samples(const EmbeddingDump& dump, Index central_index);

} // namespace lens

#endif
