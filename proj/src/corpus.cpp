// SPDX-License-Identifier: Apache-2.0
#include "lens/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "lens/error.hpp"

namespace lens {

void ToyLanguageSpec::validate() const {
    if (num_languages < 2)
        throw std::invalid_argument("ToyLanguageSpec: need at least 2 languages");
    if (semantic_vocab < 2)
        throw std::invalid_argument("ToyLanguageSpec: semantic vocabulary too small");
    if (min_len < 1 || max_len < min_len)
        throw std::invalid_argument("ToyLanguageSpec: bad length bounds");
    if (max_len > ctx - 2)
        throw std::invalid_argument("ToyLanguageSpec: max_len must fit in ctx with BOS/EOS");
    if (branching < 1 || branching > semantic_vocab)
        throw std::invalid_argument("ToyLanguageSpec: branching out of range");
}

int ToyLanguageSpec::language_of(std::int32_t token) const {
    if (token < 0 || token >= vocab_size())
        throw std::invalid_argument("language_of: token id out of vocabulary");
    if (token < num_specials) return -1;
    return (token - num_specials) / semantic_vocab;
}

std::vector<std::string> ToyLanguageSpec::language_ids() const {
    std::vector<std::string> ids;
    ids.reserve(static_cast<std::size_t>(num_languages));
    for (int l = 0; l < num_languages; ++l) ids.push_back("l" + std::to_string(l));
    return ids;
}

MarkovChain build_chain(const ToyLanguageSpec& spec) {
    spec.validate();
    const int s = spec.semantic_vocab;
    Rng rng = Rng::seeded(spec.chain_seed);
    MarkovChain chain;
    chain.transition = Matd::Zero(s, s);
    chain.initial = Vecd::Zero(s);

    // Each state transitions to `branching` distinct successors with
    // geometrically decaying weights, keeping conditional entropy well below
    // the uniform baseline so next-token prediction is learnable.
    std::vector<int> perm(static_cast<std::size_t>(s));
    for (int i = 0; i < s; ++i) {
        std::iota(perm.begin(), perm.end(), 0);
        for (int k = s - 1; k > 0; --k)
            std::swap(perm[static_cast<std::size_t>(k)],
                      perm[rng.uniform_below(static_cast<std::uint64_t>(k + 1))]);
        double w = 1.0;
        double total = 0.0;
        for (int b = 0; b < spec.branching; ++b) {
            const double jitter = 0.75 + 0.5 * rng.uniform();
            chain.transition(i, perm[static_cast<std::size_t>(b)]) = w * jitter;
            total += w * jitter;
            w *= 0.5;
        }
        chain.transition.row(i) /= total;
    }

    for (int i = 0; i < s; ++i) chain.initial(i) = 0.2 + rng.uniform();
    chain.initial /= chain.initial.sum();
    return chain;
}

namespace {

int sample_categorical(const Vecd& probs, Rng& rng) {
    double u = rng.uniform();
    double acc = 0.0;
    for (Index i = 0; i < probs.size(); ++i) {
        acc += probs(i);
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size() - 1);
}

SemanticSentence draw_sentence(const MarkovChain& chain, const ToyLanguageSpec& spec,
                               Rng& rng) {
    const int len = static_cast<int>(rng.uniform_int(spec.min_len, spec.max_len));
    SemanticSentence s;
    s.reserve(static_cast<std::size_t>(len));
    int state = sample_categorical(chain.initial, rng);
    s.push_back(state);
    for (int t = 1; t < len; ++t) {
        state = sample_categorical(chain.transition.row(state).transpose(), rng);
        s.push_back(state);
    }
    return s;
}

} // namespace

std::vector<SemanticSentence> gen_semantic(std::uint64_t seed, std::size_t count,
                                           const ToyLanguageSpec& spec) {
    spec.validate();
    const MarkovChain chain = build_chain(spec);
    Rng rng = Rng::seeded(seed);
    std::vector<SemanticSentence> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(draw_sentence(chain, spec, rng));
    return out;
}

TokenSeq render(const SemanticSentence& sentence, int lang, const ToyLanguageSpec& spec) {
    if (lang < 0 || lang >= spec.num_languages)
        throw std::invalid_argument("render: language index out of range");
    TokenSeq out;
    out.reserve(sentence.size() + 2);
    out.push_back(ToyLanguageSpec::BOS);
    const std::int32_t off = spec.block_start(lang);
    for (std::int32_t id : sentence) {
        if (id < 0 || id >= spec.semantic_vocab)
            throw std::invalid_argument("render: semantic id out of range");
        out.push_back(id + off);
    }
    out.push_back(ToyLanguageSpec::EOS);
    return out;
}

std::pair<int, SemanticSentence> derender(const TokenSeq& tokens,
                                          const ToyLanguageSpec& spec) {
    SemanticSentence sem;
    int lang = -1;
    for (std::int32_t t : tokens) {
        if (spec.is_special(t)) continue;
        const int l = spec.language_of(t);
        if (lang < 0) lang = l;
        if (l != lang)
            throw std::invalid_argument("derender: tokens mix vocabulary blocks");
        sem.push_back(t - spec.block_start(l));
    }
    if (lang < 0) throw std::invalid_argument("derender: no non-special tokens");
    return {lang, sem};
}

std::vector<std::vector<TokenSeq>> build_probing_set(std::uint64_t seed,
                                                     const ToyLanguageSpec& spec,
                                                     std::size_t n_per_lang) {
    spec.validate();
    std::vector<std::vector<TokenSeq>> out(static_cast<std::size_t>(spec.num_languages));
    for (int l = 0; l < spec.num_languages; ++l) {
        const auto sentences =
            gen_semantic(mix_seed(seed, 0x9000 + static_cast<std::uint64_t>(l)),
                         n_per_lang, spec);
        auto& dst = out[static_cast<std::size_t>(l)];
        dst.reserve(n_per_lang);
        for (const auto& s : sentences) dst.push_back(render(s, l, spec));
    }
    return out;
}

std::vector<ParallelPair> build_manipulation_set(std::uint64_t seed,
                                                 const ToyLanguageSpec& spec, int central,
                                                 std::size_t n_per_lang) {
    spec.validate();
    if (central < 0 || central >= spec.num_languages)
        throw std::invalid_argument("build_manipulation_set: central index out of range");
    std::vector<ParallelPair> out;
    for (int l = 0; l < spec.num_languages; ++l) {
        if (l == central) continue;
        const auto sentences =
            gen_semantic(mix_seed(seed, 0xa000 + static_cast<std::uint64_t>(l)),
                         n_per_lang, spec);
        for (const auto& s : sentences) {
            ParallelPair p;
            p.semantic = s;
            p.lang_a = l;
            p.lang_b = central;
            p.tokens_a = render(s, l, spec);
            p.tokens_b = render(s, central, spec);
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::vector<PretrainSequence> build_pretrain_set(std::uint64_t seed,
                                                 const ToyLanguageSpec& spec,
                                                 const std::vector<double>& mixture,
                                                 std::size_t count, int central,
                                                 double central_leak) {
    spec.validate();
    if (static_cast<int>(mixture.size()) != spec.num_languages)
        throw std::invalid_argument("build_pretrain_set: one mixture weight per language");
    if (central < 0 || central >= spec.num_languages)
        throw std::invalid_argument("build_pretrain_set: central index out of range");
    if (central_leak < 0.0 || central_leak > 1.0)
        throw std::invalid_argument("build_pretrain_set: central_leak must be in [0, 1]");
    const double total = std::accumulate(mixture.begin(), mixture.end(), 0.0);
    if (total <= 0.0)
        throw std::invalid_argument("build_pretrain_set: mixture weights must sum > 0");
    Vecd probs(spec.num_languages);
    for (int l = 0; l < spec.num_languages; ++l)
        probs(l) = mixture[static_cast<std::size_t>(l)] / total;

    const MarkovChain chain = build_chain(spec);
    Rng lang_rng = Rng::seeded(mix_seed(seed, 0xb000));
    Rng text_rng = Rng::seeded(mix_seed(seed, 0xb001));
    Rng leak_rng = Rng::seeded(mix_seed(seed, 0xb002));
    std::vector<PretrainSequence> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        PretrainSequence seq;
        seq.lang = sample_categorical(probs, lang_rng);
        seq.tokens = render(draw_sentence(chain, spec, text_rng), seq.lang, spec);
        if (seq.lang != central && central_leak > 0.0) {
            const std::int32_t shift = spec.block_start(central) - spec.block_start(seq.lang);
            for (auto& tok : seq.tokens)
                if (!spec.is_special(tok) && leak_rng.uniform() < central_leak) tok += shift;
        }
        out.push_back(std::move(seq));
    }
    return out;
}

// --- embedding dump I/O -------------------------------------------------------

namespace {

constexpr char kDumpMagic[8] = {'L', 'E', 'N', 'S', 'E', 'M', 'B', '1'};

template <class T>
void put(std::ostream& out, T v) {
    // Little-endian hosts only; asserted at build configuration time.
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, std::size_t& offset, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(T)))
        throw io_error("embedding dump truncated at byte offset " + std::to_string(offset) +
                       ": " + path);
    offset += sizeof(T);
    return v;
}

} // namespace

void write_embedding_dump(const EmbeddingDump& dump, const std::string& path) {
    if (dump.languages.empty())
        throw std::invalid_argument("write_embedding_dump: empty language table");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    out.write(kDumpMagic, sizeof(kDumpMagic));
    put<std::uint32_t>(out, 1);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(dump.d));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(dump.languages.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(dump.samples.size()));
    for (const auto& id : dump.languages) {
        if (id.size() > 255)
            throw std::invalid_argument("write_embedding_dump: language id longer than 255 bytes");
        put<std::uint8_t>(out, static_cast<std::uint8_t>(id.size()));
        out.write(id.data(), static_cast<std::streamsize>(id.size()));
    }
    for (const auto& [lang, vec] : dump.samples) {
        if (lang >= dump.languages.size())
            throw std::invalid_argument("write_embedding_dump: sample language index out of range");
        if (vec.size() != dump.d)
            throw std::invalid_argument("write_embedding_dump: sample dimension mismatch");
        if (!vec.allFinite())
            throw std::invalid_argument("write_embedding_dump: non-finite sample");
        put<std::uint16_t>(out, lang);
        out.write(reinterpret_cast<const char*>(vec.data()),
                  static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(vec.size())));
    }
    if (!out) throw io_error("write failed: " + path);
}

EmbeddingDump read_embedding_dump(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    std::size_t offset = 0;

    char magic[8];
    in.read(magic, sizeof(magic));
    if (in.gcount() != sizeof(magic) || std::memcmp(magic, kDumpMagic, sizeof(magic)) != 0)
        throw io_error("bad magic at byte offset 0: " + path);
    offset += sizeof(magic);

    const auto version = get<std::uint32_t>(in, offset, path);
    if (version != 1)
        throw io_error("unsupported embedding dump version " + std::to_string(version) +
                       " at byte offset 8: " + path);
    EmbeddingDump dump;
    dump.d = static_cast<Index>(get<std::uint32_t>(in, offset, path));
    const auto n_langs = get<std::uint32_t>(in, offset, path);
    const auto n_samples = get<std::uint32_t>(in, offset, path);
    for (std::uint32_t l = 0; l < n_langs; ++l) {
        const auto len = get<std::uint8_t>(in, offset, path);
        std::string id(len, '\0');
        in.read(id.data(), len);
        if (in.gcount() != static_cast<std::streamsize>(len))
            throw io_error("embedding dump truncated at byte offset " +
                           std::to_string(offset) + ": " + path);
        offset += len;
        dump.languages.push_back(std::move(id));
    }
    dump.samples.reserve(n_samples);
    for (std::uint32_t i = 0; i < n_samples; ++i) {
        const auto lang = get<std::uint16_t>(in, offset, path);
        if (lang >= n_langs)
            throw io_error("sample language index out of range at byte offset " +
                           std::to_string(offset - 2) + ": " + path);
        Vecf vec(dump.d);
        in.read(reinterpret_cast<char*>(vec.data()),
                static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(dump.d)));
        if (in.gcount() !=
            static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(dump.d)))
            throw io_error("embedding dump truncated at byte offset " +
                           std::to_string(offset) + ": " + path);
        if (!vec.allFinite())
            throw io_error("non-finite embedding value at byte offset " +
                           std::to_string(offset) + ": " + path);
        offset += sizeof(float) * static_cast<std::size_t>(dump.d);
        dump.samples.emplace_back(lang, std::move(vec));
    }
    char extra;
    if (in.read(&extra, 1))
        throw io_error("trailing bytes at byte offset " + std::to_string(offset) + ": " + path);
    dump.source_tag = path;
    return dump;
}

EmbeddingDump read_embedding_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw io_error("empty csv: " + path);
    if (line.rfind("lang,", 0) != 0)
        throw io_error("csv header must start with 'lang,': " + path);
    Index d = 0;
    for (char c : line)
        if (c == ',') ++d;

    EmbeddingDump dump;
    dump.d = d;
    std::map<std::string, std::uint16_t> lang_index;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        if (!std::getline(ss, cell, ','))
            throw io_error("csv parse failure at line " + std::to_string(line_no));
        auto [it, inserted] =
            lang_index.try_emplace(cell, static_cast<std::uint16_t>(dump.languages.size()));
        if (inserted) dump.languages.push_back(cell);
        Vecf vec(d);
        for (Index i = 0; i < d; ++i) {
            if (!std::getline(ss, cell, ','))
                throw io_error("csv row too short at line " + std::to_string(line_no));
            try {
                vec(i) = std::stof(cell);
            } catch (const std::exception&) {
                throw io_error("csv numeric parse failure at line " + std::to_string(line_no));
            }
        }
        if (!vec.allFinite())
            throw io_error("non-finite embedding value at line " + std::to_string(line_no));
        dump.samples.emplace_back(it->second, std::move(vec));
    }
    dump.source_tag = path;
    return dump;
}

std::pair<RepSampleSet<double>, LanguageSet> dump_to_samples(const EmbeddingDump& dump,
                                                             Index central_index) {
    LanguageSet langs;
    langs.languages = dump.languages;
    langs.central_index = central_index;
    langs.validate();
    RepSampleSet<double> set;
    set.samples.resize(dump.languages.size());
    for (const auto& [lang, vec] : dump.samples)
        set.samples[lang].push_back(vec.cast<double>());
    for (std::size_t l = 0; l < set.samples.size(); ++l)
        if (set.samples[l].empty())
            throw std::invalid_argument("dump has no samples for language '" +
                                        dump.languages[l] + "'");
    return {std::move(set), std::move(langs)};
}

} // namespace lens
