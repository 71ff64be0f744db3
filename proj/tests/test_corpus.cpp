// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "lens/corpus.hpp"
#include "lens/error.hpp"
#include "lens/hash.hpp"

using namespace lens;

namespace {

ToyLanguageSpec small_spec() {
    ToyLanguageSpec spec;
    spec.num_languages = 3;
    spec.semantic_vocab = 8;
    spec.branching = 3;
    spec.ctx = 32;
    spec.min_len = 4;
    spec.max_len = 24;
    spec.chain_seed = 99;
    return spec;
}

std::string temp_path(const std::string& stem) {
    return std::string("/tmp/lens_test_") + stem;
}

} // namespace

TEST_CASE("gen_semantic is deterministic per seed and honors count") {
    const ToyLanguageSpec spec = small_spec();
    const auto a = gen_semantic(7, 50, spec);
    const auto b = gen_semantic(7, 50, spec);
    CHECK(a == b);
    CHECK(gen_semantic(7, 0, spec).empty());
    const auto c = gen_semantic(8, 50, spec);
    CHECK(a != c);
    for (const auto& s : a) {
        CHECK(s.size() >= static_cast<std::size_t>(spec.min_len));
        CHECK(s.size() <= static_cast<std::size_t>(spec.max_len));
        for (auto id : s) {
            CHECK(id >= 0);
            CHECK(id < spec.semantic_vocab);
        }
    }
}

TEST_CASE("sampled bigrams match the chain within total variation 0.05") {
    const ToyLanguageSpec spec = small_spec();
    const auto sentences = gen_semantic(7, 1000, spec);
    const MarkovChain chain = build_chain(spec);

    // independent counting of observed transitions
    Matd counts = Matd::Zero(spec.semantic_vocab, spec.semantic_vocab);
    for (const auto& s : sentences)
        for (std::size_t i = 0; i + 1 < s.size(); ++i)
            counts(s[i], s[i + 1]) += 1.0;

    double total = counts.sum();
    REQUIRE(total > 0);
    double tv = 0.0;
    for (Index i = 0; i < spec.semantic_vocab; ++i) {
        const double row_n = counts.row(i).sum();
        if (row_n == 0) continue;
        double row_tv = 0.0;
        for (Index j = 0; j < spec.semantic_vocab; ++j)
            row_tv += std::abs(counts(i, j) / row_n - chain.transition(i, j));
        tv += (row_n / total) * 0.5 * row_tv;
    }
    CHECK(tv <= 0.05);
}

TEST_CASE("render applies the block offset and brackets with BOS/EOS") {
    ToyLanguageSpec spec = small_spec();
    spec.semantic_vocab = 10;
    const SemanticSentence s{0, 1};

    const TokenSeq r0 = render(s, 0, spec);
    CHECK(r0 == TokenSeq{ToyLanguageSpec::BOS, 3, 4, ToyLanguageSpec::EOS});
    const TokenSeq r1 = render(s, 1, spec);
    CHECK(r1 == TokenSeq{ToyLanguageSpec::BOS, 13, 14, ToyLanguageSpec::EOS});

    CHECK_THROWS_AS((void)render({11}, 0, spec), std::invalid_argument);
    CHECK_THROWS_AS((void)render(s, 5, spec), std::invalid_argument);
}

TEST_CASE("render then derender is the identity on 1000 seeded sentences") {
    const ToyLanguageSpec spec = small_spec();
    const auto sentences = gen_semantic(123, 1000, spec);
    int lang = 0;
    for (const auto& s : sentences) {
        const auto [l, back] = derender(render(s, lang, spec), spec);
        CHECK(l == lang);
        CHECK(back == s);
        lang = (lang + 1) % spec.num_languages;
    }
}

TEST_CASE("language_of partitions the non-special id space") {
    const ToyLanguageSpec spec = small_spec();
    std::vector<int> counts(static_cast<std::size_t>(spec.num_languages), 0);
    for (std::int32_t t = 0; t < spec.vocab_size(); ++t) {
        const int l = spec.language_of(t);
        if (t < ToyLanguageSpec::num_specials) {
            CHECK(l == -1);
        } else {
            CHECK(l >= 0);
            CHECK(l < spec.num_languages);
            ++counts[static_cast<std::size_t>(l)];
        }
    }
    for (int c : counts) CHECK(c == spec.semantic_vocab);
    CHECK_THROWS_AS((void)spec.language_of(spec.vocab_size()), std::invalid_argument);
    CHECK_THROWS_AS((void)spec.language_of(-1), std::invalid_argument);
}

TEST_CASE("build_probing_set yields the configured counts and is deterministic") {
    const ToyLanguageSpec spec = small_spec();
    const auto def = build_probing_set(1, spec);
    REQUIRE(def.size() == 3);
    for (const auto& lang : def) CHECK(lang.size() == 300);

    const auto one = build_probing_set(1, spec, 1);
    for (const auto& lang : one) CHECK(lang.size() == 1);

    const auto again = build_probing_set(1, spec);
    CHECK(def == again);
}

TEST_CASE("probing languages draw independent sentences (hash disjointness)") {
    ToyLanguageSpec spec = small_spec();
    spec.semantic_vocab = 64;
    spec.branching = 6;
    spec.min_len = 8; // collisions vanish for longer sentences
    const auto sets = build_probing_set(3, spec, 300);
    std::vector<std::set<std::uint64_t>> hashes(sets.size());
    for (std::size_t l = 0; l < sets.size(); ++l)
        for (const auto& seq : sets[l]) {
            const auto [lang, sem] = derender(seq, spec);
            (void)lang;
            hashes[l].insert(fnv1a64(sem.data(), sem.size() * sizeof(sem[0])));
        }
    int shared = 0;
    for (std::size_t a = 0; a < sets.size(); ++a)
        for (std::size_t b = a + 1; b < sets.size(); ++b)
            for (auto h : hashes[a])
                if (hashes[b].count(h)) ++shared;
    CHECK(shared <= 3); // pairwise-disjoint with overwhelming probability
}

TEST_CASE("build_manipulation_set yields parallel pairs with shared semantics") {
    const ToyLanguageSpec spec = small_spec();
    const auto pairs = build_manipulation_set(11, spec, 0);
    CHECK(pairs.size() == 2 * 200); // two targets, default 200 each

    const auto single = build_manipulation_set(11, spec, 0, 1);
    CHECK(single.size() == 2);

    for (const auto& p : pairs) {
        CHECK(p.lang_b == 0);
        CHECK(p.lang_a != 0);
        const auto [la, sa] = derender(p.tokens_a, spec);
        const auto [lb, sb] = derender(p.tokens_b, spec);
        CHECK(la == p.lang_a);
        CHECK(lb == p.lang_b);
        CHECK(sa == sb);
        CHECK(sa == p.semantic);
    }
    CHECK_THROWS_AS((void)build_manipulation_set(11, spec, 9), std::invalid_argument);
}

TEST_CASE("build_pretrain_set follows the mixture and is deterministic") {
    const ToyLanguageSpec spec = small_spec();
    const std::vector<double> mixture{0.9, 0.05, 0.05};
    const auto seqs = build_pretrain_set(21, spec, mixture, 4000);
    CHECK(seqs.size() == 4000);
    std::vector<int> counts(3, 0);
    for (const auto& s : seqs) ++counts[static_cast<std::size_t>(s.lang)];
    CHECK(static_cast<double>(counts[0]) / 4000.0 == doctest::Approx(0.9).epsilon(0.05));
    CHECK(counts[1] > 0);
    CHECK(counts[2] > 0);
    CHECK(build_pretrain_set(21, spec, mixture, 4000) == [&] {
        return build_pretrain_set(21, spec, mixture, 4000);
    }());
    CHECK_THROWS_AS((void)build_pretrain_set(21, spec, {1.0}, 10), std::invalid_argument);
}

// --- embedding dumps ----------------------------------------------------------

TEST_CASE("embedding dump with no samples round-trips as a header-only file") {
    EmbeddingDump dump;
    dump.d = 4;
    dump.languages = {"en", "zh"};
    const std::string path = temp_path("empty.lensemb");
    write_embedding_dump(dump, path);
    const auto back = read_embedding_dump(path);
    CHECK(back.d == 4);
    CHECK(back.languages == dump.languages);
    CHECK(back.samples.empty());
    std::remove(path.c_str());
}

TEST_CASE("embedding dump file size follows the layout arithmetic") {
    EmbeddingDump dump;
    dump.d = 4;
    dump.languages = {"en"};
    Vecf v(4);
    v << 1.f, 2.f, 3.f, 4.f;
    dump.samples.emplace_back(0, v);
    const std::string path = temp_path("size.lensemb");
    write_embedding_dump(dump, path);
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    // header 8+4+4+4+4, language table 1+2, sample 2 + 16
    CHECK(static_cast<long>(in.tellg()) == 24 + 3 + 2 + 16);
    std::remove(path.c_str());
}

TEST_CASE("a seeded 100-sample dump is byte-identical after a round trip") {
    Rng rng = Rng::seeded(88);
    EmbeddingDump dump;
    dump.d = 6;
    dump.languages = {"l0", "l1", "l2"};
    for (int i = 0; i < 100; ++i) {
        Vecf v(6);
        for (Index j = 0; j < 6; ++j) v(j) = static_cast<float>(rng.normal());
        dump.samples.emplace_back(static_cast<std::uint16_t>(rng.uniform_below(3)), v);
    }
    const std::string p1 = temp_path("rt1.lensemb");
    const std::string p2 = temp_path("rt2.lensemb");
    write_embedding_dump(dump, p1);
    write_embedding_dump(read_embedding_dump(p1), p2);
    CHECK(hash_file_hex(p1) == hash_file_hex(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("embedding dump reader rejects malformed files with byte offsets") {
    const std::string path = temp_path("bad.lensemb");

    SUBCASE("bad magic") {
        std::ofstream out(path, std::ios::binary);
        out << "NOTMAGIC" << std::string(16, '\0');
        out.close();
        CHECK_THROWS_WITH_AS((void)read_embedding_dump(path),
                             doctest::Contains("bad magic at byte offset 0"), io_error);
    }
    SUBCASE("truncated payload") {
        EmbeddingDump dump;
        dump.d = 4;
        dump.languages = {"en"};
        Vecf v = Vecf::Ones(4);
        dump.samples.emplace_back(0, v);
        write_embedding_dump(dump, path);
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        in.close();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
        out.close();
        CHECK_THROWS_WITH_AS((void)read_embedding_dump(path), doctest::Contains("truncated"),
                             io_error);
    }
    SUBCASE("non-finite value") {
        EmbeddingDump dump;
        dump.d = 2;
        dump.languages = {"en"};
        Vecf v(2);
        v << 1.f, 2.f;
        dump.samples.emplace_back(0, v);
        write_embedding_dump(dump, path);
        // overwrite the first float of the sample payload with NaN
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(24 + 3 + 2);
        const float nan_v = std::numeric_limits<float>::quiet_NaN();
        f.write(reinterpret_cast<const char*>(&nan_v), sizeof(nan_v));
        f.close();
        CHECK_THROWS_WITH_AS((void)read_embedding_dump(path),
                             doctest::Contains("non-finite"), io_error);
    }
    std::remove(path.c_str());
}

TEST_CASE("csv embedding ingestion matches the binary reader's view") {
    const std::string path = temp_path("dump.csv");
    {
        std::ofstream out(path);
        out << "lang,v0,v1,v2\n";
        out << "en,1.5,0,-2\n";
        out << "zh,0.25,1,3\n";
        out << "en,2,2,2\n";
    }
    const auto dump = read_embedding_csv(path);
    CHECK(dump.d == 3);
    CHECK(dump.languages == std::vector<std::string>{"en", "zh"});
    REQUIRE(dump.samples.size() == 3);
    CHECK(dump.samples[0].first == 0);
    CHECK(dump.samples[1].first == 1);
    CHECK(dump.samples[2].first == 0);
    CHECK(dump.samples[1].second(2) == doctest::Approx(3.0f));

    const auto [samples, langs] = dump_to_samples(dump, 0);
    CHECK(langs.central_index == 0);
    CHECK(samples.samples[0].size() == 2);
    CHECK(samples.samples[1].size() == 1);
    std::remove(path.c_str());
}

TEST_CASE("csv reader rejects a bad header") {
    const std::string path = temp_path("bad.csv");
    {
        std::ofstream out(path);
        out << "language,v0\nen,1\n";
    }
    CHECK_THROWS_AS((void)read_embedding_csv(path), io_error);
    std::remove(path.c_str());
}
