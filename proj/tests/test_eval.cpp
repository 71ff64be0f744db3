// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "lens/eval.hpp"

#include "oracles.hpp"

using namespace lens;

namespace {

ToyLanguageSpec tiny_spec() {
    ToyLanguageSpec spec;
    spec.num_languages = 2;
    spec.semantic_vocab = 2; // vocab = 3 + 4 = 7
    spec.ctx = 16;
    spec.min_len = 2;
    spec.max_len = 6;
    spec.branching = 2;
    return spec;
}

// Model whose greedy continuation is always `magnet`, regardless of context:
// every other embedding is tiny, the magnet's embedding is long and aligned
// with its own normalized direction.
ToyTransformer<float> magnet_model(const ToyLanguageSpec& spec, std::int32_t magnet) {
    ModelConfig cfg;
    cfg.vocab = spec.vocab_size();
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.d_ff = 8;
    cfg.ctx = spec.ctx;
    cfg.init_std = 0.0;
    ToyTransformer<float> model(cfg);
    model.set_special_tokens(ToyLanguageSpec::EOS, ToyLanguageSpec::PAD);
    for (Index t = 0; t < cfg.vocab; ++t)
        for (Index i = 0; i < cfg.d_model; ++i)
            model.params(model.layout.tok_emb + t * cfg.d_model + i) =
                0.001f * static_cast<float>((t * 7 + i * 3) % 5 - 2);
    for (Index i = 0; i < cfg.d_model; ++i)
        model.params(model.layout.tok_emb + magnet * cfg.d_model + i) =
            (i % 2 == 0) ? 3.0f : -3.0f;
    return model;
}

SubspaceModel<double> frame(Index d, Rng& rng) {
    const Matd q = oracles::random_orthonormal(d, 2, rng);
    SubspaceModel<double> s;
    s.u_a = q.col(0);
    s.m_a_raw = q.col(0);
    s.m_s = q.rightCols(1);
    s.gamma = Matd::Zero(2, 1);
    s.r = 1;
    return s;
}

} // namespace

TEST_CASE("response-level majority rule on a hand-labeled fixture") {
    const ToyLanguageSpec spec = tiny_spec();
    const std::int32_t b0 = spec.block_start(0);
    const std::int32_t b1 = spec.block_start(1);

    // ten mixed responses, each 3-vs-2 in favor of block 0: the majority rule
    // scores every response in-language (1.0), not the token fraction (0.6)
    int in = 0;
    for (int i = 0; i < 10; ++i) {
        const TokenSeq r{b0, b1, b0, b1, b0, ToyLanguageSpec::EOS};
        if (response_in_language(r, 0, spec)) ++in;
    }
    CHECK(in == 10);

    // order inside the response does not matter
    CHECK(response_in_language({b1, b1, b0, b0, b0}, 0, spec));
    CHECK(response_in_language({b0, b0, b0, b1, b1}, 0, spec));
    // ties and empty responses count out-of-language
    CHECK_FALSE(response_in_language({b0, b1}, 0, spec));
    CHECK_FALSE(response_in_language({ToyLanguageSpec::EOS}, 0, spec));
    CHECK_FALSE(response_in_language({}, 0, spec));
}

TEST_CASE("language_fidelity is 1.0 for an in-block oracle and 0.0 for the wrong block") {
    const ToyLanguageSpec spec = tiny_spec();
    EvalConfig cfg;
    cfg.max_new = 6;

    // magnet in block 1: all responses fall in language 1
    const auto model = magnet_model(spec, spec.block_start(1));
    std::vector<TokenSeq> prompts;
    for (int i = 0; i < 5; ++i)
        prompts.push_back(
            {ToyLanguageSpec::BOS,
             static_cast<std::int32_t>(spec.block_start(1) + (i % 2))});

    const auto fid1 = language_fidelity(model, 1, prompts, spec, cfg);
    CHECK(fid1.fidelity == doctest::Approx(1.0));
    const auto fid0 = language_fidelity(model, 0, prompts, spec, cfg);
    CHECK(fid0.fidelity == doctest::Approx(0.0));
    CHECK(fid0.token_fraction == doctest::Approx(0.0));
}

TEST_CASE("language_fidelity flags empty generations as out-of-language") {
    const ToyLanguageSpec spec = tiny_spec();
    // magnet on EOS: the first generated token ends every response
    const auto model = magnet_model(spec, ToyLanguageSpec::EOS);
    EvalConfig cfg;
    cfg.max_new = 4;
    const std::vector<TokenSeq> prompts{{ToyLanguageSpec::BOS, spec.block_start(0)}};
    const auto fid = language_fidelity(model, 0, prompts, spec, cfg);
    CHECK(fid.fidelity == 0.0);
    CHECK(fid.empty_generations == 1);
}

TEST_CASE("retrieval is perfect for one pair and chance-level for random reps") {
    const ToyLanguageSpec spec = tiny_spec();
    Rng rng = Rng::seeded(7);

    ModelConfig cfg;
    cfg.vocab = spec.vocab_size();
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.ctx = spec.ctx;
    cfg.seed = 11;
    ToyTransformer<float> model(cfg);
    model.set_special_tokens(ToyLanguageSpec::EOS, ToyLanguageSpec::PAD);
    const auto sub = frame(16, rng);

    SUBCASE("single pair") {
        const auto pairs = build_manipulation_set(5, spec, 0, 1);
        const auto r = retrieval_accuracy(model, {pairs[0]}, 1, sub);
        CHECK(r.accuracy == doctest::Approx(1.0));
    }
    SUBCASE("100 random pairs stay near chance") {
        ToyLanguageSpec big = tiny_spec();
        big.semantic_vocab = 16;
        big.min_len = 4;
        big.max_len = 12;
        ModelConfig bcfg = cfg;
        bcfg.vocab = big.vocab_size();
        ToyTransformer<float> bmodel(bcfg);
        bmodel.set_special_tokens(ToyLanguageSpec::EOS, ToyLanguageSpec::PAD);
        std::vector<ParallelPair> pairs = build_manipulation_set(5, big, 0, 100);
        pairs.resize(100); // one target language's pairs
        const auto r = retrieval_accuracy(bmodel, pairs, 1, frame(16, rng));
        CHECK(r.accuracy <= 0.05);
    }
    SUBCASE("identical source/translation reps always retrieve themselves") {
        auto pairs = build_manipulation_set(5, spec, 0, 3);
        pairs.resize(3);
        pairs[0].tokens_b = pairs[0].tokens_a; // identical rendering -> identical reps
        const auto r = retrieval_accuracy(model, pairs, 1, sub);
        // at minimum the identical pair scores; it can never be beaten
        CHECK(r.accuracy >= doctest::Approx(1.0 / 3.0));
    }
}

TEST_CASE("central drift is zero against an identical reference and order-invariant") {
    const ToyLanguageSpec spec = tiny_spec();
    ModelConfig cfg;
    cfg.vocab = spec.vocab_size();
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 1;
    cfg.d_ff = 8;
    cfg.ctx = spec.ctx;
    cfg.seed = 3;
    ToyTransformer<float> model(cfg);
    model.set_special_tokens(ToyLanguageSpec::EOS, ToyLanguageSpec::PAD);
    const ReferenceSnapshot<float> ref(model);

    std::vector<TokenSeq> sentences;
    for (const auto& s : gen_semantic(3, 8, spec)) sentences.push_back(render(s, 0, spec));

    auto drift = central_drift(model, ref, sentences, {0, 1});
    CHECK(drift.at(0) == 0.0);
    CHECK(drift.at(1) == 0.0);

    // perturb and check order invariance
    model.params(model.layout.blocks[1].wq) += 0.05f;
    auto d1 = central_drift(model, ref, sentences, {1});
    std::reverse(sentences.begin(), sentences.end());
    auto d2 = central_drift(model, ref, sentences, {1});
    CHECK(d1.at(1) == doctest::Approx(d2.at(1)).epsilon(1e-9));
    CHECK(d1.at(1) > 0.0);
}

TEST_CASE("pca export collapses identical agnostic projections and counts rows") {
    const ToyLanguageSpec spec = tiny_spec();
    ModelConfig cfg;
    cfg.vocab = spec.vocab_size();
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.d_ff = 8;
    cfg.ctx = spec.ctx;
    cfg.seed = 9;
    ToyTransformer<float> model(cfg);
    model.set_special_tokens(ToyLanguageSpec::EOS, ToyLanguageSpec::PAD);

    LanguageSet langs;
    langs.languages = {"l0", "l1"};
    langs.central_index = 0;

    // identical inputs across languages and samples -> identical reps
    const TokenSeq seq = render({0, 1, 0}, 0, spec);
    std::vector<std::vector<TokenSeq>> inputs{{seq, seq, seq}, {seq, seq, seq}};
    Rng rng = Rng::seeded(1);
    const auto sub = frame(8, rng);

    const auto rows = export_pca(model, inputs, langs, 0, sub, SubspaceKind::Agnostic);
    CHECK(rows.size() == 6);
    for (const auto& r : rows) {
        CHECK(r.pc1 == 0.0);
        CHECK(r.pc2 == 0.0);
        CHECK(r.subspace == "agnostic");
    }

    const std::string path = "/tmp/lens_test_pca.csv";
    write_pca_csv(rows, path);
    std::ifstream in(path);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) ++n;
    CHECK(n == 7); // header + 6 rows
    std::remove(path.c_str());
}

TEST_CASE("eval report JSON round-trips") {
    EvalReport r;
    r.run_id = "t";
    r.seed = 42;
    r.retrieval_accuracy = 0.25;
    r.retrieval_skipped = 1;
    LanguageEval ev;
    ev.fidelity.fidelity = 0.5;
    ev.fidelity.token_fraction = 0.625;
    ev.fidelity.empty_generations = 2;
    ev.next_token_accuracy = 0.375;
    ev.next_token_ce = 1.5;
    r.per_language["l0"] = ev;
    r.central_drift[3] = 0.125;
    r.separation[3] = {0.25, 1.75};

    const auto back = EvalReport::from_json(r.to_json());
    CHECK(back.run_id == r.run_id);
    CHECK(back.seed == r.seed);
    CHECK(back.retrieval_accuracy == r.retrieval_accuracy);
    CHECK(back.per_language.at("l0").fidelity.fidelity == 0.5);
    CHECK(back.per_language.at("l0").next_token_ce == 1.5);
    CHECK(back.central_drift.at(3) == 0.125);
    CHECK(back.separation.at(3).specific == 1.75);
}
