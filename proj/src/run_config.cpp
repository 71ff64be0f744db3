// SPDX-License-Identifier: Apache-2.0
#include "lens/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "lens/error.hpp"

namespace lens {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const std::string& section) {
    if (!j.is_object())
        throw std::invalid_argument("config section '" + section + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!known.count(key))
            throw std::invalid_argument("unknown key '" + key + "' in config section '" +
                                        section + "'");
    }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

} // namespace

LanguageSet RunConfig::language_set() const {
    LanguageSet ls;
    ls.languages = corpus.language_ids();
    ls.central_index = central;
    return ls;
}

TrainConfig RunConfig::pretrain_config() const {
    TrainConfig cfg = lens_train;
    cfg.phase = "pretrain";
    cfg.lr = pretrain_lr;
    cfg.steps = pretrain_steps;
    return cfg;
}

nlohmann::json RunConfig::resolved_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["corpus"] = {{"num_languages", corpus.num_languages},
                   {"semantic_vocab", corpus.semantic_vocab},
                   {"ctx", corpus.ctx},
                   {"min_len", corpus.min_len},
                   {"max_len", corpus.max_len},
                   {"branching", corpus.branching},
                   {"chain_seed", corpus.chain_seed},
                   {"central", central},
                   {"mixture", mixture},
                   {"probing_per_lang", probing_per_lang},
                   {"manipulation_per_lang", manipulation_per_lang},
                   {"pretrain_sequences", pretrain_sequences},
                   {"central_leak", central_leak}};
    j["model"] = {{"d_model", model.d_model},
                  {"n_layers", model.n_layers},
                  {"n_heads", model.n_heads},
                  {"d_ff", model.d_ff},
                  {"init_std", model.init_std}};
    j["train"] = {{"pretrain_lr", pretrain_lr},
                  {"pretrain_steps", pretrain_steps},
                  {"lens_lr", lens_train.lr},
                  {"batch_size", lens_train.batch_size},
                  {"epochs", lens_train.epochs},
                  {"warmup_ratio", lens_train.warmup_ratio},
                  {"schedule", lens_train.schedule},
                  {"adam_beta1", lens_train.adam_beta1},
                  {"adam_beta2", lens_train.adam_beta2},
                  {"adam_eps", lens_train.adam_eps}};
    j["lens"] = {{"lambda1", lens_train.weights.lambda1},
                 {"lambda3", lens_train.weights.lambda3},
                 {"lambda_l", lens_train.weights.lambda_l},
                 {"start_layer", lens_train.weights.manipulated_layers.first},
                 {"rank", lens_train.rank},
                 {"mean_scale",
                  lens_train.mean_scale == MeanScale::PerLanguage ? "1/L" : "1/d"}};
    j["eval"] = {{"prompt_len", eval.prompt_len},
                 {"max_new", eval.max_new},
                 {"fidelity_prompts", eval.fidelity_prompts},
                 {"retrieval_pairs", eval.retrieval_pairs},
                 {"drift_sentences", eval.drift_sentences},
                 {"pca_samples", eval.pca_samples}};
    return j;
}

RunConfig parse_run_config(const nlohmann::json& j) {
    RunConfig cfg;
    reject_unknown(j, {"seed", "corpus", "model", "train", "lens", "eval"}, "<root>");

    read(j, "seed", cfg.seed);

    if (j.contains("corpus")) {
        const auto& c = j.at("corpus");
        reject_unknown(c,
                       {"num_languages", "semantic_vocab", "ctx", "min_len", "max_len",
                        "branching", "chain_seed", "central", "mixture",
                        "probing_per_lang", "manipulation_per_lang",
                        "pretrain_sequences", "central_leak"},
                       "corpus");
        read(c, "num_languages", cfg.corpus.num_languages);
        read(c, "semantic_vocab", cfg.corpus.semantic_vocab);
        read(c, "ctx", cfg.corpus.ctx);
        read(c, "min_len", cfg.corpus.min_len);
        read(c, "max_len", cfg.corpus.max_len);
        read(c, "branching", cfg.corpus.branching);
        read(c, "chain_seed", cfg.corpus.chain_seed);
        read(c, "central", cfg.central);
        read(c, "mixture", cfg.mixture);
        read(c, "probing_per_lang", cfg.probing_per_lang);
        read(c, "manipulation_per_lang", cfg.manipulation_per_lang);
        read(c, "pretrain_sequences", cfg.pretrain_sequences);
        read(c, "central_leak", cfg.central_leak);
    }
    cfg.corpus.validate();
    if (cfg.central < 0 || cfg.central >= cfg.corpus.num_languages)
        throw std::invalid_argument("config: corpus.central out of range");
    if (cfg.mixture.empty()) {
        // English-centric premise: the central language dominates pretraining
        cfg.mixture.assign(static_cast<std::size_t>(cfg.corpus.num_languages),
                           0.10 / std::max(1, cfg.corpus.num_languages - 1));
        cfg.mixture[static_cast<std::size_t>(cfg.central)] = 0.90;
    }
    if (static_cast<int>(cfg.mixture.size()) != cfg.corpus.num_languages)
        throw std::invalid_argument("config: corpus.mixture needs one weight per language");
    if (cfg.probing_per_lang < 1 || cfg.manipulation_per_lang < 1)
        throw std::invalid_argument("config: per-language sample counts must be >= 1");
    if (cfg.pretrain_sequences < 1)
        throw std::invalid_argument("config: corpus.pretrain_sequences must be >= 1");
    if (cfg.central_leak < 0.0 || cfg.central_leak > 1.0)
        throw std::invalid_argument("config: corpus.central_leak must be in [0, 1]");

    if (j.contains("model")) {
        const auto& m = j.at("model");
        reject_unknown(m, {"d_model", "n_layers", "n_heads", "d_ff", "init_std"}, "model");
        read(m, "d_model", cfg.model.d_model);
        read(m, "n_layers", cfg.model.n_layers);
        read(m, "n_heads", cfg.model.n_heads);
        read(m, "d_ff", cfg.model.d_ff);
        read(m, "init_std", cfg.model.init_std);
    }
    cfg.model.vocab = cfg.corpus.vocab_size();
    cfg.model.ctx = cfg.corpus.ctx;
    cfg.model.seed = cfg.seed;
    cfg.model.validate();

    cfg.lens_train.phase = "lens";
    cfg.lens_train.seed = cfg.seed;
    if (j.contains("train")) {
        const auto& t = j.at("train");
        reject_unknown(t,
                       {"pretrain_lr", "pretrain_steps", "lens_lr", "batch_size", "epochs",
                        "warmup_ratio", "schedule", "adam_beta1", "adam_beta2", "adam_eps"},
                       "train");
        read(t, "pretrain_lr", cfg.pretrain_lr);
        read(t, "pretrain_steps", cfg.pretrain_steps);
        read(t, "lens_lr", cfg.lens_train.lr);
        read(t, "batch_size", cfg.lens_train.batch_size);
        read(t, "epochs", cfg.lens_train.epochs);
        read(t, "warmup_ratio", cfg.lens_train.warmup_ratio);
        read(t, "schedule", cfg.lens_train.schedule);
        read(t, "adam_beta1", cfg.lens_train.adam_beta1);
        read(t, "adam_beta2", cfg.lens_train.adam_beta2);
        read(t, "adam_eps", cfg.lens_train.adam_eps);
    }

    // lens section: defaults anchored to the published settings
    int start_layer = std::max(0, cfg.model.n_layers - 2); // top 2 layers
    cfg.lens_train.weights.lambda1 = 1.0;
    cfg.lens_train.weights.lambda3 = 1.0;
    bool lambda_l_given = false;
    if (j.contains("lens")) {
        const auto& l = j.at("lens");
        reject_unknown(l, {"lambda1", "lambda3", "lambda_l", "start_layer", "rank",
                           "mean_scale"},
                       "lens");
        read(l, "lambda1", cfg.lens_train.weights.lambda1);
        read(l, "lambda3", cfg.lens_train.weights.lambda3);
        if (l.contains("lambda_l")) {
            lambda_l_given = true;
            cfg.lens_train.weights.lambda_l =
                l.at("lambda_l").get<std::map<std::string, double>>();
        }
        read(l, "start_layer", start_layer);
        std::int64_t rank = cfg.lens_train.rank;
        read(l, "rank", rank);
        cfg.lens_train.rank = static_cast<Index>(rank);
        if (l.contains("mean_scale")) {
            const auto scale = l.at("mean_scale").get<std::string>();
            if (scale == "1/L")
                cfg.lens_train.mean_scale = MeanScale::PerLanguage;
            else if (scale == "1/d")
                cfg.lens_train.mean_scale = MeanScale::PerDim;
            else
                throw std::invalid_argument("config: lens.mean_scale must be '1/L' or '1/d'");
        }
    }
    if (!lambda_l_given) {
        for (int l = 0; l < cfg.corpus.num_languages; ++l)
            if (l != cfg.central)
                cfg.lens_train.weights.lambda_l["l" + std::to_string(l)] = 1.0;
    }
    if (start_layer < 0 || start_layer >= cfg.model.n_layers)
        throw std::invalid_argument("config: lens.start_layer out of range");
    cfg.lens_train.weights.manipulated_layers = {start_layer, cfg.model.n_layers - 1};
    cfg.lens_train.trainable_from = start_layer;
    if (cfg.lens_train.rank < 0 || cfg.lens_train.rank > cfg.corpus.num_languages - 1)
        throw std::invalid_argument("config: lens.rank must be in [0, L-1] (0 = default L-1)");

    cfg.eval.seed = cfg.seed;
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        reject_unknown(e,
                       {"prompt_len", "max_new", "fidelity_prompts", "retrieval_pairs",
                        "drift_sentences", "pca_samples"},
                       "eval");
        read(e, "prompt_len", cfg.eval.prompt_len);
        read(e, "max_new", cfg.eval.max_new);
        read(e, "fidelity_prompts", cfg.eval.fidelity_prompts);
        read(e, "retrieval_pairs", cfg.eval.retrieval_pairs);
        read(e, "drift_sentences", cfg.eval.drift_sentences);
        read(e, "pca_samples", cfg.eval.pca_samples);
    }
    cfg.eval.validate();
    cfg.lens_train.validate();

    // LENS_SEED environment override
    if (const char* env = std::getenv("LENS_SEED")) {
        cfg.seed = std::strtoull(env, nullptr, 10);
        cfg.model.seed = cfg.seed;
        cfg.lens_train.seed = cfg.seed;
        cfg.eval.seed = cfg.seed;
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    if (path.empty()) return parse_run_config(nlohmann::json::object());
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config parse failure in " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

} // namespace lens
