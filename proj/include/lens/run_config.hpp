// SPDX-License-Identifier: Apache-2.0
//
// JSON run configuration: sections corpus, model, train, lens, eval. Every
// field is optional with defaults; unknown keys are rejected before any work
// starts. LENS_SEED in the environment overrides the config seed.
#ifndef LENS_RUN_CONFIG_HPP
#define LENS_RUN_CONFIG_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lens/corpus.hpp"
#include "lens/eval.hpp"
#include "lens/model.hpp"
#include "lens/trainer.hpp"

namespace lens {

struct RunConfig {
    std::uint64_t seed = 1;

    ToyLanguageSpec corpus;
    int central = 0;
    std::vector<double> mixture;        // defaults to 90:5:5-style central weighting
    int probing_per_lang = 300;
    int manipulation_per_lang = 200;
    int pretrain_sequences = 10000;     // pretraining corpus size (cycled)
    double central_leak = 0.4;          // code-switch rate of target pretraining tokens

    ModelConfig model;                   // vocab/ctx filled from corpus
    double pretrain_lr = 1e-3;
    std::int64_t pretrain_steps = 3000;

    TrainConfig lens_train;              // phase "lens", weights populated
    EvalConfig eval;

    LanguageSet language_set() const;
    TrainConfig pretrain_config() const;

    nlohmann::json resolved_json() const; // defaults expanded, for config echo
};

// Parse and validate. Unknown keys anywhere raise std::invalid_argument.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path); // empty path -> all defaults

} // namespace lens

#endif
