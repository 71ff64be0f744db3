// SPDX-License-Identifier: Apache-2.0
//
// Training orchestration: backbone pretraining on the mixture corpus, the
// probe-then-manipulate fine-tuning run, and ablation sweeps. Subspaces are
// probed exactly once per run from the frozen reference and never re-fit.
#ifndef LENS_TRAINER_HPP
#define LENS_TRAINER_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lens/corpus.hpp"
#include "lens/eval.hpp"
#include "lens/loss.hpp"
#include "lens/model.hpp"
#include "lens/subspace.hpp"

namespace lens {

struct TrainConfig {
    std::string phase = "lens"; // pretrain | lens
    double lr = 5e-4;           // toy-scale default; 1e-5 is the paper-scale value
    int batch_size = 8;
    int epochs = 1;
    std::int64_t steps = 0; // pretrain only: explicit step count (0 = from epochs)
    double warmup_ratio = 0.05;
    std::string schedule = "cosine";
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    LensWeights weights;
    Index rank = 0;          // 0 -> L-1
    int trainable_from = -1; // -1 -> first manipulated layer
    MeanScale mean_scale = MeanScale::PerLanguage;

    void validate() const {
        if (lr <= 0) throw std::invalid_argument("TrainConfig: lr must be > 0");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (warmup_ratio < 0 || warmup_ratio >= 1)
            throw std::invalid_argument("TrainConfig: warmup_ratio must be in [0, 1)");
        if (phase != "pretrain" && phase != "lens")
            throw std::invalid_argument("TrainConfig: phase must be pretrain or lens");
        if (schedule != "cosine")
            throw std::invalid_argument("TrainConfig: only the cosine schedule is supported");
    }
};

struct StepRow {
    std::int64_t step = 0;
    int layer = 0;
    std::string lang;
    double l1 = 0, l2 = 0, l3 = 0, total = 0, lr = 0;
};

struct TrainReport {
    std::vector<StepRow> rows;
    double wall_time_sec = 0;
    std::string checkpoint_path;
    nlohmann::json config_echo;

    // pretraining diagnostics
    double initial_central_ce = 0, final_central_ce = 0;
    std::map<std::string, double> final_ce_per_language;
};

void write_metrics_csv(const std::vector<StepRow>& rows, const std::string& path);

// One probed layer with the directions the losses need.
struct ProbedLayer {
    SubspaceModel<double> model;
    DirectionSet<double> deltas;
};

struct LensRunResult {
    TrainReport report;
    std::vector<ProbedLayer> layers; // indexed by offset within manipulated range
    std::string snapshot_hash;       // reference parameters, constant across the run
};

// Next-token pretraining over the mixture corpus. Writes
// <out_dir>/pretrained.lensckpt and <out_dir>/metrics.csv when out_dir is
// nonempty. Aborts with a numeric failure if the loss stops being finite.
TrainReport pretrain(ToyTransformer<float>& model,
                     const std::vector<PretrainSequence>& corpus,
                     const std::vector<std::vector<TokenSeq>>& validation,
                     const LanguageSet& langs, const TrainConfig& config,
                     const std::string& out_dir = "");

// Probe-then-manipulate: snapshot the reference, fit per-layer subspaces and
// expression directions from reference representations of the probing set,
// then one pass of pull/push/retain optimization over the parallel pairs.
LensRunResult lens_finetune(ToyTransformer<float>& model,
                            const std::vector<std::vector<TokenSeq>>& probing_set,
                            const std::vector<ParallelPair>& manipulation_set,
                            const LanguageSet& langs, const ToyLanguageSpec& spec,
                            const TrainConfig& config, const std::string& out_dir = "");

// --- sweeps -------------------------------------------------------------------

enum class SweepAxis { Lambda1, LambdaL, Lambda3, StartLayer, DataVolume };

SweepAxis sweep_axis_from_string(const std::string& name);

struct SweepPoint {
    double value = 0;
    std::string run_dir;
    bool failed = false;
    std::string error;
    EvalReport eval;
};

struct SweepReport {
    SweepAxis axis = SweepAxis::LambdaL;
    std::vector<SweepPoint> points;
};

// One full lens_finetune + evaluate per grid value, all starting from the
// same pretrained parameters. Failures are recorded and the sweep continues.
SweepReport run_sweep(const ToyTransformer<float>& pretrained,
                      const std::vector<std::vector<TokenSeq>>& probing_set,
                      const std::vector<ParallelPair>& manipulation_set,
                      const LanguageSet& langs, const ToyLanguageSpec& spec,
                      const TrainConfig& base_config, const EvalConfig& eval_config,
                      SweepAxis axis, const std::vector<double>& grid,
                      const std::string& out_dir = "");

void write_sweep_csv(const SweepReport& report, const LanguageSet& langs,
                     const std::string& path);

} // namespace lens

#endif
