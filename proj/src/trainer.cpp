// SPDX-License-Identifier: Apache-2.0
#include "lens/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lens/error.hpp"
#include "lens/optim.hpp"

namespace lens {

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

nlohmann::json train_config_echo(const TrainConfig& c) {
    nlohmann::json j;
    j["phase"] = c.phase;
    j["lr"] = c.lr;
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["steps"] = c.steps;
    j["warmup_ratio"] = c.warmup_ratio;
    j["schedule"] = c.schedule;
    j["adam"] = {{"beta1", c.adam_beta1}, {"beta2", c.adam_beta2}, {"eps", c.adam_eps}};
    j["seed"] = c.seed;
    j["rank"] = c.rank;
    j["trainable_from"] = c.trainable_from;
    j["mean_scale"] = c.mean_scale == MeanScale::PerLanguage ? "1/L" : "1/d";
    j["lambda1"] = c.weights.lambda1;
    j["lambda3"] = c.weights.lambda3;
    j["lambda_l"] = c.weights.lambda_l;
    j["manipulated_layers"] = {c.weights.manipulated_layers.first,
                               c.weights.manipulated_layers.last};
    return j;
}

void write_run_manifest(const std::string& out_dir, const TrainConfig& config,
                        const TrainReport& report, const std::string& extra_note = "") {
    nlohmann::json manifest;
    manifest["config"] = train_config_echo(config);
    manifest["seed"] = config.seed;
    manifest["wall_time_sec"] = report.wall_time_sec;
    if (!report.checkpoint_path.empty()) {
        manifest["checkpoint"] = {{"path", report.checkpoint_path},
                                  {"fnv1a64", hash_file_hex(report.checkpoint_path)}};
    }
    if (!extra_note.empty()) manifest["note"] = extra_note;
    std::ofstream out(out_dir + "/run_manifest.json", std::ios::trunc);
    if (!out) throw io_error("cannot write run manifest in " + out_dir);
    out << manifest.dump(2) << "\n";
}

} // namespace

void write_metrics_csv(const std::vector<StepRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << "step,layer,lang,l1,l2,l3,total,lr\n";
    for (const auto& r : rows)
        out << r.step << ',' << r.layer << ',' << r.lang << ',' << fmt_double(r.l1) << ','
            << fmt_double(r.l2) << ',' << fmt_double(r.l3) << ',' << fmt_double(r.total)
            << ',' << fmt_double(r.lr) << "\n";
    if (!out) throw io_error("write failed: " + path);
}

TrainReport pretrain(ToyTransformer<float>& model,
                     const std::vector<PretrainSequence>& corpus,
                     const std::vector<std::vector<TokenSeq>>& validation,
                     const LanguageSet& langs, const TrainConfig& config,
                     const std::string& out_dir) {
    config.validate();
    if (config.phase != "pretrain")
        throw std::invalid_argument("pretrain: config phase must be 'pretrain'");
    langs.validate();
    if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
    if (static_cast<Index>(validation.size()) != langs.size())
        throw std::invalid_argument("pretrain: one validation split per language required");

    const auto t0 = std::chrono::steady_clock::now();
    TrainReport report;
    report.config_echo = train_config_echo(config);

    const auto central = static_cast<std::size_t>(langs.central_index);
    report.initial_central_ce = static_cast<double>(lm_eval(model, validation[central]).first);

    const std::int64_t steps =
        config.steps > 0
            ? config.steps
            : static_cast<std::int64_t>(config.epochs) *
                  static_cast<std::int64_t>(
                      (corpus.size() + static_cast<std::size_t>(config.batch_size) - 1) /
                      static_cast<std::size_t>(config.batch_size));

    model.trainable_from = 0;
    Adam<float> adam(model.layout.total, config.adam_beta1, config.adam_beta2,
                     config.adam_eps);
    std::size_t cursor = 0;
    for (std::int64_t step = 0; step < steps; ++step) {
        std::vector<TokenSeq> batch;
        batch.reserve(static_cast<std::size_t>(config.batch_size));
        for (int b = 0; b < config.batch_size; ++b) {
            batch.push_back(corpus[cursor].tokens);
            cursor = (cursor + 1) % corpus.size();
        }
        const auto [loss, grads] = backward_lm(model, batch);
        if (!std::isfinite(loss))
            throw numeric_error("pretrain: loss diverged (non-finite) at step " +
                                std::to_string(step));
        const double lr = cosine_warmup_lr(step, steps, config.warmup_ratio, config.lr);
        adam.step(model.params, grads, lr, 0);

        StepRow row;
        row.step = step;
        row.layer = -1;
        row.lang = "mix";
        row.total = static_cast<double>(loss);
        row.lr = lr;
        report.rows.push_back(row);
    }

    report.final_central_ce = static_cast<double>(lm_eval(model, validation[central]).first);
    for (Index l = 0; l < langs.size(); ++l)
        report.final_ce_per_language[langs.languages[static_cast<std::size_t>(l)]] =
            static_cast<double>(lm_eval(model, validation[static_cast<std::size_t>(l)]).first);

    report.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        report.checkpoint_path = out_dir + "/pretrained.lensckpt";
        save_checkpoint(model, report.checkpoint_path);
        write_metrics_csv(report.rows, out_dir + "/metrics.csv");
        write_run_manifest(out_dir, config, report);
    }
    return report;
}

LensRunResult lens_finetune(ToyTransformer<float>& model,
                            const std::vector<std::vector<TokenSeq>>& probing_set,
                            const std::vector<ParallelPair>& manipulation_set,
                            const LanguageSet& langs, const ToyLanguageSpec& spec,
                            const TrainConfig& config, const std::string& out_dir) {
    config.validate();
    if (config.phase != "lens")
        throw std::invalid_argument("lens_finetune: config phase must be 'lens'");
    langs.validate();
    std::vector<std::string> targets;
    for (Index l = 0; l < langs.size(); ++l)
        if (l != langs.central_index)
            targets.push_back(langs.languages[static_cast<std::size_t>(l)]);
    config.weights.validate(targets);

    const LayerRange layers = config.weights.manipulated_layers;
    if (layers.first < 0 || layers.last >= model.config.n_layers)
        throw std::invalid_argument("lens_finetune: manipulated layer range out of bounds");
    if (static_cast<Index>(probing_set.size()) != langs.size())
        throw std::invalid_argument("lens_finetune: one probing split per language required");
    if (manipulation_set.empty())
        throw std::invalid_argument("lens_finetune: empty manipulation set");

    const auto t0 = std::chrono::steady_clock::now();
    model.trainable_from = config.trainable_from >= 0 ? config.trainable_from : layers.first;

    LensRunResult result;
    const ReferenceSnapshot<float> reference(model);
    result.snapshot_hash = reference.model.params_hash();

    // --- stage 1: probe each manipulated layer from reference representations
    const std::size_t n_layers = static_cast<std::size_t>(layers.count());
    std::vector<RepSampleSet<double>> samples(n_layers);
    for (auto& s : samples) s.samples.resize(static_cast<std::size_t>(langs.size()));
    for (Index l = 0; l < langs.size(); ++l) {
        for (const auto& seq : probing_set[static_cast<std::size_t>(l)]) {
            const auto tr = reference.model.forward(seq);
            for (std::size_t k = 0; k < n_layers; ++k)
                samples[k].samples[static_cast<std::size_t>(l)].push_back(
                    tr.last_token_hidden(layers.first + static_cast<int>(k))
                        .cast<double>());
        }
    }
    const Index rank = config.rank > 0 ? config.rank : langs.size() - 1;
    result.layers.reserve(n_layers);
    for (std::size_t k = 0; k < n_layers; ++k) {
        const auto means = mean_embeddings(samples[k], langs);
        ProbedLayer pl;
        pl.model = probe(means, rank, config.mean_scale, layers.first + static_cast<int>(k));
        pl.deltas = directions(pl.model, means);
        result.layers.push_back(std::move(pl));
    }
    samples.clear();

    // --- reference representations for every manipulation pair (fixed)
    struct PairReps {
        std::vector<Vecd> x_l_ref, x_c_ref; // per layer offset
    };
    std::vector<PairReps> ref_reps(manipulation_set.size());
    for (std::size_t i = 0; i < manipulation_set.size(); ++i) {
        const auto tr_t = reference.model.forward(manipulation_set[i].tokens_a);
        const auto tr_c = reference.model.forward(manipulation_set[i].tokens_b);
        for (std::size_t k = 0; k < n_layers; ++k) {
            const int layer = layers.first + static_cast<int>(k);
            ref_reps[i].x_l_ref.push_back(tr_t.last_token_hidden(layer).cast<double>());
            ref_reps[i].x_c_ref.push_back(tr_c.last_token_hidden(layer).cast<double>());
        }
    }

    // --- batch plan: single-target batches, targets interleaved round-robin
    std::map<int, std::vector<std::size_t>> by_target;
    for (std::size_t i = 0; i < manipulation_set.size(); ++i)
        by_target[manipulation_set[i].lang_a].push_back(i);
    std::vector<std::vector<std::size_t>> batches;
    {
        std::map<int, std::size_t> cursor;
        bool remaining = true;
        while (remaining) {
            remaining = false;
            for (auto& [lang, idx] : by_target) {
                auto& c = cursor[lang];
                if (c >= idx.size()) continue;
                std::vector<std::size_t> batch;
                while (c < idx.size() &&
                       batch.size() < static_cast<std::size_t>(config.batch_size))
                    batch.push_back(idx[c++]);
                batches.push_back(std::move(batch));
                if (c < idx.size()) remaining = true;
            }
        }
    }

    const std::int64_t total_steps =
        static_cast<std::int64_t>(config.epochs) * static_cast<std::int64_t>(batches.size());
    Adam<float> adam(model.layout.total, config.adam_beta1, config.adam_beta2,
                     config.adam_eps);
    TrainReport& report = result.report;
    report.config_echo = train_config_echo(config);

    std::vector<SubspaceModel<double>> layer_models;
    for (const auto& pl : result.layers) layer_models.push_back(pl.model);

    std::int64_t step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        for (const auto& batch_indices : batches) {
            const int target_lang_idx =
                manipulation_set[batch_indices.front()].lang_a;
            const std::string& target_id =
                langs.languages[static_cast<std::size_t>(target_lang_idx)];

            RepBatch<double> rep_batch;
            rep_batch.target_lang = target_id;
            rep_batch.layers = layers;
            std::vector<ForwardTrace<float>> traces_t, traces_c;
            traces_t.reserve(batch_indices.size());
            traces_c.reserve(batch_indices.size());
            for (std::size_t i : batch_indices) {
                traces_t.push_back(model.forward(manipulation_set[i].tokens_a));
                traces_c.push_back(model.forward(manipulation_set[i].tokens_b));
                RepPair<double> item;
                for (std::size_t k = 0; k < n_layers; ++k) {
                    const int layer = layers.first + static_cast<int>(k);
                    item.x_l.push_back(
                        traces_t.back().last_token_hidden(layer).cast<double>());
                    item.x_c.push_back(
                        traces_c.back().last_token_hidden(layer).cast<double>());
                    item.x_l_ref.push_back(ref_reps[i].x_l_ref[k]);
                    item.x_c_ref.push_back(ref_reps[i].x_c_ref[k]);
                }
                rep_batch.items.push_back(std::move(item));
            }

            std::vector<Vecd> deltas;
            for (const auto& pl : result.layers) deltas.push_back(pl.deltas.delta.at(target_id));

            const auto breakdown = total_loss(layer_models, deltas, config.weights, rep_batch);
            if (!std::isfinite(breakdown.total))
                throw numeric_error("lens_finetune: loss diverged at step " +
                                    std::to_string(step));

            Vec<float> grads = Vec<float>::Zero(model.layout.total);
            for (std::size_t i = 0; i < batch_indices.size(); ++i) {
                std::map<int, Vec<float>> inj_t, inj_c;
                for (std::size_t k = 0; k < n_layers; ++k) {
                    const int layer = layers.first + static_cast<int>(k);
                    inj_t[layer] = breakdown.grad_x_l[i][k].cast<float>();
                    inj_c[layer] = breakdown.grad_x_c[i][k].cast<float>();
                }
                model.backward_lens(traces_t[i], inj_t, layers, grads);
                model.backward_lens(traces_c[i], inj_c, layers, grads);
            }

            const double lr =
                cosine_warmup_lr(step, total_steps, config.warmup_ratio, config.lr);
            adam.step(model.params, grads, lr, model.frozen_prefix());

            for (const auto& row : breakdown.per_layer) {
                StepRow r;
                r.step = step;
                r.layer = row.layer;
                r.lang = target_id;
                r.l1 = row.l1;
                r.l2 = row.l2;
                r.l3 = row.l3;
                r.total = config.weights.lambda1 * row.l1 + row.l2 +
                          config.weights.lambda3 * row.l3;
                r.lr = lr;
                report.rows.push_back(r);
            }
            ++step;
        }
    }

    if (reference.model.params_hash() != result.snapshot_hash)
        throw numeric_error("lens_finetune: reference snapshot mutated during the run");

    report.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        report.checkpoint_path = out_dir + "/enhanced.lensckpt";
        save_checkpoint(model, report.checkpoint_path);
        write_metrics_csv(report.rows, out_dir + "/metrics.csv");
        for (const auto& pl : result.layers) {
            std::ofstream out(out_dir + "/subspace_layer" + std::to_string(pl.model.layer) +
                                  ".json",
                              std::ios::trunc);
            if (!out) throw io_error("cannot write subspace json in " + out_dir);
            out << subspace_to_json(pl.model, langs).dump(2) << "\n";
        }
        write_run_manifest(out_dir, config, report,
                           "subspaces probed once from reference snapshot " +
                               result.snapshot_hash);
    }
    (void)spec;
    return result;
}

SweepAxis sweep_axis_from_string(const std::string& name) {
    if (name == "lambda1") return SweepAxis::Lambda1;
    if (name == "lambda_l") return SweepAxis::LambdaL;
    if (name == "lambda3") return SweepAxis::Lambda3;
    if (name == "start_layer") return SweepAxis::StartLayer;
    if (name == "data_volume") return SweepAxis::DataVolume;
    throw std::invalid_argument(
        "unknown sweep axis '" + name +
        "' (expected lambda1|lambda_l|lambda3|start_layer|data_volume)");
}

namespace {

std::string axis_name(SweepAxis axis) {
    switch (axis) {
        case SweepAxis::Lambda1: return "lambda1";
        case SweepAxis::LambdaL: return "lambda_l";
        case SweepAxis::Lambda3: return "lambda3";
        case SweepAxis::StartLayer: return "start_layer";
        case SweepAxis::DataVolume: return "data_volume";
    }
    return "?";
}

// First n pairs per target language, preserving order (nested subsets).
std::vector<ParallelPair> data_prefix(const std::vector<ParallelPair>& pairs,
                                      std::size_t n_per_lang) {
    std::map<int, std::size_t> taken;
    std::vector<ParallelPair> out;
    for (const auto& p : pairs)
        if (taken[p.lang_a]++ < n_per_lang) out.push_back(p);
    return out;
}

std::string value_tag(double v) {
    std::string s = fmt_double(v);
    for (auto& c : s)
        if (c == '.' || c == '-' || c == '+') c = '_';
    return s;
}

} // namespace

SweepReport run_sweep(const ToyTransformer<float>& pretrained,
                      const std::vector<std::vector<TokenSeq>>& probing_set,
                      const std::vector<ParallelPair>& manipulation_set,
                      const LanguageSet& langs, const ToyLanguageSpec& spec,
                      const TrainConfig& base_config, const EvalConfig& eval_config,
                      SweepAxis axis, const std::vector<double>& grid,
                      const std::string& out_dir) {
    if (grid.empty()) throw std::invalid_argument("run_sweep: empty grid");
    SweepReport report;
    report.axis = axis;

    for (double value : grid) {
        SweepPoint point;
        point.value = value;
        if (!out_dir.empty())
            point.run_dir =
                out_dir + "/run_" + axis_name(axis) + "_" + value_tag(value);
        try {
            TrainConfig cfg = base_config;
            std::vector<ParallelPair> pairs = manipulation_set;
            switch (axis) {
                case SweepAxis::Lambda1: cfg.weights.lambda1 = value; break;
                case SweepAxis::Lambda3: cfg.weights.lambda3 = value; break;
                case SweepAxis::LambdaL:
                    for (auto& [lang, v] : cfg.weights.lambda_l) v = value;
                    break;
                case SweepAxis::StartLayer: {
                    const int start = static_cast<int>(value);
                    cfg.weights.manipulated_layers.first = start;
                    cfg.trainable_from = start;
                    break;
                }
                case SweepAxis::DataVolume:
                    pairs = data_prefix(manipulation_set, static_cast<std::size_t>(value));
                    break;
            }
            ToyTransformer<float> model = pretrained;
            const auto run =
                lens_finetune(model, probing_set, pairs, langs, spec, cfg, point.run_dir);
            std::vector<SubspaceModel<double>> layer_models;
            for (const auto& pl : run.layers) layer_models.push_back(pl.model);
            const ReferenceSnapshot<float> reference(pretrained);
            point.eval = evaluate(model, reference, layer_models,
                                  cfg.weights.manipulated_layers, langs, spec, eval_config,
                                  axis_name(axis) + "_" + value_tag(value));
            if (!point.run_dir.empty()) {
                std::ofstream out(point.run_dir + "/eval_" + point.eval.run_id + "_s" +
                                      std::to_string(point.eval.seed) + ".json",
                                  std::ios::trunc);
                out << point.eval.to_json().dump(2) << "\n";
            }
        } catch (const std::exception& e) {
            point.failed = true;
            point.error = e.what();
        }
        report.points.push_back(std::move(point));
    }

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        write_sweep_csv(report, langs, out_dir + "/sweep.csv");
    }
    return report;
}

void write_sweep_csv(const SweepReport& report, const LanguageSet& langs,
                     const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << "axis,value,status";
    for (const auto& lang : langs.languages)
        out << ",fidelity_" << lang << ",next_token_acc_" << lang;
    out << ",retrieval,top_layer_drift,top_layer_sep_agnostic,top_layer_sep_specific\n";
    for (const auto& p : report.points) {
        out << axis_name(report.axis) << ',' << fmt_double(p.value) << ','
            << (p.failed ? "failed" : "ok");
        if (p.failed) {
            for (Index i = 0; i < langs.size(); ++i) out << ",,";
            out << ",,,,\n";
            continue;
        }
        for (const auto& lang : langs.languages) {
            const auto& ev = p.eval.per_language.at(lang);
            out << ',' << fmt_double(ev.fidelity.fidelity) << ','
                << fmt_double(ev.next_token_accuracy);
        }
        const auto drift_it = p.eval.central_drift.rbegin();
        const auto sep_it = p.eval.separation.rbegin();
        out << ',' << fmt_double(p.eval.retrieval_accuracy) << ','
            << fmt_double(drift_it != p.eval.central_drift.rend() ? drift_it->second : 0.0)
            << ','
            << fmt_double(sep_it != p.eval.separation.rend() ? sep_it->second.agnostic : 0.0)
            << ','
            << fmt_double(sep_it != p.eval.separation.rend() ? sep_it->second.specific : 0.0)
            << "\n";
    }
    if (!out) throw io_error("write failed: " + path);
}

} // namespace lens
