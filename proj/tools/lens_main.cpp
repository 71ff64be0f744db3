// SPDX-License-Identifier: Apache-2.0
//
// lens: single entry point for the pipeline.
//   gen        write corpus splits + manifest
//   probe      fit the language subspaces from a dump or a checkpoint
//   pretrain   train the backbone on the mixture corpus
//   enhance    probe-then-manipulate fine-tuning from a pretrained checkpoint
//   eval       fidelity / retrieval / drift / geometry report
//   sweep      ablation grids over the lens hyperparameters
//   export-pca 2-d projections of multilingual representations
//
// Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O error.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "lens/corpus.hpp"
#include "lens/error.hpp"
#include "lens/eval.hpp"
#include "lens/hash.hpp"
#include "lens/model.hpp"
#include "lens/run_config.hpp"
#include "lens/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw lens::io_error("cannot open for writing: " + path);
    out << text;
    if (!out) throw lens::io_error("write failed: " + path);
}

// Resolved-config echo; written before a command does any work.
void echo_config(const lens::RunConfig& cfg, const std::string& dir) {
    fs::create_directories(dir);
    write_text(dir + "/resolved_config.json", cfg.resolved_json().dump(2) + "\n");
}

std::string file_magic(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw lens::io_error("cannot open: " + path);
    char magic[8] = {};
    in.read(magic, sizeof(magic));
    return std::string(magic, static_cast<std::size_t>(in.gcount()));
}

json splits_manifest_entry(const std::string& path) {
    return json{{"bytes", fs::file_size(path)}, {"fnv1a64", lens::hash_file_hex(path)}};
}

int cmd_gen(const std::string& config_path, const std::string& out_dir) {
    const lens::RunConfig cfg = lens::load_run_config(config_path);
    echo_config(cfg, out_dir);

    const auto probing =
        lens::build_probing_set(cfg.seed, cfg.corpus,
                                static_cast<std::size_t>(cfg.probing_per_lang));
    const auto manipulation = lens::build_manipulation_set(
        cfg.seed, cfg.corpus, cfg.central,
        static_cast<std::size_t>(cfg.manipulation_per_lang));
    const auto pretrain_seqs = lens::build_pretrain_set(
        cfg.seed, cfg.corpus, cfg.mixture, static_cast<std::size_t>(cfg.pretrain_sequences),
        cfg.central, cfg.central_leak);

    json probing_doc;
    probing_doc["languages"] = cfg.corpus.language_ids();
    probing_doc["central"] = cfg.central;
    probing_doc["sequences"] = probing;
    write_text(out_dir + "/probing.json", probing_doc.dump() + "\n");

    json manip_doc;
    manip_doc["central"] = cfg.central;
    json pairs = json::array();
    for (const auto& p : manipulation)
        pairs.push_back(json{{"target", p.lang_a},
                             {"semantic", p.semantic},
                             {"target_tokens", p.tokens_a},
                             {"central_tokens", p.tokens_b}});
    manip_doc["pairs"] = pairs;
    write_text(out_dir + "/manipulation.json", manip_doc.dump() + "\n");

    json pretrain_doc;
    json seqs = json::array();
    for (const auto& s : pretrain_seqs)
        seqs.push_back(json{{"lang", s.lang}, {"tokens", s.tokens}});
    pretrain_doc["mixture"] = cfg.mixture;
    pretrain_doc["sequences"] = seqs;
    write_text(out_dir + "/pretrain.json", pretrain_doc.dump() + "\n");

    json manifest;
    manifest["seed"] = cfg.seed;
    manifest["files"] = {{"probing.json", splits_manifest_entry(out_dir + "/probing.json")},
                         {"manipulation.json",
                          splits_manifest_entry(out_dir + "/manipulation.json")},
                         {"pretrain.json", splits_manifest_entry(out_dir + "/pretrain.json")}};
    write_text(out_dir + "/manifest.json", manifest.dump(2) + "\n");
    std::cout << "wrote corpus splits to " << out_dir << "\n";
    return 0;
}

// Rendered probing sentences -> per-layer mean embeddings via the model.
lens::RepSampleSet<double> probe_samples_from_model(const lens::ToyTransformer<float>& model,
                                                    const lens::RunConfig& cfg, int layer) {
    const auto probing = lens::build_probing_set(
        cfg.seed, cfg.corpus, static_cast<std::size_t>(cfg.probing_per_lang));
    lens::RepSampleSet<double> samples;
    samples.samples.resize(probing.size());
    for (std::size_t l = 0; l < probing.size(); ++l)
        for (const auto& seq : probing[l])
            samples.samples[l].push_back(
                model.forward(seq).last_token_hidden(layer).cast<double>());
    return samples;
}

int cmd_probe(const std::string& config_path, const std::string& input,
              std::int64_t rank, const std::string& mean_scale, int layer, int central,
              const std::string& out_path) {
    const lens::RunConfig cfg = lens::load_run_config(config_path);
    if (!out_path.empty())
        write_text(out_path + ".config.json", cfg.resolved_json().dump(2) + "\n");

    const lens::MeanScale scale = [&] {
        if (mean_scale == "1/L") return lens::MeanScale::PerLanguage;
        if (mean_scale == "1/d") return lens::MeanScale::PerDim;
        throw std::invalid_argument("--mean-scale must be '1/L' or '1/d'");
    }();

    lens::RepSampleSet<double> samples;
    lens::LanguageSet langs;
    int model_layer = layer;
    if (input.size() >= 4 && input.substr(input.size() - 4) == ".csv") {
        const auto dump = lens::read_embedding_csv(input);
        std::tie(samples, langs) = lens::dump_to_samples(dump, central);
        if (model_layer < 0) model_layer = 0;
    } else {
        const std::string magic = file_magic(input);
        if (magic == "LENSEMB1") {
            const auto dump = lens::read_embedding_dump(input);
            std::tie(samples, langs) = lens::dump_to_samples(dump, central);
            if (model_layer < 0) model_layer = 0;
        } else if (magic == "LENSCKPT") {
            const auto model = lens::load_checkpoint<float>(input);
            if (model_layer < 0) model_layer = model.config.n_layers - 1;
            samples = probe_samples_from_model(model, cfg, model_layer);
            langs = cfg.language_set();
        } else {
            throw lens::io_error("unrecognized input format (magic '" + magic +
                                 "'): " + input);
        }
    }

    const auto means = lens::mean_embeddings(samples, langs);
    const lens::Index r = rank > 0 ? static_cast<lens::Index>(rank) : langs.size() - 1;
    const auto subspace = lens::probe(means, r, scale, model_layer);
    write_text(out_path, lens::subspace_to_json(subspace, langs).dump(2) + "\n");
    std::cout << "probed layer " << model_layer << " (r=" << r << ") -> " << out_path
              << "\n";
    return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_dir) {
    const lens::RunConfig cfg = lens::load_run_config(config_path);
    echo_config(cfg, out_dir);

    const auto corpus = lens::build_pretrain_set(
        cfg.seed, cfg.corpus, cfg.mixture, static_cast<std::size_t>(cfg.pretrain_sequences),
        cfg.central, cfg.central_leak);
    const auto validation = lens::eval_sentences(cfg.corpus, cfg.seed, 64);

    lens::ToyTransformer<float> model(cfg.model);
    const auto report =
        lens::pretrain(model, corpus, validation, cfg.language_set(),
                       cfg.pretrain_config(), out_dir);
    std::cout << "pretrained " << report.rows.size() << " steps; central validation CE "
              << report.initial_central_ce << " -> " << report.final_central_ce << "\n";
    return 0;
}

int cmd_enhance(const std::string& config_path, const std::string& checkpoint,
                const std::string& out_dir) {
    const lens::RunConfig cfg = lens::load_run_config(config_path);
    echo_config(cfg, out_dir);

    auto model = lens::load_checkpoint<float>(checkpoint);
    const auto probing = lens::build_probing_set(
        cfg.seed, cfg.corpus, static_cast<std::size_t>(cfg.probing_per_lang));
    const auto manipulation = lens::build_manipulation_set(
        cfg.seed, cfg.corpus, cfg.central,
        static_cast<std::size_t>(cfg.manipulation_per_lang));

    const auto result = lens::lens_finetune(model, probing, manipulation,
                                            cfg.language_set(), cfg.corpus,
                                            cfg.lens_train, out_dir);
    double last_total = 0;
    if (!result.report.rows.empty()) last_total = result.report.rows.back().total;
    std::cout << "enhanced over " << result.report.rows.size()
              << " metric rows; final step total " << last_total << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& reference_path, const std::string& subspace_dir,
             const std::string& run_id, const std::string& out_dir) {
    const lens::RunConfig cfg = lens::load_run_config(config_path);
    echo_config(cfg, out_dir);

    const auto model = lens::load_checkpoint<float>(checkpoint);
    const auto ref_model = reference_path.empty()
                               ? model
                               : lens::load_checkpoint<float>(reference_path);
    const lens::ReferenceSnapshot<float> reference(ref_model);
    const lens::LanguageSet langs = cfg.language_set();
    const lens::LayerRange layers = cfg.lens_train.weights.manipulated_layers;

    std::vector<lens::SubspaceModel<double>> subspaces;
    if (!subspace_dir.empty()) {
        for (int l = layers.first; l <= layers.last; ++l) {
            const std::string path =
                subspace_dir + "/subspace_layer" + std::to_string(l) + ".json";
            std::ifstream in(path);
            if (!in) throw lens::io_error("missing subspace file: " + path);
            json j;
            in >> j;
            subspaces.push_back(lens::subspace_from_json(j).first);
        }
    } else {
        // no probed subspaces supplied: fit them from the reference model
        const lens::Index r = cfg.lens_train.rank > 0 ? cfg.lens_train.rank
                                                      : langs.size() - 1;
        for (int l = layers.first; l <= layers.last; ++l) {
            const auto samples = probe_samples_from_model(reference.model, cfg, l);
            const auto means = lens::mean_embeddings(samples, langs);
            subspaces.push_back(lens::probe(means, r, cfg.lens_train.mean_scale, l));
        }
    }

    const auto report = lens::evaluate(model, reference, subspaces, layers, langs,
                                       cfg.corpus, cfg.eval, run_id);
    const std::string suffix = report.run_id + "_s" + std::to_string(report.seed);
    write_text(out_dir + "/eval_" + suffix + ".json", report.to_json().dump(2) + "\n");

    // PCA export across manipulated layers, both subspaces
    const auto parallel =
        lens::eval_parallel_inputs(cfg.corpus, cfg.eval.seed, cfg.eval.pca_samples);
    std::vector<lens::PcaRow> rows;
    for (int l = layers.first; l <= layers.last; ++l) {
        const auto& sub = subspaces[static_cast<std::size_t>(l - layers.first)];
        for (auto kind : {lens::SubspaceKind::Agnostic, lens::SubspaceKind::Specific}) {
            const auto layer_rows = lens::export_pca(model, parallel, langs, l, sub, kind);
            rows.insert(rows.end(), layer_rows.begin(), layer_rows.end());
        }
    }
    lens::write_pca_csv(rows, out_dir + "/pca_" + suffix + ".csv");

    std::cout << "eval report written; retrieval " << report.retrieval_accuracy << "\n";
    for (const auto& [lang, ev] : report.per_language)
        std::cout << "  " << lang << ": fidelity " << ev.fidelity.fidelity
                  << ", next-token acc " << ev.next_token_accuracy << "\n";
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& checkpoint,
              const std::string& axis_name, const std::string& grid_text,
              const std::string& out_dir) {
    const lens::RunConfig cfg = lens::load_run_config(config_path);
    echo_config(cfg, out_dir);

    std::vector<double> grid;
    {
        std::stringstream ss(grid_text);
        std::string cell;
        while (std::getline(ss, cell, ','))
            if (!cell.empty()) grid.push_back(std::stod(cell));
    }
    if (grid.empty()) throw std::invalid_argument("--grid must list at least one value");

    const auto pretrained = lens::load_checkpoint<float>(checkpoint);
    const auto probing = lens::build_probing_set(
        cfg.seed, cfg.corpus, static_cast<std::size_t>(cfg.probing_per_lang));
    const auto manipulation = lens::build_manipulation_set(
        cfg.seed, cfg.corpus, cfg.central,
        static_cast<std::size_t>(cfg.manipulation_per_lang));

    const auto report = lens::run_sweep(
        pretrained, probing, manipulation, cfg.language_set(), cfg.corpus, cfg.lens_train,
        cfg.eval, lens::sweep_axis_from_string(axis_name), grid, out_dir);
    int failures = 0;
    for (const auto& p : report.points)
        if (p.failed) ++failures;
    std::cout << "sweep finished: " << report.points.size() << " points, " << failures
              << " failed\n";
    return 0;
}

int cmd_export_pca(const std::string& config_path, const std::string& checkpoint,
                   const std::string& subspace_path, int layer, const std::string& which,
                   const std::string& out_path) {
    const lens::RunConfig cfg = lens::load_run_config(config_path);
    if (!out_path.empty())
        write_text(out_path + ".config.json", cfg.resolved_json().dump(2) + "\n");

    const auto model = lens::load_checkpoint<float>(checkpoint);
    std::ifstream in(subspace_path);
    if (!in) throw lens::io_error("cannot open subspace json: " + subspace_path);
    json j;
    in >> j;
    const auto [subspace, langs] = lens::subspace_from_json(j);
    const int use_layer = layer >= 0 ? layer : subspace.layer;

    const lens::SubspaceKind kind = [&] {
        if (which == "agnostic") return lens::SubspaceKind::Agnostic;
        if (which == "specific") return lens::SubspaceKind::Specific;
        throw std::invalid_argument("--subspace must be 'agnostic' or 'specific'");
    }();

    const auto parallel =
        lens::eval_parallel_inputs(cfg.corpus, cfg.eval.seed, cfg.eval.pca_samples);
    const auto rows = lens::export_pca(model, parallel, langs, use_layer, subspace, kind);
    lens::write_pca_csv(rows, out_path);
    std::cout << "wrote " << rows.size() << " pca rows to " << out_path << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"LENS toy laboratory: language-subspace probing and manipulation"};
    app.require_subcommand(1);

    std::string config_path, out_path, input, checkpoint, reference, subspace_dir,
        subspace_path, axis, grid, mean_scale = "1/L", which = "specific",
        run_id = "run";
    std::int64_t rank = 0;
    int layer = -1, central = 0;

    auto* gen = app.add_subcommand("gen", "generate corpus splits");
    gen->add_option("--config", config_path, "run config JSON");
    gen->add_option("--out", out_path, "output directory")->required();

    auto* probe = app.add_subcommand("probe", "fit language subspaces");
    probe->add_option("--config", config_path, "run config JSON");
    probe->add_option("--input", input, "embedding dump (.lensemb/.csv) or checkpoint")
        ->required();
    probe->add_option("--rank", rank, "subspace rank r (default L-1)");
    probe->add_option("--mean-scale", mean_scale, "column-mean scaling: 1/L or 1/d");
    probe->add_option("--layer", layer, "layer to probe (checkpoints only)");
    probe->add_option("--central", central, "central language index for dumps");
    probe->add_option("--out", out_path, "output subspace JSON")->required();

    auto* pre = app.add_subcommand("pretrain", "pretrain the backbone");
    pre->add_option("--config", config_path, "run config JSON");
    pre->add_option("--out", out_path, "run directory")->required();

    auto* enh = app.add_subcommand("enhance", "probe-then-manipulate fine-tuning");
    enh->add_option("--config", config_path, "run config JSON");
    enh->add_option("--checkpoint", checkpoint, "pretrained checkpoint")->required();
    enh->add_option("--out", out_path, "run directory")->required();

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--config", config_path, "run config JSON");
    ev->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
    ev->add_option("--reference", reference, "reference checkpoint for drift");
    ev->add_option("--subspaces", subspace_dir, "directory with subspace_layerN.json");
    ev->add_option("--run-id", run_id, "run id embedded in output file names");
    ev->add_option("--out", out_path, "run directory")->required();

    auto* sw = app.add_subcommand("sweep", "ablation sweep");
    sw->add_option("--config", config_path, "run config JSON");
    sw->add_option("--checkpoint", checkpoint, "pretrained checkpoint")->required();
    sw->add_option("--axis", axis,
                   "lambda1|lambda_l|lambda3|start_layer|data_volume")
        ->required();
    sw->add_option("--grid", grid, "comma-separated values")->required();
    sw->add_option("--out", out_path, "sweep directory")->required();

    auto* pca = app.add_subcommand("export-pca", "export 2-d subspace projections");
    pca->add_option("--config", config_path, "run config JSON");
    pca->add_option("--checkpoint", checkpoint, "checkpoint")->required();
    pca->add_option("--subspace-file", subspace_path, "subspace JSON from probe/enhance")
        ->required();
    pca->add_option("--layer", layer, "layer (default: the subspace file's layer)");
    pca->add_option("--subspace", which, "agnostic or specific");
    pca->add_option("--out", out_path, "output CSV")->required();

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen(config_path, out_path);
        if (probe->parsed())
            return cmd_probe(config_path, input, rank, mean_scale, layer, central,
                             out_path);
        if (pre->parsed()) return cmd_pretrain(config_path, out_path);
        if (enh->parsed()) return cmd_enhance(config_path, checkpoint, out_path);
        if (ev->parsed())
            return cmd_eval(config_path, checkpoint, reference, subspace_dir, run_id,
                            out_path);
        if (sw->parsed()) return cmd_sweep(config_path, checkpoint, axis, grid, out_path);
        if (pca->parsed())
            return cmd_export_pca(config_path, checkpoint, subspace_path, layer, which,
                                  out_path);
        std::cerr << "no subcommand selected\n";
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const lens::io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const lens::numeric_error& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
