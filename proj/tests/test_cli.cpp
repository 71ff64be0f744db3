// SPDX-License-Identifier: Apache-2.0
//
// End-to-end CLI checks; the binary path arrives via the LENS_BIN
// environment variable set by CTest.
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lens/hash.hpp"
#include "lens/subspace.hpp"

namespace fs = std::filesystem;

namespace {

std::string lens_bin() {
    const char* bin = std::getenv("LENS_BIN");
    REQUIRE(bin != nullptr);
    return bin;
}

struct CliResult {
    int exit_code = -1;
    std::string out, err;
};

CliResult run_cli(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    const std::string tag = "/tmp/lens_cli_" + std::to_string(counter++);
    const std::string cmd =
        env + " " + lens_bin() + " " + args + " >" + tag + ".out 2>" + tag + ".err";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WEXITSTATUS(status);
    std::ifstream out(tag + ".out"), err(tag + ".err");
    r.out.assign(std::istreambuf_iterator<char>(out), std::istreambuf_iterator<char>());
    r.err.assign(std::istreambuf_iterator<char>(err), std::istreambuf_iterator<char>());
    std::remove((tag + ".out").c_str());
    std::remove((tag + ".err").c_str());
    return r;
}

// tiny config so CLI round trips stay fast
void write_tiny_config(const std::string& path, const std::string& lambda_l = "") {
    std::ofstream out(path);
    out << R"({
  "seed": 11,
  "corpus": {"semantic_vocab": 12, "ctx": 24, "max_len": 10, "branching": 3,
              "probing_per_lang": 40, "manipulation_per_lang": 24,
              "pretrain_sequences": 800},
  "model": {"d_model": 32, "n_layers": 3, "n_heads": 2, "d_ff": 48},
  "train": {"pretrain_steps": 120},
  "eval": {"fidelity_prompts": 8, "retrieval_pairs": 10, "drift_sentences": 8,
            "pca_samples": 8})";
    if (!lambda_l.empty()) out << ",\n  \"lens\": {\"lambda_l\": " << lambda_l << "}";
    out << "\n}\n";
}

} // namespace

TEST_CASE("gen writes splits with a consistent manifest and is idempotent") {
    const std::string dir = "/tmp/lens_cli_gen";
    fs::remove_all(dir);
    write_tiny_config("/tmp/lens_cli_gen.json");

    auto r = run_cli("gen --config /tmp/lens_cli_gen.json --out " + dir);
    CHECK(r.exit_code == 0);
    for (const char* name :
         {"probing.json", "manipulation.json", "pretrain.json", "manifest.json",
          "resolved_config.json"})
        CHECK(fs::exists(dir + "/" + name));

    nlohmann::json manifest;
    std::ifstream(dir + "/manifest.json") >> manifest;
    for (const auto& [name, entry] : manifest.at("files").items())
        CHECK(entry.at("fnv1a64").get<std::string>() == lens::hash_file_hex(dir + "/" + name));

    const std::string before = lens::hash_file_hex(dir + "/probing.json");
    auto r2 = run_cli("gen --config /tmp/lens_cli_gen.json --out " + dir);
    CHECK(r2.exit_code == 0);
    CHECK(lens::hash_file_hex(dir + "/probing.json") == before);

    // default split sizes follow the probing/manipulation budgets
    nlohmann::json probing;
    std::ifstream(dir + "/probing.json") >> probing;
    CHECK(probing.at("sequences").size() == 3);
    CHECK(probing.at("sequences").at(0).size() == 40);
    fs::remove_all(dir);
}

TEST_CASE("probe consumes a csv dump, defaults the rank and warns on degenerate input") {
    const std::string csv = "/tmp/lens_cli_dump.csv";
    {
        std::ofstream out(csv);
        out << "lang,v0,v1,v2,v3\n";
        for (int i = 0; i < 6; ++i) {
            out << "aa,1,0,0," << 0.5 * i << "\n";
            out << "bb,0,1,0," << 0.25 * i << "\n";
            out << "cc,0,0,1," << 0.125 * i << "\n";
        }
    }
    auto r = run_cli("probe --input " + csv + " --out /tmp/lens_cli_sub.json");
    CHECK(r.exit_code == 0);
    nlohmann::json j;
    std::ifstream("/tmp/lens_cli_sub.json") >> j;
    CHECK(j.at("r").get<int>() == 2); // L-1 default
    const auto [model, langs] = lens::subspace_from_json(j);
    CHECK(langs.languages == std::vector<std::string>{"aa", "bb", "cc"});
    CHECK((model.m_s.transpose() * model.u_a).cwiseAbs().maxCoeff() <= 1e-8);

    // identical means across languages: warning, near-zero coordinates
    {
        std::ofstream out(csv);
        out << "lang,v0,v1\n";
        for (int i = 0; i < 4; ++i) {
            out << "aa,1,2\n";
            out << "bb,1,2\n";
        }
    }
    auto r2 = run_cli("probe --input " + csv + " --out /tmp/lens_cli_sub.json");
    CHECK(r2.exit_code == 0);
    CHECK(r2.err.find("warning") != std::string::npos);
    nlohmann::json j2;
    std::ifstream("/tmp/lens_cli_sub.json") >> j2;
    for (double g : j2.at("gamma").get<std::vector<double>>()) CHECK(std::abs(g) <= 1e-8);

    std::remove(csv.c_str());
    std::remove("/tmp/lens_cli_sub.json");
    std::remove("/tmp/lens_cli_sub.json.config.json");
}

TEST_CASE("the full pipeline runs and the usage/io error paths exit correctly") {
    const std::string base = "/tmp/lens_cli_pipe";
    fs::remove_all(base);
    fs::create_directories(base);
    const std::string cfg = base + "/config.json";
    write_tiny_config(cfg);

    auto pre = run_cli("pretrain --config " + cfg + " --out " + base + "/pre");
    CHECK(pre.exit_code == 0);
    CHECK(fs::exists(base + "/pre/pretrained.lensckpt"));
    CHECK(fs::exists(base + "/pre/pretrained.lensckpt.manifest.json"));
    CHECK(fs::exists(base + "/pre/metrics.csv"));

    auto enh = run_cli("enhance --config " + cfg + " --checkpoint " + base +
                       "/pre/pretrained.lensckpt --out " + base + "/enh");
    CHECK(enh.exit_code == 0);
    CHECK(fs::exists(base + "/enh/enhanced.lensckpt"));
    CHECK(fs::exists(base + "/enh/subspace_layer1.json"));
    CHECK(fs::exists(base + "/enh/subspace_layer2.json"));

    auto ev = run_cli("eval --config " + cfg + " --checkpoint " + base +
                      "/enh/enhanced.lensckpt --reference " + base +
                      "/pre/pretrained.lensckpt --subspaces " + base +
                      "/enh --run-id t --out " + base + "/eval");
    CHECK(ev.exit_code == 0);
    CHECK(fs::exists(base + "/eval/eval_t_s11.json"));
    CHECK(fs::exists(base + "/eval/pca_t_s11.csv"));

    SUBCASE("missing lambda_l names the offending language and exits 1") {
        write_tiny_config(cfg, R"({"l1": 1.0})");
        auto bad = run_cli("enhance --config " + cfg + " --checkpoint " + base +
                           "/pre/pretrained.lensckpt --out " + base + "/bad");
        CHECK(bad.exit_code == 1);
        CHECK(bad.err.find("l2") != std::string::npos);
    }
    SUBCASE("missing checkpoint exits 3") {
        auto bad = run_cli("eval --config " + cfg + " --checkpoint " + base +
                           "/nope.lensckpt --out " + base + "/bad");
        CHECK(bad.exit_code == 3);
    }
    SUBCASE("unknown config key exits 1") {
        std::ofstream(cfg) << R"({"seed": 1, "coprus": {}})";
        auto bad = run_cli("pretrain --config " + cfg + " --out " + base + "/bad");
        CHECK(bad.exit_code == 1);
        CHECK(bad.err.find("coprus") != std::string::npos);
    }
    SUBCASE("unknown sweep axis exits 1") {
        write_tiny_config(cfg);
        auto bad = run_cli("sweep --config " + cfg + " --checkpoint " + base +
                           "/pre/pretrained.lensckpt --axis nope --grid 1 --out " + base +
                           "/bad");
        CHECK(bad.exit_code == 1);
    }
    SUBCASE("LENS_SEED overrides the config seed in the echoed config") {
        auto r = run_cli("gen --config " + cfg + " --out " + base + "/seeded",
                         "LENS_SEED=4242");
        CHECK(r.exit_code == 0);
        nlohmann::json echoed;
        std::ifstream(base + "/seeded/resolved_config.json") >> echoed;
        CHECK(echoed.at("seed").get<std::uint64_t>() == 4242);
    }

    fs::remove_all(base);
}

TEST_CASE("eval on an untrained checkpoint reports chance-level retrieval") {
    const std::string base = "/tmp/lens_cli_chance";
    fs::remove_all(base);
    fs::create_directories(base);
    const std::string cfg = base + "/config.json";
    {
        std::ofstream out(cfg);
        out << R"({
  "seed": 5,
  "corpus": {"semantic_vocab": 12, "ctx": 24, "max_len": 10, "branching": 3,
              "probing_per_lang": 30, "manipulation_per_lang": 16,
              "pretrain_sequences": 100},
  "model": {"d_model": 32, "n_layers": 3, "n_heads": 2, "d_ff": 48},
  "train": {"pretrain_steps": 0, "epochs": 0},
  "eval": {"fidelity_prompts": 4, "retrieval_pairs": 50, "drift_sentences": 4,
            "pca_samples": 4}
})";
    }
    auto pre = run_cli("pretrain --config " + cfg + " --out " + base + "/pre");
    CHECK(pre.exit_code == 0);
    auto ev = run_cli("eval --config " + cfg + " --checkpoint " + base +
                      "/pre/pretrained.lensckpt --run-id c --out " + base + "/eval");
    CHECK(ev.exit_code == 0);
    nlohmann::json report;
    std::ifstream(base + "/eval/eval_c_s5.json") >> report;
    CHECK(report.at("retrieval_accuracy").get<double>() <= 0.05);
    fs::remove_all(base);
}
