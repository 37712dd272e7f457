#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "salab/checkpoint_io.hpp"
#include "salab/corpus.hpp"
#include "salab/digest.hpp"
#include "salab/experiment.hpp"
#include "salab/perplexity.hpp"
#include "salab/train_toy.hpp"
#include "test_util.hpp"

using namespace salab;
using namespace salab::test;
namespace fs = std::filesystem;

namespace {

std::string write_tmp(const std::string& name, const std::string& content) {
    const std::string path = test_tmp_dir() + "/" + name;
    std::ofstream out(path, std::ios::binary);
    out << content;
    return path;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool ckpt_equal(const Checkpoint& a, const Checkpoint& b) {
    auto eq = [](const Vec& x, const Vec& y) {
        return x.size() == y.size() &&
               std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
    };
    if (!eq(a.token_embedding.data, b.token_embedding.data)) return false;
    if (!eq(a.lm_head.data, b.lm_head.data)) return false;
    if (!eq(a.final_norm_gain, b.final_norm_gain)) return false;
    for (size_t l = 0; l < a.layers.size(); ++l) {
        if (!eq(a.layers[l].attn.w_q.data, b.layers[l].attn.w_q.data)) return false;
        if (!eq(a.layers[l].mlp.w_out.data, b.layers[l].mlp.w_out.data)) return false;
    }
    return true;
}

} // namespace

TEST_CASE("corpus ingestion") {
    SUBCASE("byte tokens and tail split") {
        std::string text(1000, 'x');
        for (size_t i = 0; i < text.size(); ++i) text[i] = static_cast<char>('a' + i % 7);
        const Corpus c = corpus_from_bytes(text, 0.9);
        CHECK(c.tokens.size() == 1000);
        CHECK(c.train_len == 900);
        CHECK(c.heldout_tokens().size() == 100);
    }
    SUBCASE("ascii bytes map to byte values") {
        const Corpus c = corpus_from_bytes("abc", 0.67);
        CHECK(c.tokens == std::vector<int>{97, 98, 99});
    }
    SUBCASE("digest is stable") {
        const std::string path = write_tmp("corpus_a.txt", "hello corpus digest");
        const Corpus a = ingest_corpus(path, 0.5);
        const Corpus b = ingest_corpus(path, 0.5);
        CHECK(a.digest == b.digest);
        CHECK_FALSE(a.digest.empty());
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(corpus_from_bytes("", 0.5), std::invalid_argument);
        CHECK_THROWS_AS(corpus_from_bytes("abc", 0.0), std::invalid_argument);
        CHECK_THROWS_AS(corpus_from_bytes("abc", 1.0), std::invalid_argument);
        CHECK_THROWS_AS(ingest_corpus("/nonexistent/path.txt", 0.5), std::runtime_error);
    }
    SUBCASE("optional bos token") {
        const Corpus c = corpus_from_bytes("ab", 0.5, true);
        CHECK(c.tokens == std::vector<int>{256, 97, 98});
        CHECK(c.vocab_size() == 257);
    }
}

TEST_CASE("toy training") {
    const std::string corpus_path = data_dir() + "/corpus.txt";
    const Corpus corpus = ingest_corpus(corpus_path, 0.9);
    ModelConfig cfg = tiny_config();

    SUBCASE("zero steps returns the seeded initialization") {
        TrainOptions opts;
        opts.steps = 0;
        opts.seed = 5;
        const TrainResult r = train_toy_model(cfg, corpus, opts);
        CHECK(ckpt_equal(r.ckpt, init_checkpoint(cfg, 5)));
        CHECK(r.loss_curve.empty());
    }
    SUBCASE("same seed twice is bit-identical") {
        TrainOptions opts;
        opts.steps = 10;
        opts.seed = 6;
        opts.window = 16;
        const TrainResult a = train_toy_model(cfg, corpus, opts);
        const TrainResult b = train_toy_model(cfg, corpus, opts);
        CHECK(ckpt_equal(a.ckpt, b.ckpt));
        CHECK(a.loss_curve == b.loss_curve);
    }
    SUBCASE("loss drops from the uniform baseline") {
        TrainOptions opts;
        opts.steps = 120;
        opts.seed = 7;
        opts.window = 24;
        opts.lr = 3e-3;
        const TrainResult r = train_toy_model(cfg, corpus, opts);
        const double first = r.loss_curve.front();
        double tail = 0.0;
        for (size_t i = r.loss_curve.size() - 10; i < r.loss_curve.size(); ++i)
            tail += r.loss_curve[i];
        tail /= 10.0;
        CHECK(first == doctest::Approx(std::log(256.0)).epsilon(0.05));
        CHECK(tail < first - 0.5);
    }
    SUBCASE("divergence raises with the step index") {
        TrainOptions opts;
        opts.steps = 60;
        opts.seed = 8;
        opts.window = 8;
        opts.lr = 1e18;
        opts.grad_clip = 0.0; // disabled
        CHECK_THROWS_WITH_AS(train_toy_model(cfg, corpus, opts), doctest::Contains("step"),
                             std::runtime_error);
    }
    SUBCASE("window longer than the train split is rejected") {
        const Corpus small = corpus_from_bytes(std::string(20, 'a'), 0.5);
        TrainOptions opts;
        opts.steps = 1;
        CHECK_THROWS_AS(train_toy_model(cfg, small, opts), std::invalid_argument);
    }
}

TEST_CASE("checkpoint round trip and format errors") {
    const Checkpoint ckpt = tiny_ckpt(9);
    const std::string path = test_tmp_dir() + "/model.salb";
    save_checkpoint(ckpt, path);

    SUBCASE("round trip preserves config and float32 tensors") {
        const Checkpoint back = load_checkpoint(path);
        CHECK(back.config.n_layers == ckpt.config.n_layers);
        CHECK(back.config.d_model == ckpt.config.d_model);
        CHECK(back.config.activation == ckpt.config.activation);
        CHECK(back.config.norm_eps == ckpt.config.norm_eps);
        for (size_t i = 0; i < ckpt.token_embedding.data.size(); ++i)
            CHECK(back.token_embedding.data[i] ==
                  static_cast<double>(static_cast<float>(ckpt.token_embedding.data[i])));
        for (size_t i = 0; i < ckpt.layers[0].mlp.w_out.data.size(); ++i)
            CHECK(back.layers[0].mlp.w_out.data[i] ==
                  static_cast<double>(static_cast<float>(ckpt.layers[0].mlp.w_out.data[i])));
        // derived caches rebuilt on load
        CHECK(back.layers[0].mlp.w_out_col_norms.size() ==
              static_cast<size_t>(ckpt.config.d_hidden));
    }
    SUBCASE("corrupted magic") {
        std::string bytes = read_file(path);
        bytes[0] = 'X';
        const std::string bad = write_tmp("bad_magic.salb", bytes);
        CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("magic"), std::runtime_error);
    }
    SUBCASE("unsupported version") {
        std::string bytes = read_file(path);
        bytes[4] = 99;
        const std::string bad = write_tmp("bad_version.salb", bytes);
        CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("version"),
                             std::runtime_error);
    }
    SUBCASE("truncated tensor data") {
        std::string bytes = read_file(path);
        bytes.resize(bytes.size() / 2);
        const std::string bad = write_tmp("truncated.salb", bytes);
        CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("truncated"),
                             std::runtime_error);
    }
    SUBCASE("manifest must cover the config-derived tensor set") {
        // a container with one tensor missing fails the cross-check
        std::vector<std::pair<std::string, NamedTensor>> tensors;
        NamedTensor t;
        t.shape = {2, 2};
        t.data = {1, 2, 3, 4};
        tensors.emplace_back("token_embedding", t);
        const std::string header =
            std::string("{\"kind\":\"model\",\"config\":") + model_config_to_json(ckpt.config) + "}";
        const std::string bad = test_tmp_dir() + "/incomplete.salb";
        write_container(bad, header, tensors);
        CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("manifest"),
                             std::runtime_error);
    }
}

TEST_CASE("experiment recipes") {
    const std::string corpus_path = data_dir() + "/corpus.txt";
    const std::string out_a = test_tmp_dir() + "/exp_a";
    const std::string out_b = test_tmp_dir() + "/exp_b";

    ExperimentConfig cfg;
    cfg.seed = 3;
    cfg.corpus_path = corpus_path;
    cfg.out_dir = out_a;
    ToyTrainSpec spec;
    spec.config = tiny_config();
    spec.steps = 30;
    spec.window = 16;
    cfg.train = spec;
    cfg.calibration_tokens = 96;
    cfg.eval_tokens = 256;
    cfg.sweep.targets = {0.05, 0.1, 0.2, 0.4};
    cfg.recipes = {"cett-sweep", "kv-ablation"};
    cfg.frontier.epochs = 1;
    cfg.predictor_train_tokens = 96;
    cfg.predictor_eval_tokens = 64;

    SUBCASE("cett-sweep rows are monotone and the kv table has its seven rows") {
        const ExperimentResult res = run_experiment(cfg);
        CHECK(res.complete);
        const auto sweep = read_report_csv(out_a + "/cett_sweep.csv");
        // per layer and mode: sparsity weakly increases with the target
        for (const std::string mode : {"universal", "layer_wise"}) {
            for (int l = 0; l < spec.config.n_layers; ++l) {
                double prev_sparsity = -1.0, prev_threshold = -1.0;
                for (double target : cfg.sweep.targets) {
                    for (const auto& row : sweep) {
                        if (row.strategy != mode || row.layer != std::to_string(l) ||
                            row.cett_target != target)
                            continue;
                        CHECK(row.sparsity >= prev_sparsity - 1e-12);
                        CHECK(row.threshold >= prev_threshold - 1e-12);
                        prev_sparsity = row.sparsity;
                        prev_threshold = row.threshold;
                    }
                }
                CHECK(prev_sparsity >= 0.0);
            }
        }
        const auto kv = read_report_csv(out_a + "/kv_ablation.csv");
        REQUIRE(kv.size() == 7);
        const std::vector<std::string> expect_names{
            "dense",        "head_mask_only",          "kv_skipping",
            "only_skip_k",  "only_skip_v",             "kv_skipping_layer_filter",
            "only_skip_v_layer_filter"};
        for (size_t i = 0; i < expect_names.size(); ++i) CHECK(kv[i].policy == expect_names[i]);
        for (const auto& row : kv) CHECK(row.perplexity > 0.0);

        // manifest lists every file with a digest
        const std::string manifest = read_file(out_a + "/manifest.json");
        CHECK(manifest.find("cett_sweep.csv") != std::string::npos);
        CHECK(manifest.find("kv_ablation.csv") != std::string::npos);
        CHECK(manifest.find("config_digest") != std::string::npos);
    }
    SUBCASE("seeded runs are byte-identical") {
        ExperimentConfig cfg_b = cfg;
        cfg_b.out_dir = out_b;
        cfg.recipes = {"cett-sweep", "predictor-frontier"};
        cfg_b.recipes = cfg.recipes;
        run_experiment(cfg);
        run_experiment(cfg_b);
        CHECK(read_file(out_a + "/cett_sweep.csv") == read_file(out_b + "/cett_sweep.csv"));
        CHECK(read_file(out_a + "/predictor_frontier.csv") ==
              read_file(out_b + "/predictor_frontier.csv"));
        CHECK_FALSE(read_file(out_a + "/cett_sweep.csv").empty());
    }
    SUBCASE("empty recipe list writes only the manifest") {
        ExperimentConfig empty = cfg;
        empty.out_dir = test_tmp_dir() + "/exp_empty";
        empty.recipes = {};
        const ExperimentResult res = run_experiment(empty);
        CHECK(res.complete);
        REQUIRE(res.files.size() == 1);
        CHECK(fs::path(res.files[0]).filename() == "manifest.json");
    }
    SUBCASE("failing stage is named") {
        ExperimentConfig bad = cfg;
        bad.out_dir = test_tmp_dir() + "/exp_bad";
        bad.corpus_path = "/nonexistent/corpus.txt";
        CHECK_THROWS_WITH_AS(run_experiment(bad), doctest::Contains("stage"), std::runtime_error);
    }
    SUBCASE("unknown recipe is rejected") {
        ExperimentConfig bad = cfg;
        bad.recipes = {"mystery"};
        CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    }
}

TEST_CASE("report merge") {
    std::vector<ReportRow> a(1), b(2);
    a[0].experiment = "x";
    a[0].layer = "0";
    a[0].perplexity = 1.5;
    b[0].experiment = "y";
    b[0].layer = "mean";
    b[1].experiment = "y";
    b[1].layer = "1";
    b[1].strategy = "topk@0.05";
    const std::string pa = test_tmp_dir() + "/rep_a.csv";
    const std::string pb = test_tmp_dir() + "/rep_b.csv";
    const std::string pm = test_tmp_dir() + "/rep_merged.csv";
    write_report_csv(a, pa);
    write_report_csv(b, pb);
    merge_reports({pa, pb}, pm);
    const auto rows = read_report_csv(pm);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].experiment == "x");
    CHECK(rows[0].perplexity == 1.5);
    CHECK(std::isnan(rows[0].recall));
    CHECK(rows[2].strategy == "topk@0.05");
}

TEST_CASE("perplexity on lazy skipping matches policy none") {
    const Checkpoint ckpt = tiny_ckpt(95);
    Rng rng(96);
    std::vector<int> toks(120);
    for (int& t : toks) t = rng.uniform_int(ckpt.config.vocab_size);

    // mask via threshold from live norms
    const ForwardResult r = dense_forward(ckpt, std::vector<int>(toks.begin(), toks.begin() + 30),
                                          TraceLevel::full);
    Vec norms;
    for (const auto& recs : r.trace.tokens)
        for (int l = 0; l < ckpt.config.n_layers; ++l)
            for (double n : recs[l].head_out_norms) norms.push_back(n);
    std::sort(norms.begin(), norms.end());
    const SelectionStrategy masked = SelectionStrategy::with_threshold({norms[norms.size() / 2]});
    const SelectionStrategy dense = SelectionStrategy::dense_all();

    const double ppl_none = perplexity(ckpt, toks, dense, masked,
                                       {SkipMode::none, Substitution::raw_substitute, std::nullopt});
    const double ppl_lazy = perplexity(ckpt, toks, dense, masked,
                                       {SkipMode::skip_kv, Substitution::defer_lazy, std::nullopt});
    CHECK(ppl_none == doctest::Approx(ppl_lazy).epsilon(1e-12));
}
