// salab: dynamic-activation laboratory for a small instrumented decoder.
// Subcommands cover the full workflow: train a toy model, calibrate
// truncation thresholds, evaluate sparse execution, train and score activity
// predictors, generate text, and run scripted experiment recipes.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "salab/checkpoint_io.hpp"
#include "salab/experiment.hpp"
#include "salab/perplexity.hpp"
#include "salab/predictor.hpp"

using namespace salab;
namespace fs = std::filesystem;

namespace {

std::string out_dir_default() {
    const char* env = std::getenv("SALAB_OUT_DIR");
    return env && *env ? env : ".";
}

std::string in_out_dir(const std::string& name) {
    return (fs::path(out_dir_default()) / name).string();
}

SelectionStrategy make_strategy(const std::string& kind, const std::string& table_path,
                                double eps, int topk) {
    if (kind == "dense") return SelectionStrategy::dense_all();
    if (kind == "topk") return SelectionStrategy::with_topk(topk);
    if (kind == "threshold") {
        if (!table_path.empty()) {
            const ThresholdTable tt = load_threshold_table(table_path);
            return SelectionStrategy::with_threshold(tt.thresholds);
        }
        return SelectionStrategy::with_threshold({eps});
    }
    throw std::invalid_argument("unknown strategy kind: " + kind);
}

SkipPolicy make_policy(const std::string& mode, const std::string& substitution,
                       double layer_filter) {
    SkipPolicy p;
    if (mode == "none")
        p.mode = SkipMode::none;
    else if (mode == "skip_kv")
        p.mode = SkipMode::skip_kv;
    else if (mode == "skip_k")
        p.mode = SkipMode::skip_k;
    else if (mode == "skip_v")
        p.mode = SkipMode::skip_v;
    else
        throw std::invalid_argument("unknown kv policy: " + mode);
    p.substitution = substitution == "lazy" ? Substitution::defer_lazy : Substitution::raw_substitute;
    if (layer_filter >= 0.0) p.layer_filter_min_sparsity = layer_filter;
    return p;
}

std::vector<int> cap_tokens(std::vector<int> tokens, long budget) {
    if (budget > 0 && static_cast<long>(tokens.size()) > budget) tokens.resize(budget);
    return tokens;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"dynamic-activation laboratory for a toy decoder"};
    app.require_subcommand(1);

    // ---- train-toy ----
    auto* train_cmd = app.add_subcommand("train-toy", "train a byte-level toy model");
    std::string tt_corpus, tt_out = in_out_dir("toy.salb"), tt_activation = "silu";
    int tt_steps = 2000, tt_layers = 4, tt_dmodel = 128, tt_heads = 8, tt_dhidden = 512;
    int tt_context = 128, tt_window = 0, tt_log = 0;
    double tt_lr = 1e-3, tt_split = 0.9;
    uint64_t tt_seed = 0;
    bool tt_no_rope = false;
    train_cmd->add_option("--corpus", tt_corpus, "UTF-8 text file")->required();
    train_cmd->add_option("--out", tt_out, "checkpoint path");
    train_cmd->add_option("--steps", tt_steps);
    train_cmd->add_option("--lr", tt_lr);
    train_cmd->add_option("--seed", tt_seed);
    train_cmd->add_option("--layers", tt_layers);
    train_cmd->add_option("--d-model", tt_dmodel);
    train_cmd->add_option("--heads", tt_heads);
    train_cmd->add_option("--d-hidden", tt_dhidden);
    train_cmd->add_option("--context", tt_context);
    train_cmd->add_option("--window", tt_window, "training window (default: context)");
    train_cmd->add_option("--activation", tt_activation, "silu | relu | relu_squared");
    train_cmd->add_option("--split", tt_split, "train fraction");
    train_cmd->add_option("--log-every", tt_log);
    train_cmd->add_flag("--no-rope", tt_no_rope);

    // ---- calibrate ----
    auto* cal_cmd = app.add_subcommand("calibrate", "search truncation thresholds for a CETT target");
    std::string c_ckpt, c_corpus, c_mode = "layerwise", c_block = "mlp";
    std::string c_out = in_out_dir("thresholds.json"), c_export_trace;
    double c_cett = 0.2, c_split = 0.9;
    long c_tokens = 4096;
    bool c_strict = false;
    cal_cmd->add_option("--ckpt", c_ckpt)->required();
    cal_cmd->add_option("--corpus", c_corpus)->required();
    cal_cmd->add_option("--cett", c_cett, "CETT target in [0,1)");
    cal_cmd->add_option("--mode", c_mode, "universal | layerwise");
    cal_cmd->add_option("--block", c_block, "mlp | attention");
    cal_cmd->add_option("--tokens", c_tokens, "calibration token budget");
    cal_cmd->add_option("--out", c_out, "threshold table (json)");
    cal_cmd->add_option("--export-trace", c_export_trace, "also write a jsonl trace file");
    cal_cmd->add_option("--split", c_split);
    cal_cmd->add_flag("--strict-max", c_strict, "bound the max CETT instead of the mean");

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "perplexity under a sparse configuration");
    std::string e_ckpt, e_corpus, e_mlp = "dense", e_attn = "dense";
    std::string e_mlp_table, e_attn_table, e_policy = "none", e_subst = "raw", e_out;
    double e_mlp_eps = 0.0, e_attn_eps = 0.0, e_layer_filter = -1.0, e_split = 0.9;
    int e_mlp_topk = 0, e_attn_topk = 0;
    long e_tokens = 0, e_cal_tokens = 1024;
    eval_cmd->add_option("--ckpt", e_ckpt)->required();
    eval_cmd->add_option("--corpus", e_corpus)->required();
    eval_cmd->add_option("--mlp-strategy", e_mlp, "dense | threshold | topk");
    eval_cmd->add_option("--attn-strategy", e_attn, "dense | threshold | topk");
    eval_cmd->add_option("--mlp-table", e_mlp_table, "threshold table for the mlp block");
    eval_cmd->add_option("--attn-table", e_attn_table, "threshold table for attention");
    eval_cmd->add_option("--mlp-eps", e_mlp_eps);
    eval_cmd->add_option("--attn-eps", e_attn_eps);
    eval_cmd->add_option("--mlp-topk", e_mlp_topk);
    eval_cmd->add_option("--attn-topk", e_attn_topk);
    eval_cmd->add_option("--kv-policy", e_policy, "none | skip_kv | skip_k | skip_v");
    eval_cmd->add_option("--substitution", e_subst, "raw | lazy");
    eval_cmd->add_option("--layer-filter", e_layer_filter,
                         "apply the policy only above this head sparsity");
    eval_cmd->add_option("--tokens", e_tokens, "heldout token cap (0 = all)");
    eval_cmd->add_option("--cal-tokens", e_cal_tokens, "tokens for the layer-filter estimate");
    eval_cmd->add_option("--split", e_split);
    eval_cmd->add_option("--out", e_out, "append a csv report row here");

    // ---- train-predictor ----
    auto* tp_cmd = app.add_subcommand("train-predictor", "fit per-layer activity predictors");
    std::string tp_ckpt, tp_corpus, tp_table, tp_target = "mlp", tp_arch = "two_linear";
    std::string tp_loss = "bce", tp_init = "random", tp_wiring = "serial";
    std::string tp_out = in_out_dir("predictor");
    double tp_lr = 1e-3, tp_alpha = 0.25, tp_gamma = 2.0, tp_split = 0.9;
    int tp_batch = 64, tp_epochs = 4, tp_hidden = 0;
    long tp_tokens = 8192;
    uint64_t tp_seed = 0;
    tp_cmd->add_option("--ckpt", tp_ckpt)->required();
    tp_cmd->add_option("--corpus", tp_corpus)->required();
    tp_cmd->add_option("--table", tp_table, "labeling threshold table")->required();
    tp_cmd->add_option("--target", tp_target, "mlp | attention");
    tp_cmd->add_option("--arch", tp_arch, "two_linear | mlp_shaped");
    tp_cmd->add_option("--loss", tp_loss, "bce | focal");
    tp_cmd->add_option("--alpha", tp_alpha, "focal alpha");
    tp_cmd->add_option("--gamma", tp_gamma, "focal gamma");
    tp_cmd->add_option("--batch", tp_batch);
    tp_cmd->add_option("--epochs", tp_epochs);
    tp_cmd->add_option("--lr", tp_lr);
    tp_cmd->add_option("--hidden", tp_hidden, "hidden width (0 = d_model)");
    tp_cmd->add_option("--init", tp_init, "random | down_projection");
    tp_cmd->add_option("--wiring", tp_wiring, "serial | prepositioned");
    tp_cmd->add_option("--tokens", tp_tokens, "training token budget");
    tp_cmd->add_option("--out", tp_out, "output prefix; writes <prefix>.l<i>.salb");
    tp_cmd->add_option("--seed", tp_seed);
    tp_cmd->add_option("--split", tp_split);

    // ---- eval-predictor ----
    auto* ep_cmd = app.add_subcommand("eval-predictor", "score predictors on held-out traces");
    std::string ep_ckpt, ep_corpus, ep_table, ep_prefix, ep_out;
    double ep_split = 0.9, ep_topk_sparsity = -1.0;
    long ep_tokens = 2048;
    ep_cmd->add_option("--ckpt", ep_ckpt)->required();
    ep_cmd->add_option("--corpus", ep_corpus)->required();
    ep_cmd->add_option("--table", ep_table, "labeling threshold table")->required();
    ep_cmd->add_option("--predictors", ep_prefix, "prefix used at training time")->required();
    ep_cmd->add_option("--tokens", ep_tokens);
    ep_cmd->add_option("--topk-sparsity", ep_topk_sparsity,
                       "override selection with topk at this predicted sparsity");
    ep_cmd->add_option("--split", ep_split);
    ep_cmd->add_option("--out", ep_out, "csv report path");

    // ---- generate ----
    auto* gen_cmd = app.add_subcommand("generate", "greedy decoding from a byte prompt");
    std::string g_ckpt, g_prompt_file, g_out, g_mlp = "dense", g_attn = "dense";
    std::string g_mlp_table, g_attn_table, g_policy = "none", g_subst = "raw";
    double g_mlp_eps = 0.0, g_attn_eps = 0.0;
    int g_n = 64, g_mlp_topk = 0, g_attn_topk = 0;
    gen_cmd->add_option("--ckpt", g_ckpt)->required();
    gen_cmd->add_option("--prompt-file", g_prompt_file, "prompt bytes")->required();
    gen_cmd->add_option("--n", g_n, "tokens to generate");
    gen_cmd->add_option("--mlp-strategy", g_mlp);
    gen_cmd->add_option("--attn-strategy", g_attn);
    gen_cmd->add_option("--mlp-table", g_mlp_table);
    gen_cmd->add_option("--attn-table", g_attn_table);
    gen_cmd->add_option("--mlp-eps", g_mlp_eps);
    gen_cmd->add_option("--attn-eps", g_attn_eps);
    gen_cmd->add_option("--mlp-topk", g_mlp_topk);
    gen_cmd->add_option("--attn-topk", g_attn_topk);
    gen_cmd->add_option("--kv-policy", g_policy);
    gen_cmd->add_option("--substitution", g_subst);
    gen_cmd->add_option("--out", g_out, "write generated bytes here (default stdout)");

    // ---- report ----
    auto* rep_cmd = app.add_subcommand("report", "merge csv reports");
    std::vector<std::string> r_inputs;
    std::string r_out = in_out_dir("merged.csv");
    rep_cmd->add_option("inputs", r_inputs, "csv files")->required();
    rep_cmd->add_option("--out", r_out);

    // ---- experiment ----
    auto* exp_cmd = app.add_subcommand("experiment", "run a scripted recipe config");
    std::string x_config;
    exp_cmd->add_option("--config", x_config, "experiment config (json)")->required();

    CLI11_PARSE(app, argc, argv);

    if (train_cmd->parsed()) {
        const Corpus corpus = ingest_corpus(tt_corpus, tt_split);
        ModelConfig cfg;
        cfg.n_layers = tt_layers;
        cfg.d_model = tt_dmodel;
        cfg.n_heads = tt_heads;
        cfg.d_head = tt_dmodel / tt_heads;
        cfg.d_hidden = tt_dhidden;
        cfg.max_seq_len = tt_context;
        cfg.activation = activation_from_string(tt_activation);
        cfg.rope_enabled = !tt_no_rope;
        TrainOptions opts;
        opts.steps = tt_steps;
        opts.lr = tt_lr;
        opts.seed = tt_seed;
        opts.window = tt_window;
        opts.log_every = tt_log;
        const TrainResult res = train_toy_model(cfg, corpus, opts);
        save_checkpoint(res.ckpt, tt_out);
        const double heldout_ppl =
            perplexity(res.ckpt, corpus.heldout_tokens(), SelectionStrategy::dense_all(),
                       SelectionStrategy::dense_all(), SkipPolicy{});
        std::printf("checkpoint %s\n", tt_out.c_str());
        if (!res.loss_curve.empty())
            std::printf("final train loss %.4f\n", res.loss_curve.back());
        std::printf("heldout perplexity %.3f\n", heldout_ppl);
        return 0;
    }

    if (cal_cmd->parsed()) {
        const Corpus corpus = ingest_corpus(c_corpus, c_split);
        auto ckpt = std::make_shared<const Checkpoint>(load_checkpoint(c_ckpt));
        const std::vector<int> tokens = cap_tokens(corpus.train_tokens(), c_tokens);
        const CalibrationSet cal = collect_calibration(ckpt, tokens, TraceLevel::full);
        SearchOptions sopts;
        if (c_strict) sopts.aggregate = CettAggregate::max;
        const ThresholdTable tt = search_threshold(
            cal, *ckpt, c_block == "attention" ? BlockKind::attention : BlockKind::mlp,
            c_mode == "universal" ? ThresholdMode::universal : ThresholdMode::layer_wise, c_cett,
            sopts);
        save_threshold_table(tt, c_out);
        if (!c_export_trace.empty()) export_trace_jsonl(cal, c_export_trace);
        std::printf("table %s\n", c_out.c_str());
        for (size_t l = 0; l < tt.achieved_sparsity.size(); ++l)
            std::printf("layer %zu threshold %.6g sparsity %.4f cett %.4f\n", l,
                        tt.threshold_for_layer(static_cast<int>(l)), tt.achieved_sparsity[l],
                        tt.achieved_cett[l]);
        return 0;
    }

    if (eval_cmd->parsed()) {
        const Corpus corpus = ingest_corpus(e_corpus, e_split);
        const Checkpoint ckpt = load_checkpoint(e_ckpt);
        const SelectionStrategy mlp_s = make_strategy(e_mlp, e_mlp_table, e_mlp_eps, e_mlp_topk);
        const SelectionStrategy attn_s =
            make_strategy(e_attn, e_attn_table, e_attn_eps, e_attn_topk);
        const SkipPolicy policy = make_policy(e_policy, e_subst, e_layer_filter);
        std::vector<double> layer_sparsity;
        if (policy.layer_filter_min_sparsity.has_value()) {
            // static per-layer estimate from a short calibration pass
            auto shared = std::make_shared<const Checkpoint>(ckpt);
            const CalibrationSet cal = collect_calibration(
                shared, cap_tokens(corpus.train_tokens(), e_cal_tokens), TraceLevel::full);
            ThresholdTable probe;
            probe.block = BlockKind::attention;
            probe.mode = ThresholdMode::universal;
            probe.thresholds = attn_s.thresholds.empty() ? std::vector<double>{e_attn_eps}
                                                         : attn_s.thresholds;
            layer_sparsity = measure_sparsity(cal, probe).per_layer_sparsity;
        }
        const double ppl =
            perplexity(ckpt, cap_tokens(corpus.heldout_tokens(), e_tokens), mlp_s, attn_s, policy,
                       layer_sparsity);
        std::printf("perplexity %.6f\n", ppl);
        if (!e_out.empty()) {
            ReportRow row;
            row.experiment = "eval";
            row.layer = "mean";
            row.perplexity = ppl;
            row.policy = e_policy;
            row.strategy = e_mlp + "/" + e_attn;
            write_report_csv({row}, e_out);
        }
        return 0;
    }

    if (tp_cmd->parsed()) {
        const Corpus corpus = ingest_corpus(tp_corpus, tp_split);
        const Checkpoint ckpt = load_checkpoint(tp_ckpt);
        const ThresholdTable table = load_threshold_table(tp_table);
        const bool is_mlp = tp_target != "attention";
        const PredictorWiring wiring =
            tp_wiring == "prepositioned" ? PredictorWiring::prepositioned : PredictorWiring::serial;
        const std::vector<int> tokens = cap_tokens(corpus.train_tokens(), tp_tokens);
        const TrainingData data = collect_training_data(
            ckpt, tokens, is_mlp ? &table : nullptr, is_mlp ? nullptr : &table, wiring);
        const std::vector<LabeledDataset>& sets = is_mlp ? data.mlp : data.attn;
        for (int l = 0; l < ckpt.config.n_layers; ++l) {
            PredictorArch arch;
            arch.kind = tp_arch == "mlp_shaped" ? PredictorArchKind::mlp_shaped
                                                : PredictorArchKind::two_linear;
            arch.input_dim = ckpt.config.d_model;
            arch.hidden_dim = tp_hidden > 0 ? tp_hidden : ckpt.config.d_model;
            arch.output_dim = is_mlp ? ckpt.config.d_hidden : ckpt.config.n_heads;
            TrainPredictorOptions opts;
            opts.batch_size = tp_batch;
            opts.lr = tp_lr;
            opts.epochs = tp_epochs;
            opts.seed = tp_seed + static_cast<uint64_t>(l) * 1000003ull;
            opts.loss = tp_loss == "focal" ? LossKind::focal : LossKind::bce;
            opts.focal = {tp_alpha, tp_gamma};
            if (tp_init == "down_projection") {
                opts.init = InitKind::down_projection;
                opts.down_projection_source = &ckpt.layers[l].mlp;
            }
            const PredictorTrainResult res = train_predictor(sets[l], arch, opts);
            const std::string path = tp_out + ".l" + std::to_string(l) + ".salb";
            save_predictor(res.model, path);
            std::printf("layer %d loss %.5f -> %s\n", l, res.final_loss, path.c_str());
        }
        return 0;
    }

    if (ep_cmd->parsed()) {
        const Corpus corpus = ingest_corpus(ep_corpus, ep_split);
        const Checkpoint ckpt = load_checkpoint(ep_ckpt);
        const ThresholdTable table = load_threshold_table(ep_table);
        std::vector<PredictorModel> models;
        for (int l = 0; l < ckpt.config.n_layers; ++l)
            models.push_back(load_predictor(ep_prefix + ".l" + std::to_string(l) + ".salb"));
        const bool is_mlp = models[0].target == PredictorTarget::mlp_neurons;
        const std::vector<int> tokens = cap_tokens(corpus.heldout_tokens(), ep_tokens);
        const TrainingData data =
            collect_training_data(ckpt, tokens, is_mlp ? &table : nullptr,
                                  is_mlp ? nullptr : &table, models[0].wiring,
                                  static_cast<long>(corpus.train_len));
        const std::vector<LabeledDataset>& sets = is_mlp ? data.mlp : data.attn;
        if (ep_topk_sparsity >= 0.0) {
            const int units = is_mlp ? ckpt.config.d_hidden : ckpt.config.n_heads;
            const int k =
                static_cast<int>(std::lround((1.0 - ep_topk_sparsity) * units));
            for (auto& m : models) m.selection = {SelectionRule::topk, 0.5, k};
        }
        const AggregateMetrics agg = evaluate_predictors(models, sets);
        std::vector<ReportRow> rows;
        for (size_t l = 0; l < agg.per_layer.size(); ++l) {
            const PredictorMetrics& pm = agg.per_layer[l];
            std::printf("layer %zu recall %.4f predicted_sparsity %.4f real %.4f delta %.4f\n", l,
                        pm.recall, pm.predicted_sparsity, pm.real_sparsity, pm.sparsity_delta);
            ReportRow row;
            row.experiment = "eval-predictor";
            row.layer = std::to_string(l);
            row.recall = pm.recall;
            row.predicted_sparsity = pm.predicted_sparsity;
            row.sparsity = pm.real_sparsity;
            row.sparsity_delta = pm.sparsity_delta;
            rows.push_back(std::move(row));
        }
        std::printf("macro recall %.4f micro recall %.4f\n", agg.macro.recall, agg.micro.recall);
        ReportRow mean;
        mean.experiment = "eval-predictor";
        mean.layer = "mean";
        mean.recall = agg.macro.recall;
        mean.predicted_sparsity = agg.macro.predicted_sparsity;
        mean.sparsity = agg.macro.real_sparsity;
        mean.sparsity_delta = agg.macro.sparsity_delta;
        rows.push_back(std::move(mean));
        if (!ep_out.empty()) write_report_csv(rows, ep_out);
        return 0;
    }

    if (gen_cmd->parsed()) {
        const Checkpoint ckpt = load_checkpoint(g_ckpt);
        std::ifstream pf(g_prompt_file, std::ios::binary);
        if (!pf) throw std::runtime_error("cannot open prompt file " + g_prompt_file);
        std::stringstream ss;
        ss << pf.rdbuf();
        const std::string prompt_bytes = ss.str();
        std::vector<int> prompt;
        for (unsigned char b : prompt_bytes) prompt.push_back(static_cast<int>(b));
        const int room = ckpt.config.max_seq_len - g_n;
        if (room < 1) throw std::invalid_argument("generation budget exceeds the context");
        if (static_cast<int>(prompt.size()) > room)
            prompt.erase(prompt.begin(), prompt.end() - room);
        const SelectionStrategy mlp_s = make_strategy(g_mlp, g_mlp_table, g_mlp_eps, g_mlp_topk);
        const SelectionStrategy attn_s =
            make_strategy(g_attn, g_attn_table, g_attn_eps, g_attn_topk);
        const SkipPolicy policy = make_policy(g_policy, g_subst, -1.0);
        const std::vector<int> out = generate(ckpt, prompt, mlp_s, attn_s, policy, g_n);
        std::string text;
        for (size_t i = prompt.size(); i < out.size(); ++i)
            text.push_back(static_cast<char>(out[i] & 0xff));
        if (g_out.empty()) {
            std::fwrite(text.data(), 1, text.size(), stdout);
            std::printf("\n");
        } else {
            std::ofstream of(g_out, std::ios::binary);
            of << text;
        }
        return 0;
    }

    if (rep_cmd->parsed()) {
        merge_reports(r_inputs, r_out);
        std::printf("merged %zu reports -> %s\n", r_inputs.size(), r_out.c_str());
        return 0;
    }

    if (exp_cmd->parsed()) {
        ExperimentConfig cfg = ExperimentConfig::from_json_file(x_config);
        if (cfg.out_dir == ".") cfg.out_dir = out_dir_default();
        const ExperimentResult res = run_experiment(cfg);
        for (const auto& f : res.files) std::printf("wrote %s\n", f.c_str());
        return 0;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const std::exception& e) {
        const char* sub = argc > 1 ? argv[1] : "salab";
        std::fprintf(stderr, "error [%s]: %s\n", sub, e.what());
        return 1;
    }
}
