#include "salab/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "salab/checkpoint_io.hpp"
#include "salab/digest.hpp"
#include "salab/perplexity.hpp"

namespace salab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

double parse_cell(const std::string& s) {
    if (s.empty()) return NAN;
    return std::stod(s);
}

constexpr const char* kColumns =
    "experiment,layer,cett_target,threshold,sparsity,perplexity,recall,"
    "predicted_sparsity,sparsity_delta,policy,strategy";

} // namespace

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("report: cannot open " + path);
    out << "# " << kReportSchema << "\n" << kColumns << "\n";
    for (const auto& r : rows) {
        out << r.experiment << ',' << r.layer << ',' << fmt(r.cett_target) << ','
            << fmt(r.threshold) << ',' << fmt(r.sparsity) << ',' << fmt(r.perplexity) << ','
            << fmt(r.recall) << ',' << fmt(r.predicted_sparsity) << ',' << fmt(r.sparsity_delta)
            << ',' << r.policy << ',' << r.strategy << "\n";
    }
}

std::vector<ReportRow> read_report_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("report: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("# ", 0) != 0 ||
        line.substr(2) != kReportSchema)
        throw std::runtime_error("report: unsupported schema in " + path);
    if (!std::getline(in, line) || line != kColumns)
        throw std::runtime_error("report: bad column header in " + path);
    std::vector<ReportRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        cells.resize(11);
        ReportRow r;
        r.experiment = cells[0];
        r.layer = cells[1];
        r.cett_target = parse_cell(cells[2]);
        r.threshold = parse_cell(cells[3]);
        r.sparsity = parse_cell(cells[4]);
        r.perplexity = parse_cell(cells[5]);
        r.recall = parse_cell(cells[6]);
        r.predicted_sparsity = parse_cell(cells[7]);
        r.sparsity_delta = parse_cell(cells[8]);
        r.policy = cells[9];
        r.strategy = cells[10];
        rows.push_back(std::move(r));
    }
    return rows;
}

void merge_reports(const std::vector<std::string>& inputs, const std::string& out_path) {
    std::vector<ReportRow> all;
    for (const auto& p : inputs) {
        auto rows = read_report_csv(p);
        all.insert(all.end(), rows.begin(), rows.end());
    }
    write_report_csv(all, out_path);
}

// ---- recipes ----

SweepResult cett_sweep(const CalibrationSet& cal, const Checkpoint& ckpt, const SweepOptions& opts) {
    SweepResult res;
    std::vector<ThresholdMode> modes;
    if (opts.universal) modes.push_back(ThresholdMode::universal);
    if (opts.layer_wise) modes.push_back(ThresholdMode::layer_wise);
    for (double target : opts.targets) {
        for (ThresholdMode mode : modes) {
            ThresholdTable tt = search_threshold(cal, ckpt, opts.block, mode, target);
            const int n_layers = static_cast<int>(tt.achieved_sparsity.size());
            for (int l = 0; l < n_layers; ++l) {
                ReportRow r;
                r.experiment = "cett-sweep";
                r.layer = std::to_string(l);
                r.cett_target = target;
                r.threshold = tt.threshold_for_layer(l);
                r.sparsity = tt.achieved_sparsity[l];
                r.strategy = to_string(mode);
                res.rows.push_back(std::move(r));
            }
            ReportRow mean;
            mean.experiment = "cett-sweep";
            mean.layer = "mean";
            mean.cett_target = target;
            mean.threshold = mode == ThresholdMode::universal ? tt.thresholds[0] : NAN;
            double s = 0.0;
            for (double v : tt.achieved_sparsity) s += v;
            mean.sparsity = n_layers > 0 ? s / n_layers : NAN;
            mean.strategy = to_string(mode);
            res.rows.push_back(std::move(mean));
            res.tables.push_back(std::move(tt));
        }
    }
    return res;
}

HeadMaskEvalResult head_mask_eval(const CalibrationSet& cal, const Checkpoint& ckpt,
                                  const std::vector<int>& eval_tokens, double cett_target) {
    HeadMaskEvalResult res;
    res.table = search_threshold(cal, ckpt, BlockKind::attention, ThresholdMode::layer_wise,
                                 cett_target);
    const SelectionStrategy dense = SelectionStrategy::dense_all();
    const SkipPolicy none{};

    ReportRow dense_row;
    dense_row.experiment = "head-mask-eval";
    dense_row.layer = "mean";
    dense_row.perplexity = perplexity(ckpt, eval_tokens, dense, dense, none);
    dense_row.sparsity = 0.0;
    dense_row.policy = "none";
    dense_row.strategy = "dense";
    res.rows.push_back(std::move(dense_row));

    const SelectionStrategy masked = SelectionStrategy::with_threshold(res.table.thresholds);
    double mean_sparsity = 0.0;
    for (double s : res.table.achieved_sparsity) mean_sparsity += s;
    mean_sparsity /= static_cast<double>(res.table.achieved_sparsity.size());

    ReportRow mask_row;
    mask_row.experiment = "head-mask-eval";
    mask_row.layer = "mean";
    mask_row.cett_target = cett_target;
    mask_row.perplexity = perplexity(ckpt, eval_tokens, dense, masked, none);
    mask_row.sparsity = mean_sparsity;
    mask_row.policy = "none";
    mask_row.strategy = "threshold";
    res.rows.push_back(std::move(mask_row));
    return res;
}

KvAblationResult kv_ablation(const CalibrationSet& cal, const Checkpoint& ckpt,
                             const std::vector<int>& eval_tokens, const KvAblationOptions& opts) {
    // pooled head-norm quantile pins the mask threshold so every variant runs
    // at matched head sparsity
    Vec norms;
    for (const auto& trace : cal.traces)
        for (const auto& token_recs : trace.tokens)
            for (const auto& rec : token_recs)
                norms.insert(norms.end(), rec.head_out_norms.begin(), rec.head_out_norms.end());
    if (norms.empty()) throw std::invalid_argument("kv_ablation: no head norms in calibration set");
    std::sort(norms.begin(), norms.end());
    size_t q = static_cast<size_t>(opts.head_sparsity * static_cast<double>(norms.size()));
    q = std::min(q, norms.size() - 1);

    KvAblationResult res;
    res.head_threshold = norms[q];

    ThresholdTable tt;
    tt.block = BlockKind::attention;
    tt.mode = ThresholdMode::universal;
    tt.thresholds = {res.head_threshold};
    const SparsityReport rep = measure_sparsity(cal, tt);
    res.layer_sparsity = rep.per_layer_sparsity;
    res.mean_head_sparsity = rep.mean_sparsity;

    const SelectionStrategy dense = SelectionStrategy::dense_all();
    const SelectionStrategy masked = SelectionStrategy::with_threshold({res.head_threshold});

    struct Variant {
        const char* name;
        bool mask;
        SkipPolicy policy;
    };
    const std::vector<Variant> variants = {
        {"dense", false, {}},
        {"head_mask_only", true, {SkipMode::none, Substitution::raw_substitute, std::nullopt}},
        {"kv_skipping", true, {SkipMode::skip_kv, Substitution::raw_substitute, std::nullopt}},
        {"only_skip_k", true, {SkipMode::skip_k, Substitution::raw_substitute, std::nullopt}},
        {"only_skip_v", true, {SkipMode::skip_v, Substitution::raw_substitute, std::nullopt}},
        {"kv_skipping_layer_filter", true,
         {SkipMode::skip_kv, Substitution::raw_substitute, opts.layer_filter}},
        {"only_skip_v_layer_filter", true,
         {SkipMode::skip_v, Substitution::raw_substitute, opts.layer_filter}},
    };
    for (const auto& v : variants) {
        ReportRow r;
        r.experiment = "kv-ablation";
        r.layer = "mean";
        r.threshold = v.mask ? res.head_threshold : NAN;
        r.sparsity = v.mask ? res.mean_head_sparsity : 0.0;
        r.perplexity = perplexity(ckpt, eval_tokens, dense, v.mask ? masked : dense, v.policy,
                                  res.layer_sparsity);
        r.policy = v.name;
        r.strategy = v.mask ? "threshold" : "dense";
        res.rows.push_back(std::move(r));
    }
    return res;
}

FrontierResult predictor_frontier(const Checkpoint& ckpt, const std::vector<int>& train_tokens,
                                  const std::vector<int>& heldout_tokens, const CalibrationSet& cal,
                                  const FrontierOptions& opts) {
    FrontierResult res;
    const ThresholdTable tt =
        search_threshold(cal, ckpt, BlockKind::mlp, ThresholdMode::layer_wise, opts.cett_target);

    TrainingData train_data =
        collect_training_data(ckpt, train_tokens, &tt, nullptr, PredictorWiring::serial, 0);
    TrainingData held_data =
        collect_training_data(ckpt, heldout_tokens, &tt, nullptr, PredictorWiring::serial,
                              static_cast<long>(train_tokens.size()));
    res.heldout = std::move(held_data.mlp);

    const int n_layers = ckpt.config.n_layers;
    for (int l = 0; l < n_layers; ++l) {
        PredictorArch arch;
        arch.kind = PredictorArchKind::two_linear;
        arch.input_dim = ckpt.config.d_model;
        arch.hidden_dim = opts.hidden_dim > 0 ? opts.hidden_dim : ckpt.config.d_model;
        arch.output_dim = ckpt.config.d_hidden;
        TrainPredictorOptions topts;
        topts.batch_size = opts.batch_size;
        topts.lr = opts.lr;
        topts.epochs = opts.epochs;
        topts.seed = opts.seed + static_cast<uint64_t>(l) * 1000003ull;
        topts.loss = opts.loss;
        res.predictors.push_back(train_predictor(train_data.mlp[l], arch, topts).model);
    }

    for (double s : opts.sparsity_grid) {
        const int k = static_cast<int>(
            std::lround((1.0 - s) * static_cast<double>(ckpt.config.d_hidden)));
        std::vector<PredictorModel> at_k = res.predictors;
        for (auto& m : at_k) {
            m.selection.rule = SelectionRule::topk;
            m.selection.k = k;
        }
        const AggregateMetrics agg = evaluate_predictors(at_k, res.heldout);
        for (int l = 0; l < n_layers; ++l) {
            ReportRow r;
            r.experiment = "predictor-frontier";
            r.layer = std::to_string(l);
            r.cett_target = opts.cett_target;
            r.recall = agg.per_layer[l].recall;
            r.predicted_sparsity = agg.per_layer[l].predicted_sparsity;
            r.sparsity = agg.per_layer[l].real_sparsity;
            r.sparsity_delta = agg.per_layer[l].sparsity_delta;
            r.strategy = "topk@" + fmt(s);
            res.rows.push_back(std::move(r));
        }
        ReportRow mean;
        mean.experiment = "predictor-frontier";
        mean.layer = "mean";
        mean.cett_target = opts.cett_target;
        mean.recall = agg.macro.recall;
        mean.predicted_sparsity = agg.macro.predicted_sparsity;
        mean.sparsity = agg.macro.real_sparsity;
        mean.sparsity_delta = agg.macro.sparsity_delta;
        mean.strategy = "topk@" + fmt(s);
        res.rows.push_back(std::move(mean));
        res.macro_recall.push_back(agg.macro.recall);
    }
    return res;
}

// ---- config-driven runner ----

void ExperimentConfig::validate() const {
    for (double t : sweep.targets)
        if (!(t >= 0.0 && t < 1.0))
            throw std::invalid_argument("experiment: cett targets must lie in [0, 1)");
    if (calibration_tokens <= 0) throw std::invalid_argument("experiment: calibration budget must be > 0");
    if (corpus_path.empty()) throw std::invalid_argument("experiment: corpus path required");
    if (checkpoint_path.empty() && !train.has_value())
        throw std::invalid_argument("experiment: need a checkpoint path or a train spec");
    for (const auto& r : recipes)
        if (r != "cett-sweep" && r != "head-mask-eval" && r != "kv-ablation" &&
            r != "predictor-frontier")
            throw std::invalid_argument("experiment: unknown recipe " + r);
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("experiment: cannot open config " + path);
    json j;
    in >> j;
    ExperimentConfig cfg;
    cfg.seed = j.value("seed", 0ull);
    cfg.out_dir = j.value("out_dir", std::string("."));
    cfg.corpus_path = j.value("corpus", std::string());
    cfg.split_fraction = j.value("split_fraction", 0.9);
    cfg.checkpoint_path = j.value("checkpoint", std::string());
    if (j.contains("train")) {
        const json& t = j.at("train");
        ToyTrainSpec spec;
        spec.config.n_layers = t.value("n_layers", 4);
        spec.config.d_model = t.value("d_model", 128);
        spec.config.n_heads = t.value("n_heads", 8);
        spec.config.d_head = spec.config.d_model / spec.config.n_heads;
        spec.config.d_hidden = t.value("d_hidden", 512);
        spec.config.max_seq_len = t.value("max_seq_len", 128);
        spec.config.activation = activation_from_string(t.value("activation", std::string("silu")));
        spec.config.rope_enabled = t.value("rope_enabled", true);
        spec.steps = t.value("steps", 2000);
        spec.lr = t.value("lr", 1e-3);
        spec.window = t.value("window", 0);
        cfg.train = spec;
    }
    cfg.calibration_tokens = j.value("calibration_tokens", 4096l);
    cfg.recipes = j.value("recipes", std::vector<std::string>{});
    if (j.contains("cett_targets")) cfg.sweep.targets = j.at("cett_targets").get<std::vector<double>>();
    const std::string mode = j.value("threshold_mode", std::string("both"));
    cfg.sweep.universal = mode == "universal" || mode == "both";
    cfg.sweep.layer_wise = mode == "layerwise" || mode == "layer_wise" || mode == "both";
    cfg.eval_tokens = j.value("eval_tokens", 4096l);
    cfg.head_mask_cett = j.value("head_mask_cett", 0.2);
    cfg.kv.head_sparsity = j.value("kv_head_sparsity", 0.45);
    cfg.kv.layer_filter = j.value("kv_layer_filter", 0.5);
    if (j.contains("predictor")) {
        const json& p = j.at("predictor");
        cfg.frontier.epochs = p.value("epochs", 4);
        cfg.frontier.batch_size = p.value("batch", 64);
        cfg.frontier.lr = p.value("lr", 1e-3);
        cfg.frontier.hidden_dim = p.value("hidden", 0);
        cfg.frontier.loss = p.value("loss", std::string("bce")) == "focal" ? LossKind::focal
                                                                           : LossKind::bce;
        if (p.contains("sparsity_grid"))
            cfg.frontier.sparsity_grid = p.at("sparsity_grid").get<std::vector<double>>();
        cfg.predictor_train_tokens = p.value("train_tokens", 8192l);
        cfg.predictor_eval_tokens = p.value("eval_tokens", 2048l);
    }
    cfg.frontier.cett_target = j.value("frontier_cett", 0.2);
    cfg.frontier.seed = cfg.seed;
    return cfg;
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["corpus"] = corpus_path;
    j["split_fraction"] = split_fraction;
    j["checkpoint"] = checkpoint_path;
    if (train) {
        j["train"] = {{"n_layers", train->config.n_layers}, {"d_model", train->config.d_model},
                      {"n_heads", train->config.n_heads},   {"d_hidden", train->config.d_hidden},
                      {"max_seq_len", train->config.max_seq_len},
                      {"activation", to_string(train->config.activation)},
                      {"steps", train->steps},              {"lr", train->lr},
                      {"window", train->window}};
    }
    j["calibration_tokens"] = calibration_tokens;
    j["recipes"] = recipes;
    j["cett_targets"] = sweep.targets;
    j["threshold_mode"] = sweep.universal && sweep.layer_wise
                              ? "both"
                              : (sweep.universal ? "universal" : "layerwise");
    j["eval_tokens"] = eval_tokens;
    j["head_mask_cett"] = head_mask_cett;
    j["kv_head_sparsity"] = kv.head_sparsity;
    j["kv_layer_filter"] = kv.layer_filter;
    j["predictor"] = {{"epochs", frontier.epochs},
                      {"batch", frontier.batch_size},
                      {"lr", frontier.lr},
                      {"hidden", frontier.hidden_dim},
                      {"loss", frontier.loss == LossKind::focal ? "focal" : "bce"},
                      {"sparsity_grid", frontier.sparsity_grid},
                      {"train_tokens", predictor_train_tokens},
                      {"eval_tokens", predictor_eval_tokens}};
    j["frontier_cett"] = frontier.cett_target;
    return j.dump(2);
}

namespace {

void write_tables_json(const std::vector<ThresholdTable>& tables, const std::string& path) {
    json arr = json::array();
    for (const auto& tt : tables) {
        json j;
        j["block"] = to_string(tt.block);
        j["mode"] = to_string(tt.mode);
        j["cett_target"] = tt.cett_target;
        j["thresholds"] = tt.thresholds;
        j["achieved_cett"] = tt.achieved_cett;
        j["achieved_sparsity"] = tt.achieved_sparsity;
        j["scope_mean_cett"] = tt.scope_mean_cett;
        j["skipped_records"] = tt.skipped_records;
        arr.push_back(std::move(j));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("report: cannot open " + path);
    out << arr.dump(2) << "\n";
}

} // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    ExperimentResult result;
    auto out_path = [&](const std::string& name) { return (fs::path(cfg.out_dir) / name).string(); };

    std::string stage = "setup";
    std::string corpus_digest;
    try {
        const Corpus corpus = ingest_corpus(cfg.corpus_path, cfg.split_fraction);
        corpus_digest = corpus.digest;

        stage = "model";
        Checkpoint ckpt;
        if (!cfg.checkpoint_path.empty()) {
            ckpt = load_checkpoint(cfg.checkpoint_path);
        } else {
            TrainOptions topts;
            topts.steps = cfg.train->steps;
            topts.lr = cfg.train->lr;
            topts.window = cfg.train->window;
            topts.seed = cfg.seed;
            ckpt = train_toy_model(cfg.train->config, corpus, topts).ckpt;
        }
        auto shared = std::make_shared<const Checkpoint>(std::move(ckpt));

        stage = "calibration";
        std::vector<int> train_tokens = corpus.train_tokens();
        std::vector<int> heldout = corpus.heldout_tokens();
        if (static_cast<long>(train_tokens.size()) > cfg.calibration_tokens)
            train_tokens.resize(cfg.calibration_tokens);
        std::vector<int> eval_tokens = heldout;
        if (static_cast<long>(eval_tokens.size()) > cfg.eval_tokens)
            eval_tokens.resize(cfg.eval_tokens);
        const CalibrationSet cal = collect_calibration(shared, train_tokens, TraceLevel::full);

        for (const std::string& recipe : cfg.recipes) {
            stage = recipe;
            if (recipe == "cett-sweep") {
                const SweepResult sweep = cett_sweep(cal, *shared, cfg.sweep);
                write_report_csv(sweep.rows, out_path("cett_sweep.csv"));
                write_tables_json(sweep.tables, out_path("cett_sweep.json"));
                result.files.push_back(out_path("cett_sweep.csv"));
                result.files.push_back(out_path("cett_sweep.json"));
            } else if (recipe == "head-mask-eval") {
                const HeadMaskEvalResult hm =
                    head_mask_eval(cal, *shared, eval_tokens, cfg.head_mask_cett);
                write_report_csv(hm.rows, out_path("head_mask_eval.csv"));
                write_tables_json({hm.table}, out_path("head_mask_eval.json"));
                result.files.push_back(out_path("head_mask_eval.csv"));
                result.files.push_back(out_path("head_mask_eval.json"));
            } else if (recipe == "kv-ablation") {
                const KvAblationResult kv = kv_ablation(cal, *shared, eval_tokens, cfg.kv);
                write_report_csv(kv.rows, out_path("kv_ablation.csv"));
                result.files.push_back(out_path("kv_ablation.csv"));
            } else if (recipe == "predictor-frontier") {
                std::vector<int> ptrain = corpus.train_tokens();
                if (static_cast<long>(ptrain.size()) > cfg.predictor_train_tokens)
                    ptrain.resize(cfg.predictor_train_tokens);
                std::vector<int> peval = heldout;
                if (static_cast<long>(peval.size()) > cfg.predictor_eval_tokens)
                    peval.resize(cfg.predictor_eval_tokens);
                FrontierOptions fopts = cfg.frontier;
                fopts.seed = cfg.seed;
                const FrontierResult fr = predictor_frontier(*shared, ptrain, peval, cal, fopts);
                write_report_csv(fr.rows, out_path("predictor_frontier.csv"));
                result.files.push_back(out_path("predictor_frontier.csv"));
            }
        }
        result.complete = true;
    } catch (const std::exception& e) {
        result.complete = false;
        result.failed_stage = stage;
        json manifest;
        manifest["code_version"] = kVersionString;
        manifest["seed"] = cfg.seed;
        manifest["config_digest"] = fnv1a64_hex(cfg.to_json());
        manifest["complete"] = false;
        manifest["failed_stage"] = stage;
        std::ofstream mf(out_path("manifest.json"), std::ios::binary);
        if (mf) mf << manifest.dump(2) << "\n";
        throw std::runtime_error("stage " + stage + " failed: " + e.what());
    }

    stage = "manifest";
    json manifest;
    manifest["code_version"] = kVersionString;
    manifest["seed"] = cfg.seed;
    manifest["config_digest"] = fnv1a64_hex(cfg.to_json());
    manifest["corpus_digest"] = corpus_digest;
    manifest["complete"] = true;
    json files = json::array();
    for (const auto& f : result.files)
        files.push_back({{"name", fs::path(f).filename().string()}, {"digest", file_digest_hex(f)}});
    manifest["files"] = files;
    const std::string manifest_path = out_path("manifest.json");
    std::ofstream mf(manifest_path, std::ios::binary);
    if (!mf) throw std::runtime_error("experiment: cannot write manifest");
    mf << manifest.dump(2) << "\n";
    mf.close();
    result.files.push_back(manifest_path);
    return result;
}

} // namespace salab
