#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "salab/checkpoint_io.hpp"
#include "salab/experiment.hpp"
#include "salab/perplexity.hpp"
#include "salab/train_toy.hpp"

namespace py = pybind11;
using namespace salab;

namespace {

SelectionStrategy strategy_from_args(const py::object& eps, const py::object& topk) {
    if (!eps.is_none()) return SelectionStrategy::with_threshold({eps.cast<double>()});
    if (!topk.is_none()) return SelectionStrategy::with_topk(topk.cast<int>());
    return SelectionStrategy::dense_all();
}

SkipPolicy policy_from_args(const std::string& kv_policy, const std::string& substitution) {
    SkipPolicy p;
    if (kv_policy == "none")
        p.mode = SkipMode::none;
    else if (kv_policy == "skip_kv")
        p.mode = SkipMode::skip_kv;
    else if (kv_policy == "skip_k")
        p.mode = SkipMode::skip_k;
    else if (kv_policy == "skip_v")
        p.mode = SkipMode::skip_v;
    else
        throw std::invalid_argument("unknown kv policy: " + kv_policy);
    p.substitution = substitution == "lazy" ? Substitution::defer_lazy : Substitution::raw_substitute;
    return p;
}

py::array_t<double> mat_to_numpy(const Mat& m) {
    py::array_t<double> arr({m.rows, m.cols});
    std::copy(m.data.begin(), m.data.end(), arr.mutable_data());
    return arr;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "dynamic-activation laboratory: toy decoder, CETT calibration, "
              "sparse execution, predictors";

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init([](int n_layers, int d_model, int n_heads, int d_hidden, int vocab_size,
                         const std::string& activation, bool rope_enabled, int max_seq_len) {
                 ModelConfig cfg;
                 cfg.n_layers = n_layers;
                 cfg.d_model = d_model;
                 cfg.n_heads = n_heads;
                 cfg.d_head = d_model / n_heads;
                 cfg.d_hidden = d_hidden;
                 cfg.vocab_size = vocab_size;
                 cfg.activation = activation_from_string(activation);
                 cfg.rope_enabled = rope_enabled;
                 cfg.max_seq_len = max_seq_len;
                 cfg.validate();
                 return cfg;
             }),
             py::arg("n_layers") = 4, py::arg("d_model") = 128, py::arg("n_heads") = 8,
             py::arg("d_hidden") = 512, py::arg("vocab_size") = 256,
             py::arg("activation") = "silu", py::arg("rope_enabled") = true,
             py::arg("max_seq_len") = 128)
        .def_readonly("n_layers", &ModelConfig::n_layers)
        .def_readonly("d_model", &ModelConfig::d_model)
        .def_readonly("n_heads", &ModelConfig::n_heads)
        .def_readonly("d_head", &ModelConfig::d_head)
        .def_readonly("d_hidden", &ModelConfig::d_hidden)
        .def_readonly("vocab_size", &ModelConfig::vocab_size)
        .def_readonly("max_seq_len", &ModelConfig::max_seq_len)
        .def_property_readonly("activation",
                               [](const ModelConfig& c) { return to_string(c.activation); });

    py::class_<Checkpoint>(m, "Checkpoint")
        .def_readonly("config", &Checkpoint::config);

    py::class_<Corpus>(m, "Corpus")
        .def_property_readonly("train_tokens", &Corpus::train_tokens)
        .def_property_readonly("heldout_tokens", &Corpus::heldout_tokens)
        .def_readonly("digest", &Corpus::digest);

    py::class_<ThresholdTable>(m, "ThresholdInfo")
        .def_readonly("cett_target", &ThresholdTable::cett_target)
        .def_readonly("thresholds", &ThresholdTable::thresholds)
        .def_readonly("achieved_cett", &ThresholdTable::achieved_cett)
        .def_readonly("achieved_sparsity", &ThresholdTable::achieved_sparsity)
        .def_readonly("scope_mean_cett", &ThresholdTable::scope_mean_cett);

    m.def("activation_fn",
          [](const std::string& kind, double x) {
              return activation_fn(activation_from_string(kind), x);
          },
          py::arg("kind"), py::arg("x"));

    m.def("ingest_corpus", &ingest_corpus, py::arg("path"), py::arg("split_fraction") = 0.9,
          py::arg("add_bos") = false);

    m.def("init_checkpoint", &init_checkpoint, py::arg("config"), py::arg("seed") = 0);

    m.def("train_toy_model",
          [](const ModelConfig& cfg, const std::string& corpus_path, int steps, double lr,
             uint64_t seed, int window, double split) {
              const Corpus corpus = ingest_corpus(corpus_path, split);
              TrainOptions opts;
              opts.steps = steps;
              opts.lr = lr;
              opts.seed = seed;
              opts.window = window;
              return train_toy_model(cfg, corpus, opts).ckpt;
          },
          py::arg("config"), py::arg("corpus_path"), py::arg("steps") = 2000,
          py::arg("lr") = 1e-3, py::arg("seed") = 0, py::arg("window") = 0,
          py::arg("split") = 0.9);

    m.def("save_checkpoint", &save_checkpoint, py::arg("checkpoint"), py::arg("path"));
    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

    m.def("dense_logits",
          [](const Checkpoint& ckpt, const std::vector<int>& tokens) {
              return mat_to_numpy(dense_forward(ckpt, tokens, TraceLevel::none).logits);
          },
          py::arg("checkpoint"), py::arg("tokens"));

    m.def("trace_stats",
          [](const Checkpoint& ckpt, const std::vector<int>& tokens) {
              const ForwardResult r = dense_forward(ckpt, tokens, TraceLevel::full);
              const int T = r.trace.token_count();
              const int L = r.trace.n_layers;
              py::array_t<double> mags({T, L, r.trace.d_hidden});
              py::array_t<double> head_norms({T, L, r.trace.n_heads});
              auto mg = mags.mutable_unchecked<3>();
              auto hn = head_norms.mutable_unchecked<3>();
              for (int t = 0; t < T; ++t)
                  for (int l = 0; l < L; ++l) {
                      const LayerRecord& rec = r.trace.tokens[t][l];
                      for (int i = 0; i < r.trace.d_hidden; ++i)
                          mg(t, l, i) = rec.neuron_magnitudes[i];
                      for (int h = 0; h < r.trace.n_heads; ++h)
                          hn(t, l, h) = rec.head_out_norms[h];
                  }
              py::dict out;
              out["neuron_magnitudes"] = mags;
              out["head_out_norms"] = head_norms;
              return out;
          },
          py::arg("checkpoint"), py::arg("tokens"));

    m.def("search_threshold",
          [](const Checkpoint& ckpt, const std::vector<int>& tokens, const std::string& block,
             const std::string& mode, double cett_target, double tol) {
              auto shared = std::make_shared<const Checkpoint>(ckpt);
              const CalibrationSet cal = collect_calibration(shared, tokens, TraceLevel::full);
              SearchOptions opts;
              opts.tol = tol;
              return search_threshold(cal, ckpt,
                                      block == "attention" ? BlockKind::attention : BlockKind::mlp,
                                      mode == "universal" ? ThresholdMode::universal
                                                          : ThresholdMode::layer_wise,
                                      cett_target, opts);
          },
          py::arg("checkpoint"), py::arg("tokens"), py::arg("block") = "mlp",
          py::arg("mode") = "layerwise", py::arg("cett_target") = 0.2, py::arg("tol") = 1e-6);

    m.def("measure_sparsity",
          [](const Checkpoint& ckpt, const std::vector<int>& tokens, const std::string& block,
             const std::vector<double>& thresholds) {
              auto shared = std::make_shared<const Checkpoint>(ckpt);
              const CalibrationSet cal = collect_calibration(shared, tokens, TraceLevel::full);
              ThresholdTable tt;
              tt.block = block == "attention" ? BlockKind::attention : BlockKind::mlp;
              tt.mode = thresholds.size() == 1 ? ThresholdMode::universal
                                               : ThresholdMode::layer_wise;
              tt.thresholds = thresholds;
              const SparsityReport rep = measure_sparsity(cal, tt);
              py::dict out;
              out["per_layer_sparsity"] = rep.per_layer_sparsity;
              out["per_layer_mean_cett"] = rep.per_layer_mean_cett;
              out["mean_sparsity"] = rep.mean_sparsity;
              out["token_count"] = rep.token_count;
              return out;
          },
          py::arg("checkpoint"), py::arg("tokens"), py::arg("block"), py::arg("thresholds"));

    m.def("generate",
          [](const Checkpoint& ckpt, const std::vector<int>& prompt, int n_new,
             const py::object& mlp_eps, const py::object& mlp_topk, const py::object& attn_eps,
             const py::object& attn_topk, const std::string& kv_policy,
             const std::string& substitution) {
              return generate(ckpt, prompt, strategy_from_args(mlp_eps, mlp_topk),
                              strategy_from_args(attn_eps, attn_topk),
                              policy_from_args(kv_policy, substitution), n_new);
          },
          py::arg("checkpoint"), py::arg("prompt"), py::arg("n_new") = 16,
          py::arg("mlp_eps") = py::none(), py::arg("mlp_topk") = py::none(),
          py::arg("attn_eps") = py::none(), py::arg("attn_topk") = py::none(),
          py::arg("kv_policy") = "none", py::arg("substitution") = "raw");

    m.def("perplexity",
          [](const Checkpoint& ckpt, const std::vector<int>& tokens, const py::object& mlp_eps,
             const py::object& mlp_topk, const py::object& attn_eps, const py::object& attn_topk,
             const std::string& kv_policy, const std::string& substitution) {
              return perplexity(ckpt, tokens, strategy_from_args(mlp_eps, mlp_topk),
                                strategy_from_args(attn_eps, attn_topk),
                                policy_from_args(kv_policy, substitution));
          },
          py::arg("checkpoint"), py::arg("tokens"), py::arg("mlp_eps") = py::none(),
          py::arg("mlp_topk") = py::none(), py::arg("attn_eps") = py::none(),
          py::arg("attn_topk") = py::none(), py::arg("kv_policy") = "none",
          py::arg("substitution") = "raw");

    m.def("run_experiment",
          [](const std::string& config_path) {
              const ExperimentResult res = run_experiment(ExperimentConfig::from_json_file(config_path));
              return res.files;
          },
          py::arg("config_path"));
}
