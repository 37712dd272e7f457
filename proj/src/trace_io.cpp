#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "salab/calibrate.hpp"
#include "salab/digest.hpp"

namespace salab {

using nlohmann::json;

void export_trace_jsonl(const CalibrationSet& cal, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("trace export: cannot open " + path);
    long token_idx = 0;
    for (const auto& trace : cal.traces) {
        for (const auto& token_recs : trace.tokens) {
            for (size_t l = 0; l < token_recs.size(); ++l) {
                const LayerRecord& rec = token_recs[l];
                json j;
                j["token_idx"] = token_idx;
                j["layer"] = l;
                j["neuron_magnitudes"] = rec.neuron_magnitudes;
                j["head_out_norms"] = rec.head_out_norms;
                j["mlp_out_norm"] = rec.mlp_out_norm;
                j["mha_out_norm"] = rec.mha_out_norm;
                out << j.dump() << "\n";
            }
            ++token_idx;
        }
    }
}

CalibrationSet import_trace_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("trace import: cannot open " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    const std::string content = buffer.str();

    std::map<long, std::map<int, LayerRecord>> by_token;
    std::istringstream lines(content);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        LayerRecord rec;
        rec.neuron_magnitudes = j.at("neuron_magnitudes").get<Vec>();
        rec.head_out_norms = j.at("head_out_norms").get<Vec>();
        rec.mlp_out_norm = j.at("mlp_out_norm").get<double>();
        rec.mha_out_norm = j.at("mha_out_norm").get<double>();
        by_token[j.at("token_idx").get<long>()][j.at("layer").get<int>()] = std::move(rec);
    }
    if (by_token.empty()) throw std::runtime_error("trace import: no records in " + path);

    ForwardTrace trace;
    trace.level = TraceLevel::norms;
    trace.n_layers = static_cast<int>(by_token.begin()->second.size());
    for (auto& [tok, layers] : by_token) {
        if (static_cast<int>(layers.size()) != trace.n_layers)
            throw std::runtime_error("trace import: inconsistent layer coverage");
        std::vector<LayerRecord> recs;
        recs.reserve(layers.size());
        for (auto& [l, rec] : layers) recs.push_back(std::move(rec));
        trace.tokens.push_back(std::move(recs));
    }
    if (!trace.tokens.empty() && !trace.tokens[0].empty()) {
        trace.d_hidden = static_cast<int>(trace.tokens[0][0].neuron_magnitudes.size());
        trace.n_heads = static_cast<int>(trace.tokens[0][0].head_out_norms.size());
    }

    CalibrationSet cal;
    cal.token_count = static_cast<long>(trace.tokens.size());
    cal.traces.push_back(std::move(trace));
    cal.source_digest = fnv1a64_hex(content);
    return cal;
}

void save_threshold_table(const ThresholdTable& tt, const std::string& path) {
    json j;
    j["block"] = to_string(tt.block);
    j["mode"] = to_string(tt.mode);
    j["cett_target"] = tt.cett_target;
    j["thresholds"] = tt.thresholds;
    j["achieved_cett"] = tt.achieved_cett;
    j["achieved_sparsity"] = tt.achieved_sparsity;
    j["scope_mean_cett"] = tt.scope_mean_cett;
    j["skipped_records"] = tt.skipped_records;
    j["tol"] = tt.tol;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("threshold table: cannot open " + path);
    out << j.dump(2) << "\n";
}

ThresholdTable load_threshold_table(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("threshold table: cannot open " + path);
    json j;
    in >> j;
    ThresholdTable tt;
    tt.block = j.at("block").get<std::string>() == "mlp" ? BlockKind::mlp : BlockKind::attention;
    tt.mode = j.at("mode").get<std::string>() == "universal" ? ThresholdMode::universal
                                                             : ThresholdMode::layer_wise;
    tt.cett_target = j.at("cett_target").get<double>();
    tt.thresholds = j.at("thresholds").get<std::vector<double>>();
    tt.achieved_cett = j.at("achieved_cett").get<std::vector<double>>();
    tt.achieved_sparsity = j.at("achieved_sparsity").get<std::vector<double>>();
    tt.scope_mean_cett = j.at("scope_mean_cett").get<double>();
    tt.skipped_records = j.at("skipped_records").get<long>();
    tt.tol = j.at("tol").get<double>();
    return tt;
}

} // namespace salab
