#include "salab/checkpoint_io.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace salab {

using nlohmann::json;

namespace {

void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& in) {
    uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("container: truncated");
    return v;
}

uint64_t read_u64(std::istream& in) {
    uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 8)) throw std::runtime_error("container: truncated");
    return v;
}

uint64_t element_count(const NamedTensor& t) {
    uint64_t n = 1;
    for (uint64_t d : t.shape) n *= d;
    return n;
}

NamedTensor tensor_from_mat(const Mat& m) {
    NamedTensor t;
    t.shape = {static_cast<uint64_t>(m.rows), static_cast<uint64_t>(m.cols)};
    t.data = m.data;
    return t;
}

NamedTensor tensor_from_vec(const Vec& v) {
    NamedTensor t;
    t.shape = {static_cast<uint64_t>(v.size())};
    t.data = v;
    return t;
}

Mat mat_from_tensor(const NamedTensor& t, const std::string& name) {
    if (t.shape.size() != 2)
        throw std::runtime_error("container: tensor " + name + " is not 2-d");
    Mat m(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
    m.data = t.data;
    return m;
}

Vec vec_from_tensor(const NamedTensor& t, const std::string& name) {
    if (t.shape.size() != 1)
        throw std::runtime_error("container: tensor " + name + " is not 1-d");
    return t.data;
}

} // namespace

void write_container(const std::string& path, const std::string& json_header,
                     const std::vector<std::pair<std::string, NamedTensor>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("container: cannot open " + path + " for writing");
    out.write(kContainerMagic, 4);
    write_u32(out, kContainerVersion);
    write_u32(out, static_cast<uint32_t>(json_header.size()));
    out.write(json_header.data(), static_cast<std::streamsize>(json_header.size()));
    write_u32(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        write_u32(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(out, static_cast<uint32_t>(tensor.shape.size()));
        for (uint64_t d : tensor.shape) write_u64(out, d);
        if (element_count(tensor) != tensor.data.size())
            throw std::runtime_error("container: tensor " + name + " shape/data mismatch");
        std::vector<float> f32(tensor.data.size());
        for (size_t i = 0; i < tensor.data.size(); ++i) f32[i] = static_cast<float>(tensor.data[i]);
        out.write(reinterpret_cast<const char*>(f32.data()),
                  static_cast<std::streamsize>(f32.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("container: write failed for " + path);
}

Container read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("container: cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4)) throw std::runtime_error("container: truncated");
    if (std::memcmp(magic, kContainerMagic, 4) != 0)
        throw std::runtime_error("container: bad magic bytes");
    const uint32_t version = read_u32(in);
    if (version != kContainerVersion)
        throw std::runtime_error("container: unsupported version " + std::to_string(version));

    Container c;
    const uint32_t json_len = read_u32(in);
    c.json_header.resize(json_len);
    if (!in.read(c.json_header.data(), json_len)) throw std::runtime_error("container: truncated");

    const uint32_t count = read_u32(in);
    for (uint32_t t = 0; t < count; ++t) {
        const uint32_t name_len = read_u32(in);
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len)) throw std::runtime_error("container: truncated");
        NamedTensor tensor;
        const uint32_t ndim = read_u32(in);
        tensor.shape.resize(ndim);
        for (uint32_t d = 0; d < ndim; ++d) tensor.shape[d] = read_u64(in);
        const uint64_t n = element_count(tensor);
        std::vector<float> f32(n);
        if (!in.read(reinterpret_cast<char*>(f32.data()),
                     static_cast<std::streamsize>(n * sizeof(float))))
            throw std::runtime_error("container: truncated tensor " + name);
        tensor.data.resize(n);
        for (uint64_t i = 0; i < n; ++i) tensor.data[i] = static_cast<double>(f32[i]);
        if (c.tensors.count(name))
            throw std::runtime_error("container: duplicate tensor " + name);
        c.tensor_order.push_back(name);
        c.tensors.emplace(std::move(name), std::move(tensor));
    }
    return c;
}

std::string model_config_to_json(const ModelConfig& cfg) {
    json j;
    j["n_layers"] = cfg.n_layers;
    j["d_model"] = cfg.d_model;
    j["n_heads"] = cfg.n_heads;
    j["d_head"] = cfg.d_head;
    j["d_hidden"] = cfg.d_hidden;
    j["vocab_size"] = cfg.vocab_size;
    j["activation"] = to_string(cfg.activation);
    j["rope_enabled"] = cfg.rope_enabled;
    j["norm_eps"] = cfg.norm_eps;
    j["max_seq_len"] = cfg.max_seq_len;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& json_text) {
    const json j = json::parse(json_text);
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_head = j.at("d_head").get<int>();
    cfg.d_hidden = j.at("d_hidden").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.activation = activation_from_string(j.at("activation").get<std::string>());
    cfg.rope_enabled = j.at("rope_enabled").get<bool>();
    cfg.norm_eps = j.at("norm_eps").get<double>();
    cfg.max_seq_len = j.at("max_seq_len").get<int>();
    return cfg;
}

namespace {

std::vector<std::string> expected_tensor_names(const ModelConfig& cfg) {
    std::vector<std::string> names = {"token_embedding", "lm_head", "final_norm_gain"};
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        names.push_back(p + "attn.w_q");
        names.push_back(p + "attn.w_k");
        names.push_back(p + "attn.w_v");
        names.push_back(p + "attn.w_o");
        names.push_back(p + "mlp.w_in");
        names.push_back(p + "mlp.v_in");
        names.push_back(p + "mlp.w_out");
        names.push_back(p + "attn_norm_gain");
        names.push_back(p + "mlp_norm_gain");
    }
    return names;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    ckpt.validate();
    json header;
    header["kind"] = "model";
    header["config"] = json::parse(model_config_to_json(ckpt.config));

    std::vector<std::pair<std::string, NamedTensor>> tensors;
    tensors.emplace_back("token_embedding", tensor_from_mat(ckpt.token_embedding));
    tensors.emplace_back("lm_head", tensor_from_mat(ckpt.lm_head));
    tensors.emplace_back("final_norm_gain", tensor_from_vec(ckpt.final_norm_gain));
    for (int l = 0; l < ckpt.config.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const LayerWeights& lw = ckpt.layers[l];
        tensors.emplace_back(p + "attn.w_q", tensor_from_mat(lw.attn.w_q));
        tensors.emplace_back(p + "attn.w_k", tensor_from_mat(lw.attn.w_k));
        tensors.emplace_back(p + "attn.w_v", tensor_from_mat(lw.attn.w_v));
        tensors.emplace_back(p + "attn.w_o", tensor_from_mat(lw.attn.w_o));
        tensors.emplace_back(p + "mlp.w_in", tensor_from_mat(lw.mlp.w_in));
        tensors.emplace_back(p + "mlp.v_in", tensor_from_mat(lw.mlp.v_in));
        tensors.emplace_back(p + "mlp.w_out", tensor_from_mat(lw.mlp.w_out));
        tensors.emplace_back(p + "attn_norm_gain", tensor_from_vec(lw.attn_norm_gain));
        tensors.emplace_back(p + "mlp_norm_gain", tensor_from_vec(lw.mlp_norm_gain));
    }
    write_container(path, header.dump(), tensors);
}

Checkpoint load_checkpoint(const std::string& path) {
    const Container c = read_container(path);
    const json header = json::parse(c.json_header);
    if (header.at("kind").get<std::string>() != "model")
        throw std::runtime_error("checkpoint: container does not hold a model");
    Checkpoint ckpt;
    ckpt.config = model_config_from_json(header.at("config").dump());
    ckpt.config.validate();

    // the manifest must list every expected tensor exactly once, nothing else
    const std::vector<std::string> expected = expected_tensor_names(ckpt.config);
    if (expected.size() != c.tensors.size())
        throw std::runtime_error("checkpoint: manifest does not match config-derived tensor set");
    for (const auto& name : expected)
        if (!c.tensors.count(name))
            throw std::runtime_error("checkpoint: missing tensor " + name);

    ckpt.token_embedding = mat_from_tensor(c.tensors.at("token_embedding"), "token_embedding");
    ckpt.lm_head = mat_from_tensor(c.tensors.at("lm_head"), "lm_head");
    ckpt.final_norm_gain = vec_from_tensor(c.tensors.at("final_norm_gain"), "final_norm_gain");
    ckpt.layers.resize(ckpt.config.n_layers);
    for (int l = 0; l < ckpt.config.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights& lw = ckpt.layers[l];
        lw.attn.w_q = mat_from_tensor(c.tensors.at(p + "attn.w_q"), p + "attn.w_q");
        lw.attn.w_k = mat_from_tensor(c.tensors.at(p + "attn.w_k"), p + "attn.w_k");
        lw.attn.w_v = mat_from_tensor(c.tensors.at(p + "attn.w_v"), p + "attn.w_v");
        lw.attn.w_o = mat_from_tensor(c.tensors.at(p + "attn.w_o"), p + "attn.w_o");
        lw.mlp.w_in = mat_from_tensor(c.tensors.at(p + "mlp.w_in"), p + "mlp.w_in");
        lw.mlp.v_in = mat_from_tensor(c.tensors.at(p + "mlp.v_in"), p + "mlp.v_in");
        lw.mlp.w_out = mat_from_tensor(c.tensors.at(p + "mlp.w_out"), p + "mlp.w_out");
        lw.attn_norm_gain = vec_from_tensor(c.tensors.at(p + "attn_norm_gain"), p + "attn_norm_gain");
        lw.mlp_norm_gain = vec_from_tensor(c.tensors.at(p + "mlp_norm_gain"), p + "mlp_norm_gain");
    }
    ckpt.finalize();
    ckpt.validate();
    return ckpt;
}

} // namespace salab
