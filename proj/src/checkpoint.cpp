#include "lalign/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "lalign/version.hpp"

namespace lalign {

namespace {
constexpr char kMagic[4] = {'L', 'A', 'L', 'N'};
}

const Tensor<float>& CheckpointData::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw InputError("checkpoint: tensor not found: " + name);
}

bool CheckpointData::has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
    nlohmann::json header;
    header["kind"] = data.kind;
    header["version"] = kCheckpointVersion;
    header["meta"] = data.meta;
    nlohmann::json dir = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : data.tensors) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["dtype"] = "f32";
        entry["shape"] = t.shape;
        entry["offset"] = offset;
        dir.push_back(entry);
        offset += static_cast<uint64_t>(t.numel()) * sizeof(float);
    }
    header["tensors"] = dir;
    std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("checkpoint: cannot open for writing: " + path);
    out.write(kMagic, 4);
    uint32_t ver = kCheckpointVersion;
    uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : data.tensors)
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!out) throw InputError("checkpoint: write failed: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("checkpoint: cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw InputError("checkpoint: bad magic in " + path);
    uint32_t ver = 0;
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || ver != static_cast<uint32_t>(kCheckpointVersion))
        throw InputError("checkpoint: unsupported version in " + path);
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header = nlohmann::json::parse(hs);

    CheckpointData data;
    data.kind = header.at("kind").get<std::string>();
    data.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
        Tensor<float> t(entry.at("shape").get<std::vector<int64_t>>());
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!in) throw InputError("checkpoint: truncated tensor data in " + path);
        data.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
    return data;
}

uint64_t file_content_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("hash: cannot open: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        std::streamsize got = in.gcount();
        if (got > 0) h = fnv1a64(buf, static_cast<size_t>(got), h);
    }
    return h;
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d_model"] = cfg.d_model;
    j["n_layers"] = cfg.n_layers;
    j["n_heads"] = cfg.n_heads;
    j["d_ff"] = cfg.d_ff;
    j["max_seq_len"] = cfg.max_seq_len;
    j["prefix_len"] = cfg.prefix_len;
    j["seed"] = cfg.seed;
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.max_seq_len = j.at("max_seq_len").get<int>();
    cfg.prefix_len = j.at("prefix_len").get<int>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.validate();
    return cfg;
}

}  // namespace lalign
