#include "moviekit/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace moviekit {

namespace {

constexpr char kMagic[4] = {'M', 'V', 'K', 'C'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("truncated checkpoint");
    return v;
}

Tensor blob_to_tensor(const std::string& bytes) {
    Tensor t({static_cast<int>(bytes.size())});
    for (size_t i = 0; i < bytes.size(); ++i) t.data[i] = static_cast<unsigned char>(bytes[i]);
    return t;
}

std::string tensor_to_blob(const Tensor& t) {
    std::string out(static_cast<size_t>(t.size()), '\0');
    for (int64_t i = 0; i < t.size(); ++i) out[i] = static_cast<char>(static_cast<unsigned char>(t.data[i]));
    return out;
}

}  // namespace

void CheckpointBuilder::add(const std::string& name, const Tensor& t) {
    records_.emplace_back(name, t);
}

void CheckpointBuilder::add_blob(const std::string& name, const std::string& bytes) {
    records_.emplace_back(name, blob_to_tensor(bytes));
}

void CheckpointBuilder::add_store(const std::string& prefix, const ParamStore& ps, bool with_moments) {
    for (const auto& p : ps.items) {
        add(prefix + "/" + p->name, p->value);
        if (with_moments && p->adam_m.size() == p->value.size()) {
            add(prefix + ".m/" + p->name, p->adam_m);
            add(prefix + ".v/" + p->name, p->adam_v);
        }
    }
}

void CheckpointBuilder::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write(kMagic, 4);
    put<uint32_t>(f, kVersion);
    put<uint32_t>(f, static_cast<uint32_t>(provenance_.size()));
    f.write(provenance_.data(), provenance_.size());
    put<uint64_t>(f, records_.size());
    for (const auto& [name, t] : records_) {
        put<uint32_t>(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), name.size());
        put<uint32_t>(f, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) put<int32_t>(f, d);
        put<uint32_t>(f, 0);  // dtype 0 = float32 little-endian
        put<uint64_t>(f, sizeof(float) * static_cast<uint64_t>(t.size()));
        f.write(reinterpret_cast<const char*>(t.data.data()), sizeof(float) * t.size());
    }
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    Checkpoint c;
    c.version = get<uint32_t>(f);
    uint32_t plen = get<uint32_t>(f);
    c.provenance.resize(plen);
    f.read(c.provenance.data(), plen);
    uint64_t n = get<uint64_t>(f);
    for (uint64_t i = 0; i < n; ++i) {
        uint32_t nlen = get<uint32_t>(f);
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        uint32_t ndim = get<uint32_t>(f);
        std::vector<int> shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = get<int32_t>(f);
        uint32_t dtype = get<uint32_t>(f);
        if (dtype != 0) throw std::runtime_error("unsupported dtype in checkpoint");
        uint64_t nbytes = get<uint64_t>(f);
        Tensor t(shape);
        if (nbytes != sizeof(float) * static_cast<uint64_t>(t.size()))
            throw std::runtime_error("record size mismatch in checkpoint");
        f.read(reinterpret_cast<char*>(t.data.data()), nbytes);
        if (!f) throw std::runtime_error("truncated checkpoint record");
        c.records.emplace_back(std::move(name), std::move(t));
    }
    return c;
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, t] : records)
        if (n == name) return true;
    return false;
}

const Tensor& Checkpoint::record(const std::string& name) const {
    for (const auto& [n, t] : records)
        if (n == name) return t;
    throw std::out_of_range("checkpoint record not found: " + name);
}

std::string Checkpoint::blob(const std::string& name) const { return tensor_to_blob(record(name)); }

void Checkpoint::load_store(const std::string& prefix, ParamStore& ps, bool with_moments) const {
    for (auto& p : ps.items) {
        const Tensor& v = record(prefix + "/" + p->name);
        if (v.shape != p->value.shape)
            throw std::runtime_error("checkpoint shape mismatch for " + p->name);
        p->value = v;
        if (with_moments && has(prefix + ".m/" + p->name)) {
            p->adam_m = record(prefix + ".m/" + p->name);
            p->adam_v = record(prefix + ".v/" + p->name);
        }
    }
}

// ------------------------------------------------------------ model helpers

namespace {

nlohmann::json denoiser_cfg_json(const DenoiserConfig& cfg) {
    nlohmann::json j;
    j["base_channels"] = cfg.base_channels;
    j["channel_multipliers"] = cfg.channel_multipliers;
    j["latent_channels"] = cfg.latent_channels;
    j["attention_levels"] = std::vector<int>(cfg.attention_levels.begin(), cfg.attention_levels.end());
    j["guidance_conditioned"] = cfg.guidance_conditioned;
    j["prediction"] = to_string(cfg.prediction);
    j["embed_dim"] = cfg.embed_dim;
    j["token_dim"] = cfg.token_dim;
    j["norm_groups"] = cfg.norm_groups;
    return j;
}

DenoiserConfig denoiser_cfg_from_json(const nlohmann::json& j) {
    DenoiserConfig cfg;
    cfg.base_channels = j.at("base_channels").get<int>();
    cfg.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
    cfg.latent_channels = j.at("latent_channels").get<int>();
    auto lv = j.at("attention_levels").get<std::vector<int>>();
    cfg.attention_levels = std::set<int>(lv.begin(), lv.end());
    cfg.guidance_conditioned = j.at("guidance_conditioned").get<bool>();
    cfg.prediction = prediction_from_string(j.at("prediction").get<std::string>());
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.token_dim = j.at("token_dim").get<int>();
    cfg.norm_groups = j.at("norm_groups").get<int>();
    return cfg;
}

}  // namespace

void save_denoiser(const std::string& path, const std::string& provenance, const Denoiser& model) {
    CheckpointBuilder b(provenance);
    b.add_blob("meta/config", denoiser_cfg_json(model.cfg).dump());
    b.add_store("params", model.params);
    b.save(path);
}

Denoiser load_denoiser(const std::string& path, const std::string& expected_provenance) {
    Checkpoint c = Checkpoint::load(path);
    if (!expected_provenance.empty() && c.provenance != expected_provenance)
        throw std::runtime_error("checkpoint " + path + " has provenance '" + c.provenance +
                                 "', expected '" + expected_provenance + "'");
    Denoiser m;
    m.cfg = denoiser_cfg_from_json(nlohmann::json::parse(c.blob("meta/config")));
    for (const auto& [name, t] : c.records) {
        if (name.rfind("params/", 0) == 0) m.params.add(name.substr(7), t);
    }
    return m;
}

std::string checkpoint_provenance(const std::string& path) { return Checkpoint::load(path).provenance; }

void save_autoencoder(const std::string& path, const AutoencoderPair& pair) {
    CheckpointBuilder b("autoencoder");
    nlohmann::json j;
    j["downsample_factor"] = pair.downsample_factor;
    j["latent_channels"] = pair.latent_channels;
    j["latent_scale"] = pair.latent_scale;
    b.add_blob("meta/config", j.dump());
    b.add_store("big_encoder", pair.big_encoder);
    b.add_store("big_decoder", pair.big_decoder);
    b.add_store("tiny_encoder", pair.tiny_encoder);
    b.add_store("tiny_decoder", pair.tiny_decoder);
    b.save(path);
}

AutoencoderPair load_autoencoder(const std::string& path) {
    Checkpoint c = Checkpoint::load(path);
    if (c.provenance != "autoencoder")
        throw std::runtime_error("checkpoint " + path + " is not an autoencoder checkpoint");
    nlohmann::json j = nlohmann::json::parse(c.blob("meta/config"));
    Rng rng(0);
    AutoencoderPair pair = build_autoencoder(rng);
    pair.downsample_factor = j.at("downsample_factor").get<int>();
    pair.latent_channels = j.at("latent_channels").get<int>();
    pair.latent_scale = j.at("latent_scale").get<float>();
    c.load_store("big_encoder", pair.big_encoder, false);
    c.load_store("big_decoder", pair.big_decoder, false);
    c.load_store("tiny_encoder", pair.tiny_encoder, false);
    c.load_store("tiny_decoder", pair.tiny_decoder, false);
    return pair;
}

}  // namespace moviekit
