#pragma once

#include <string>
#include <utility>
#include <vector>

#include "moviekit/autoencoder.hpp"
#include "moviekit/denoiser.hpp"
#include "moviekit/graph.hpp"
#include "moviekit/tensor.hpp"

namespace moviekit {

// Checkpoint format shared by all modules: "MVKC" magic, u32 version, a
// provenance string identifying the producing stage, then a flat list of
// (name, shape, float32 little-endian payload) records. Non-tensor payloads
// (json metadata, rng state) are stored byte-per-float under a blob name.
struct Checkpoint {
    uint32_t version = 1;
    std::string provenance;
    std::vector<std::pair<std::string, Tensor>> records;

    static Checkpoint load(const std::string& path);
    bool has(const std::string& name) const;
    const Tensor& record(const std::string& name) const;
    std::string blob(const std::string& name) const;
    void load_store(const std::string& prefix, ParamStore& ps, bool with_moments) const;
};

class CheckpointBuilder {
   public:
    explicit CheckpointBuilder(std::string provenance) : provenance_(std::move(provenance)) {}

    void add(const std::string& name, const Tensor& t);
    void add_blob(const std::string& name, const std::string& bytes);
    void add_store(const std::string& prefix, const ParamStore& ps, bool with_moments = false);
    void save(const std::string& path) const;

   private:
    std::string provenance_;
    std::vector<std::pair<std::string, Tensor>> records_;
};

void save_denoiser(const std::string& path, const std::string& provenance, const Denoiser& model);
// expected_provenance empty = accept any; otherwise hard error on mismatch so
// stage ordering is enforced at load time.
Denoiser load_denoiser(const std::string& path, const std::string& expected_provenance = "");
std::string checkpoint_provenance(const std::string& path);

void save_autoencoder(const std::string& path, const AutoencoderPair& pair);
AutoencoderPair load_autoencoder(const std::string& path);

}  // namespace moviekit
