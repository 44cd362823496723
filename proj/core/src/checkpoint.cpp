#include "mergeforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "mergeforge/errors.hpp"

namespace mergeforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_doubles_le(std::ofstream& out, const std::vector<double>& values) {
    static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(double)));
    } else {
        for (double v : values) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            char raw[8];
            for (int i = 0; i < 8; ++i) raw[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
            out.write(raw, 8);
        }
    }
}

std::vector<double> read_doubles_le(std::ifstream& in, size_t count) {
    std::vector<double> values(count);
    if constexpr (std::endian::native == std::endian::little) {
        in.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
    } else {
        for (size_t i = 0; i < count; ++i) {
            char raw[8];
            in.read(raw, 8);
            uint64_t bits = 0;
            for (int j = 0; j < 8; ++j)
                bits |= static_cast<uint64_t>(static_cast<unsigned char>(raw[j])) << (8 * j);
            std::memcpy(&values[i], &bits, 8);
        }
    }
    if (!in) throw ContractViolation("params.bin truncated");
    return values;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const ModelConfig& config, const ParameterSet& params,
                     uint64_t seed, const json& provenance) {
    fs::create_directories(dir);

    json manifest;
    manifest["format"] = "mergeforge-checkpoint-v1";
    manifest["config"] = {{"vocab_size", config.vocab_size},
                          {"d_model", config.d_model},
                          {"n_layers", config.n_layers},
                          {"n_heads", config.n_heads},
                          {"max_seq_len", config.max_seq_len}};
    manifest["seed"] = seed;
    manifest["provenance"] = provenance;
    json layers = json::array();
    for (const auto& layer : params.layers()) {
        json jl;
        jl["name"] = layer.name;
        json jparams = json::array();
        for (const auto& [name, tensor] : layer.params) {
            jparams.push_back({{"name", name}, {"shape", tensor.shape()}});
        }
        jl["params"] = std::move(jparams);
        layers.push_back(std::move(jl));
    }
    manifest["layers"] = std::move(layers);

    {
        std::ofstream mf(dir / "manifest.json");
        if (!mf) throw ContractViolation("cannot write " + (dir / "manifest.json").string());
        mf << manifest.dump(2) << "\n";
    }
    {
        std::ofstream pf(dir / "params.bin", std::ios::binary);
        if (!pf) throw ContractViolation("cannot write " + (dir / "params.bin").string());
        write_doubles_le(pf, params.flatten());
    }
}

Checkpoint load_checkpoint(const fs::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw ContractViolation("checkpoint manifest not found: " + (dir / "manifest.json").string());
    json manifest = json::parse(mf);

    Checkpoint ck;
    const auto& jc = manifest.at("config");
    ck.config.vocab_size = jc.at("vocab_size").get<int32_t>();
    ck.config.d_model = jc.at("d_model").get<int32_t>();
    ck.config.n_layers = jc.at("n_layers").get<int32_t>();
    ck.config.n_heads = jc.at("n_heads").get<int32_t>();
    ck.config.max_seq_len = jc.at("max_seq_len").get<int32_t>();
    ck.seed = manifest.value("seed", 0ull);
    ck.provenance = manifest.value("provenance", json::object());

    std::vector<ParameterSet::Layer> layers;
    size_t total = 0;
    for (const auto& jl : manifest.at("layers")) {
        ParameterSet::Layer layer;
        layer.name = jl.at("name").get<std::string>();
        for (const auto& jp : jl.at("params")) {
            auto shape = jp.at("shape").get<std::vector<int64_t>>();
            total += static_cast<size_t>(shape_numel(shape));
            layer.params.emplace_back(jp.at("name").get<std::string>(), Tensor(std::move(shape)));
        }
        layers.push_back(std::move(layer));
    }
    ck.params = ParameterSet(std::move(layers));

    std::ifstream pf(dir / "params.bin", std::ios::binary);
    if (!pf) throw ContractViolation("params.bin not found in " + dir.string());
    std::vector<double> flat = read_doubles_le(pf, total);
    ck.params.assign_from_flat(flat);
    return ck;
}

}  // namespace mergeforge
