#pragma once

// Checkpoint container: "MMR1" magic, a little-endian u32 header length, a
// JSON header (config, training step, tensor manifest, per-layer router
// state) and a payload of raw little-endian float32 arrays in manifest
// order. Offsets are relative to the payload start, contiguous and
// non-overlapping.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmr/model.hpp"

namespace mmr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload layout assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'M', 'M', 'R', '1'};

template <class Real>
void save_checkpoint(const Model<Real>& model, const std::string& path, std::uint64_t step) {
    nlohmann::json header;
    header["config"] = model.config();
    header["step"] = step;

    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& p : model.params()) {
        manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(p.tensor.size()) * sizeof(float);
    }
    header["manifest"] = std::move(manifest);

    nlohmann::json routers = nlohmann::json::array();
    if (model.config().ffn == FfnKind::moe) {
        for (const auto& blk : model.blocks()) {
            std::vector<double> bias(blk.router.bias.begin(), blk.router.bias.end());
            routers.push_back({{"bias", bias},
                               {"loads", blk.router.loads},
                               {"strategy", to_string(blk.router.strategy)},
                               {"gamma", blk.router.gamma},
                               {"alpha", blk.router.alpha}});
        }
    }
    header["router"] = std::move(routers);

    const std::string header_str = header.dump();
    if (header_str.size() > UINT32_MAX)
        throw std::runtime_error("checkpoint: header too large");

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    out.write(kCheckpointMagic, 4);
    const std::uint32_t hlen = static_cast<std::uint32_t>(header_str.size());
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& p : model.params()) {
        if constexpr (std::is_same_v<Real, float>) {
            out.write(reinterpret_cast<const char*>(p.tensor.data()),
                      static_cast<std::streamsize>(p.tensor.size() * sizeof(float)));
        } else {
            std::vector<float> tmp(p.tensor.size());
            for (std::size_t i = 0; i < tmp.size(); ++i)
                tmp[i] = static_cast<float>(p.tensor.data()[i]);
            out.write(reinterpret_cast<const char*>(tmp.data()),
                      static_cast<std::streamsize>(tmp.size() * sizeof(float)));
        }
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

template <class Real>
struct LoadedCheckpoint {
    Model<Real> model;
    std::uint64_t step = 0;
};

template <class Real>
LoadedCheckpoint<Real> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    std::uint32_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 4);
    if (!in) throw std::runtime_error("checkpoint: truncated header length");
    std::string header_str(hlen, '\0');
    in.read(header_str.data(), hlen);
    if (!in) throw std::runtime_error("checkpoint: truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("checkpoint: header is not valid JSON: ") + e.what());
    }

    ModelConfig cfg = header.at("config").get<ModelConfig>();
    LoadedCheckpoint<Real> loaded{Model<Real>(cfg), header.value("step", 0ull)};
    auto& model = loaded.model;

    const auto& manifest = header.at("manifest");
    const auto& params = model.params();
    if (manifest.size() != params.size())
        throw std::runtime_error("checkpoint: manifest has " + std::to_string(manifest.size()) +
                                 " tensors, model expects " + std::to_string(params.size()));

    std::uint64_t expect_offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& entry = manifest[i];
        if (entry.at("name").template get<std::string>() != params[i].name)
            throw std::runtime_error("checkpoint: manifest tensor '" +
                                     entry.at("name").template get<std::string>() +
                                     "' does not match expected '" + params[i].name + "'");
        const auto shape = entry.at("shape").template get<std::vector<std::size_t>>();
        if (shape != params[i].tensor.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + params[i].name);
        if (entry.at("offset").template get<std::uint64_t>() != expect_offset)
            throw std::runtime_error("checkpoint: non-contiguous offset for " + params[i].name);
        expect_offset += static_cast<std::uint64_t>(params[i].tensor.size()) * sizeof(float);
    }

    for (const auto& p : params) {
        std::vector<float> tmp(p.tensor.size());
        in.read(reinterpret_cast<char*>(tmp.data()),
                static_cast<std::streamsize>(tmp.size() * sizeof(float)));
        if (!in) throw std::runtime_error("checkpoint: truncated payload at " + p.name);
        auto t = p.tensor;  // shared handle onto the model's storage
        for (std::size_t i = 0; i < tmp.size(); ++i) t.data()[i] = static_cast<Real>(tmp[i]);
    }
    // payload must end exactly at the manifest total
    in.peek();
    if (!in.eof()) throw std::runtime_error("checkpoint: trailing bytes after payload");

    if (cfg.ffn == FfnKind::moe && header.contains("router")) {
        const auto& routers = header.at("router");
        if (routers.size() != cfg.layers)
            throw std::runtime_error("checkpoint: router state count mismatch");
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            auto& state = model.router_state(l);
            const auto bias = routers[l].at("bias").template get<std::vector<double>>();
            if (bias.size() != state.bias.size())
                throw std::runtime_error("checkpoint: router bias length mismatch");
            for (std::size_t i = 0; i < bias.size(); ++i)
                state.bias[i] = static_cast<Real>(bias[i]);
            state.loads = routers[l].value("loads", std::vector<double>{});
            state.strategy =
                balance_strategy_from_string(routers[l].at("strategy").template get<std::string>());
            state.gamma = routers[l].value("gamma", state.gamma);
            state.alpha = routers[l].value("alpha", state.alpha);
        }
    }
    return loaded;
}

}  // namespace mmr
