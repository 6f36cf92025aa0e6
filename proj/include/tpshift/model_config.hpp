// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpshift/error.hpp"
#include "tpshift/units.hpp"

namespace tpshift {

/**
 * Shape and size of a served model.
 *
 * `weights_gb`, `gpu_memory_gb` and `activation_gb` are decimal gigabytes,
 * the unit model cards and GPU spec sheets use.
 */
struct ModelConfig {
    std::string name;
    int hidden_size = 0;
    int inter_size = 0;
    int num_experts = 1;
    int num_layers = 0;
    int num_kv_heads = 0;
    int head_dim = 0;
    int element_bytes = 2;
    double weights_gb = 0.0;
    std::vector<int> supported_tp{1, 2, 4};
    bool fused_gate_up = false;
    double gpu_memory_gb = 96.0;
    double activation_gb = 0.0;

    Bytes weights_bytes() const { return gb_to_bytes(weights_gb); }
    Bytes gpu_memory_bytes() const { return gb_to_bytes(gpu_memory_gb); }
    Bytes activation_bytes() const { return gb_to_bytes(activation_gb); }
    int max_tp() const { return *std::max_element(supported_tp.begin(), supported_tp.end()); }

    /// KV bytes one token occupies across all layers at TP1.
    Bytes kv_bytes_per_token() const {
        return static_cast<Bytes>(num_layers) * 2 * num_kv_heads * head_dim * element_bytes;
    }

    void validate() const {
        auto positive = [&](long long v, const char* key) {
            if (v < 1) {
                throw Error(ErrorCode::UsageError, "model '" + name + "': " + key + " must be >= 1");
            }
        };
        positive(hidden_size, "hidden_size");
        positive(inter_size, "inter_size");
        positive(num_experts, "num_experts");
        positive(num_layers, "num_layers");
        positive(num_kv_heads, "num_kv_heads");
        positive(head_dim, "head_dim");
        positive(element_bytes, "element_bytes");
        if (weights_gb <= 0.0) {
            throw Error(ErrorCode::UsageError, "model '" + name + "': weights_gb must be positive");
        }
        if (supported_tp.empty()) {
            throw Error(ErrorCode::UsageError, "model '" + name + "': supported_tp is empty");
        }
        for (int tp : supported_tp) {
            positive(tp, "supported_tp entry");
        }
    }
};

inline void from_json(const nlohmann::json& j, ModelConfig& m) {
    m.name = j.at("name").get<std::string>();
    m.hidden_size = j.at("hidden_size").get<int>();
    m.inter_size = j.at("inter_size").get<int>();
    m.num_experts = j.value("num_experts", 1);
    m.num_layers = j.at("num_layers").get<int>();
    m.num_kv_heads = j.at("num_kv_heads").get<int>();
    m.head_dim = j.at("head_dim").get<int>();
    m.element_bytes = j.value("element_bytes", 2);
    m.weights_gb = j.at("weights_gb").get<double>();
    m.supported_tp = j.value("supported_tp", std::vector<int>{1, 2, 4});
    m.fused_gate_up = j.value("fused_gate_up", false);
    m.gpu_memory_gb = j.value("gpu_memory_gb", 96.0);
    m.activation_gb = j.value("activation_gb", 0.0);
}

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
    j = nlohmann::json{{"name", m.name},
                       {"hidden_size", m.hidden_size},
                       {"inter_size", m.inter_size},
                       {"num_experts", m.num_experts},
                       {"num_layers", m.num_layers},
                       {"num_kv_heads", m.num_kv_heads},
                       {"head_dim", m.head_dim},
                       {"element_bytes", m.element_bytes},
                       {"weights_gb", m.weights_gb},
                       {"supported_tp", m.supported_tp},
                       {"fused_gate_up", m.fused_gate_up},
                       {"gpu_memory_gb", m.gpu_memory_gb},
                       {"activation_gb", m.activation_gb}};
}

// Shapes from the public model cards. Weight sizes for the dense models are
// the BF16 checkpoint sizes; the GPT-OSS entries are parameter count x 2 bytes.
inline const std::map<std::string, ModelConfig>& builtin_models() {
    static const std::map<std::string, ModelConfig> models = [] {
        std::map<std::string, ModelConfig> m;
        auto add = [&](ModelConfig c) { m.emplace(c.name, std::move(c)); };
        add({"qwen2.5-32b", 5120, 27648, 1, 64, 8, 128, 2, 62.34, {1, 2, 4}, false, 96.0, 14.3});
        add({"qwen3-32b", 5120, 25600, 1, 64, 8, 128, 2, 62.34, {1, 2, 4}, false, 96.0, 14.3});
        add({"llama2-7b", 4096, 11008, 1, 32, 32, 128, 2, 15.67, {1, 2, 4}, false, 40.0, 0.0});
        add({"llama3-8b", 4096, 14336, 1, 32, 8, 128, 2, 16.66, {1, 2, 4}, false, 40.0, 0.0});
        add({"llama-3.1-70b", 8192, 28672, 1, 80, 8, 128, 2, 141.11, {1, 2, 4}, false, 96.0, 0.0});
        add({"gpt-oss-120b", 2880, 2880, 128, 36, 8, 64, 2, 233.7, {1, 2, 4}, true, 96.0, 0.0});
        add({"gpt-oss-20b", 2880, 2880, 32, 24, 8, 64, 2, 41.8, {1, 2, 4}, true, 96.0, 0.0});
        return m;
    }();
    return models;
}

inline std::optional<ModelConfig> find_builtin_model(const std::string& name) {
    const auto& models = builtin_models();
    auto it = models.find(name);
    if (it == models.end()) {
        return std::nullopt;
    }
    return it->second;
}

/// Reads a JSON model description from disk.
inline ModelConfig load_model_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::IoError, "cannot open model config '" + path + "'");
    }
    ModelConfig m;
    try {
        m = nlohmann::json::parse(in).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ParseError, "model config '" + path + "': " + e.what());
    }
    m.validate();
    return m;
}

/// A builtin name or a path to a JSON file.
inline ModelConfig resolve_model(const std::string& name_or_path) {
    if (auto builtin = find_builtin_model(name_or_path)) {
        return *builtin;
    }
    return load_model_config(name_or_path);
}

}  // namespace tpshift
