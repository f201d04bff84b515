#pragma once

#include <torch/torch.h>

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vendor_json.hpp"

namespace mvr {

// Flat binary container for named tensors. Entries are stored sorted by name
// so identical weights always produce identical bytes (and hashes).
void save_tensor_map(const std::map<std::string, torch::Tensor>& tensors,
                     const std::string& path);
std::map<std::string, torch::Tensor> load_tensor_map(const std::string& path);

std::map<std::string, torch::Tensor> named_parameters_map(const torch::nn::Module& module);
void load_into_module(torch::nn::Module& module,
                      const std::map<std::string, torch::Tensor>& tensors);

// Order-independent digest of named tensors (names + raw bytes).
std::string weights_hash(const std::map<std::string, torch::Tensor>& tensors);
std::string module_hash(const torch::nn::Module& module);

void write_json(const nlohmann::json& j, const std::string& path);
nlohmann::json read_json(const std::string& path);

}  // namespace mvr
