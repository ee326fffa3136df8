#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "megl/core.hpp"

namespace megl {

/// Binary checkpoint container, little-endian throughout:
///
///   "MEGLCKPT"                     8-byte magic
///   u32 version (= 1)
///   u64 config hash                FNV-1a of the serialized config text
///   u64 n, n bytes                 serialized config text
///   u64 entry count
///   per entry:
///     u32 n, n bytes               entry name
///     u8 kind                      0 = array, 1 = text
///     array: u8 dtype (0 f32, 1 f64, 2 i64, 3 u8, 4 bool), u32 ndim,
///            ndim x i64 dims, raw row-major element bytes
///     text:  u64 n, n bytes
///   u64 trailer                    FNV-1a of every preceding byte
///
/// Arrays keep their dtype and bytes, so a write/read cycle is exact.
struct Checkpoint {
  ExperimentConfig config;
  std::vector<std::pair<std::string, torch::Tensor>> arrays;
  std::map<std::string, std::string> texts;

  const torch::Tensor* find(const std::string& name) const;
  std::vector<std::pair<std::string, torch::Tensor>> with_prefix(const std::string& prefix) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Appends a module's parameters and buffers as "<prefix><name>" arrays.
void export_module(torch::nn::Module& module, const std::string& prefix, Checkpoint& checkpoint);
/// Copies arrays back into a module of identical structure.
void import_module(torch::nn::Module& module, const std::string& prefix, const Checkpoint& checkpoint);

}  // namespace megl
