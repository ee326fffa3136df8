#pragma once

#include <filesystem>

#include "megl/core.hpp"

namespace megl {

/// Binary PNM codec: P6 (RGB) and P5 (grayscale), maxval 255.
/// Pixel values map to [0, 1] as v / 255 and back via round(x * 255).

/// Reads a P5 or P6 file into a (C, H, W) float tensor, C = 1 or 3.
torch::Tensor read_pnm(const std::filesystem::path& path);

/// Writes a (1|3, H, W) or (H, W) tensor with values in [0, 1].
void write_pnm(const std::filesystem::path& path, const torch::Tensor& image);

/// Grayscale PFM ("Pf", little-endian float32, rows stored bottom to top).
/// Stores the values unquantized.
void write_pfm(const std::filesystem::path& path, const torch::Tensor& map);
/// Reads a grayscale PFM into an (H, W) float tensor.
torch::Tensor read_pfm(const std::filesystem::path& path);

}  // namespace megl
