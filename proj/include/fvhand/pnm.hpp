#pragma once

// Binary portable pixmaps: P6 (RGB, maxval 255) and P5 (gray, maxval 255).

#include <cstdint>
#include <filesystem>
#include <vector>

namespace fvhand::pnm {

struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;  // 3 for P6, 1 for P5
  std::vector<std::uint8_t> data;
};

std::vector<std::uint8_t> encode(const Image& image);
// Throws DataError on malformed input.
Image decode(const std::vector<std::uint8_t>& bytes);

void write(const std::filesystem::path& path, const Image& image);
Image read(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace fvhand::pnm
