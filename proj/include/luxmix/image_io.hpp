#pragma once

#include "luxmix/image.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace luxmix {

// Portable float map ("PF", little-endian, scanlines stored bottom-to-top).
void write_pfm(const std::filesystem::path& path, const HdrImage& img);
HdrImage read_pfm(const std::filesystem::path& path);

// Raw "LXHD": magic, u32 width, u32 height, f32 RGB rows top-to-bottom, all little-endian.
std::vector<std::uint8_t> encode_lxhd(const HdrImage& img);
HdrImage decode_lxhd(const std::vector<std::uint8_t>& bytes);
void write_lxhd(const std::filesystem::path& path, const HdrImage& img);
HdrImage read_lxhd(const std::filesystem::path& path);

/// Picks the HDR reader from the extension (.pfm or .lxhd).
HdrImage read_hdr(const std::filesystem::path& path);
void write_hdr(const std::filesystem::path& path, const HdrImage& img);

/// 8-bit RGB PNG of display-referred values. `compression` is the zlib level.
std::vector<std::uint8_t> encode_png(const LdrImage& img, int compression = 1);
void write_png(const std::filesystem::path& path, const LdrImage& img);
LdrImage read_png(const std::filesystem::path& path);

/// Masks are single-channel 8-bit PNG, 0 or 255; any nonzero reads as set.
void write_mask_png(const std::filesystem::path& path, const Mask& mask);
Mask read_mask_png(const std::filesystem::path& path);

}  // namespace luxmix
