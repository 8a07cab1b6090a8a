#pragma once

// On-disk formats: DCSET1 synthetic-set checkpoints, PGM image grids, CSV rows
// and JSON-lines records.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradmatch/autodiff.hpp"
#include "gradmatch/data.hpp"

namespace gradmatch::persist {

// DCSET1 layout, all integers little-endian:
//   "DCSET1"                 6 bytes
//   version                  u16 (1)
//   precision                u16 (64 or 32: the arithmetic the set was made with)
//   C, IPC, C_in, H, W       u32 each
//   labels                   u32 x C*IPC, class-major
//   payload                  f64 x C*IPC*C_in*H*W, little-endian IEEE-754
//   crc32(payload)           u32 (zlib polynomial)
inline constexpr char kMagic[6] = {'D', 'C', 'S', 'E', 'T', '1'};
inline constexpr std::uint16_t kVersion = 1;

struct Checkpoint {
  data::SyntheticSet set;
  ad::Precision precision = ad::Precision::f64;
};

std::vector<std::uint8_t> encode_checkpoint(const data::SyntheticSet& set, ad::Precision precision);
// Throws FormatError on bad magic/version, inconsistent sizes, unbalanced
// labels or a checksum mismatch.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const data::SyntheticSet& set, ad::Precision precision);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

// Binary PGM (P5) with one row of tiles per class and one column per image;
// pixels are de-normalized, clamped to [0, 1] and averaged over channels.
void write_pgm_grid(const std::filesystem::path& path, const data::SyntheticSet& set, const data::NormStats& stats);

// Appends one row; writes the header first when the file is new or empty.
void append_csv_row(const std::filesystem::path& path, std::span<const std::string> header,
                    std::span<const std::string> row);
std::string csv_escape(const std::string& field);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace gradmatch::persist
