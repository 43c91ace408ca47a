#pragma once

#include <filesystem>
#include <iosfwd>

#include "tpt/model.hpp"

namespace tpt {

/// Binary layout: "TPTW1", u32 tensor count, then per tensor u16 name length,
/// UTF-8 name, u8 rank, u32 dims, raw little-endian f64 values.
void write_weights(std::ostream& out, const ModelWeights& weights);
ModelWeights read_weights(std::istream& in);

void save_weights(const std::filesystem::path& path, const ModelWeights& weights);
ModelWeights load_weights(const std::filesystem::path& path);

namespace io {

void write_u8(std::ostream& out, std::uint8_t v);
void write_u16(std::ostream& out, std::uint16_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_f64(std::ostream& out, double v);
std::uint8_t read_u8(std::istream& in);
std::uint16_t read_u16(std::istream& in);
std::uint32_t read_u32(std::istream& in);
double read_f64(std::istream& in);

} // namespace io

} // namespace tpt
