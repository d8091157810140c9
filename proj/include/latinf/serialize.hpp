#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "latinf/layers.hpp"

namespace latinf {

std::string sha256_hex(std::string_view bytes);

std::string read_file_bytes(const std::filesystem::path& path);
// Writes via a temporary sibling and rename, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// Binary parameter blob: magic, count, then (name, shape, float64 data) per
// entry in ParamSet order. Little-endian host layout.
std::string encode_params(const nn::ParamSet& params);
// Fills params in place. Names and shapes must match exactly; a malformed
// blob raises IntegrityError, a structural mismatch raises ContractError.
void decode_params(std::string_view blob, nn::ParamSet& params);

// SHA-256 of encode_params(params); used to assert frozenness.
std::string params_checksum(const nn::ParamSet& params);

}  // namespace latinf
