#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moe/transformer.hpp"

namespace moe {

// MOEF container, version 1:
//   bytes 0-3   magic "MOEF"
//   bytes 4-7   version, u32 little-endian
//   bytes 8-15  header length in bytes, u64 little-endian
//   header      compact UTF-8 JSON {"config":{...},"metadata":{...},"tensors":[...]}
//               with tensor entries {byte_len, byte_offset, dtype:"f32", name, shape}
//               sorted by name; offsets are relative to the payload start
//   payload     raw little-endian float32 data, tensors back to back
inline constexpr char kCheckpointMagic[4] = {'M', 'O', 'E', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& model);
// Decoding checks the container only. Dense checkpoints ("kind" absent or
// "dense") are additionally validated against the dense schema by
// load_checkpoint; mixture checkpoints are validated when unpacked.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& model, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string checkpoint_kind(const Checkpoint& model);

}  // namespace moe
