#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "osreg/network.hpp"
#include "osreg/optim.hpp"

namespace osreg {

/// Checkpoint container, all integers and reals little-endian:
///
///   "OSREGCKP"            8 bytes magic
///   u32 version           kCheckpointVersion
///   u8  scalar bytes      4 (float) or 8 (double)
///   u32 epoch             completed epochs
///   u32 n, n bytes        ModelConfig as JSON
///   6 x f64               normalization mean[3], stddev[3]
///   u64 adam step
///   u32 array count, then per array:
///     u32 n, n bytes name; u8 rank; rank x u64 extents; values
///   u64 FNV-1a of every preceding byte
///
/// Arrays are the parameters, the batch-norm running statistics, and the
/// Adam moments under "adam.m.<param>" and "adam.v.<param>", in that order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  Model<T> model;
  AdamState<T> adam;
  std::uint32_t epoch = 0;
};

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Model<T>& model, const AdamState<T>& adam, std::uint32_t epoch);

/// Throws std::runtime_error on bad magic, version or scalar width, on
/// truncation, and on checksum mismatch.
template <typename T>
Checkpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const AdamState<T>& adam,
                     std::uint32_t epoch);
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

}  // namespace osreg
