#pragma once

#include <cstddef>
#include <filesystem>
#include <json.hpp>
#include <string>

#include "debiaslens/sae.hpp"

namespace debiaslens {

/// On-disk SAE checkpoint.
///
/// Layout: 8-byte magic `DBLSAE01`, u32 little-endian header length, a UTF-8
/// JSON header, then the parameter payload as little-endian f32 in the order
/// w_enc (d x omega, row-major), w_dec (omega x d, row-major), b1, b2. The
/// header carries d, omega, k, the prefix schedule, an echo of the training
/// configuration, the format version and the payload SHA-256.
struct Checkpoint {
  SaeParams params;
  std::size_t k = 0;
  nlohmann::json train_config = nlohmann::json::object();
};

inline constexpr int kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on a bad magic/header, CorruptionError on truncation or
/// checksum mismatch.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// SHA-256 of the f32 parameter payload; the checkpoint's identity.
std::string checkpoint_id(const SaeParams& params);

}  // namespace debiaslens
