#pragma once

// On-disk container shared by every pipeline stage:
//   "PNMF1" | rows u64 LE | cols u64 LE | payload f32 LE row-major | FNV-1a-64 u64 LE
// plus a JSON sidecar `<stem>.manifest.json` next to the data file.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pnmf/matrix.hpp"

namespace pnmf {

enum class TensorRole {
  V_train,
  V_val,
  V_test,
  W,
  H,
  X_train,
  X_val,
  X_test,
  labels,
  schedule,
  weights,
  pairs,
  probs,
};

std::string_view to_string(TensorRole role);
std::optional<TensorRole> parse_role(std::string_view text);

struct TensorManifest {
  std::string name;
  TensorRole role = TensorRole::weights;
  std::vector<std::uint64_t> shape;
  std::uint64_t checksum = 0;
  std::string created_by_stage;
  std::uint64_t created_by_seed = 0;
};

/// Checksum of the little-endian f32 payload bytes.
std::uint64_t payload_checksum(const DenseMatrix& m) noexcept;

std::filesystem::path sidecar_path(const std::filesystem::path& tensor_path);

/// Writes the container and its sidecar. Shape and checksum in the manifest
/// are filled from the matrix; the stored manifest is returned.
TensorManifest write_tensor(const DenseMatrix& m, TensorManifest manifest,
                            const std::filesystem::path& path);

std::pair<DenseMatrix, TensorManifest> read_tensor(const std::filesystem::path& path);

std::string checksum_hex(std::uint64_t checksum);

/// FNV-1a-64 of a whole file's bytes; used for stage dataflow bookkeeping.
std::uint64_t file_checksum(const std::filesystem::path& path);

}  // namespace pnmf
