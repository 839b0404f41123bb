#include "pnmf/tensor_store.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pnmf/error.hpp"
#include "pnmf/rng.hpp"

namespace pnmf {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 5> kMagic{'P', 'N', 'M', 'F', '1'};
constexpr std::size_t kHeaderBytes = kMagic.size() + 2 * sizeof(std::uint64_t);

static_assert(std::endian::native == std::endian::little,
              "tensor-store assumes a little-endian host");

constexpr std::array<std::string_view, 13> kRoleNames{
    "V_train", "V_val",  "V_test", "W",       "H",     "X_train", "X_val",
    "X_test",  "labels", "schedule", "weights", "pairs", "probs"};

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return v;
}

std::uint64_t parse_hex(const std::string& s) {
  std::size_t pos = 0;
  std::string body = s.rfind("0x", 0) == 0 ? s.substr(2) : s;
  std::uint64_t v = std::stoull(body, &pos, 16);
  if (pos != body.size()) throw std::invalid_argument("bad hex");
  return v;
}

}  // namespace

std::string_view to_string(TensorRole role) { return kRoleNames[static_cast<std::size_t>(role)]; }

std::optional<TensorRole> parse_role(std::string_view text) {
  for (std::size_t i = 0; i < kRoleNames.size(); ++i)
    if (kRoleNames[i] == text) return static_cast<TensorRole>(i);
  return std::nullopt;
}

std::uint64_t payload_checksum(const DenseMatrix& m) noexcept {
  return fnv1a64(std::as_bytes(m.data()));
}

std::string checksum_hex(std::uint64_t checksum) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(16) << std::setfill('0') << checksum;
  return os.str();
}

fs::path sidecar_path(const fs::path& tensor_path) {
  fs::path p = tensor_path;
  p.replace_filename(tensor_path.stem().string() + ".manifest.json");
  return p;
}

TensorManifest write_tensor(const DenseMatrix& m, TensorManifest manifest, const fs::path& path) {
  if (m.rows() == 0 || m.cols() == 0) {
    fail(ErrorCode::WriteRejected, "matrix '" + manifest.name + "' has a zero dimension");
  }
  if (!m.all_finite()) {
    fail(ErrorCode::WriteRejected, "matrix '" + manifest.name + "' contains non-finite entries");
  }
  manifest.shape = {m.rows(), m.cols()};
  manifest.checksum = payload_checksum(m);

  std::string blob;
  blob.reserve(kHeaderBytes + m.size() * 4 + 8);
  blob.append(kMagic.data(), kMagic.size());
  put_u64(blob, m.rows());
  put_u64(blob, m.cols());
  blob.append(reinterpret_cast<const char*>(m.data().data()), m.size() * sizeof(float));
  put_u64(blob, manifest.checksum);

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
  }

  json side = {{"name", manifest.name},
               {"role", std::string(to_string(manifest.role))},
               {"shape", manifest.shape},
               {"checksum", checksum_hex(manifest.checksum)},
               {"created_by", {{"stage", manifest.created_by_stage}, {"seed", manifest.created_by_seed}}}};
  std::ofstream sout(sidecar_path(path), std::ios::trunc);
  if (!sout) fail(ErrorCode::IoError, "cannot write sidecar for " + path.string());
  sout << side.dump(2) << '\n';
  if (!sout) fail(ErrorCode::IoError, "short write to sidecar of " + path.string());
  return manifest;
}

std::pair<DenseMatrix, TensorManifest> read_tensor(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (blob.size() < kMagic.size() || std::memcmp(blob.data(), kMagic.data(), kMagic.size()) != 0) {
    fail(ErrorCode::FormatError, path.string() + " is not a PNMF1 container");
  }
  if (blob.size() < kHeaderBytes) fail(ErrorCode::CorruptFile, path.string() + ": truncated header");
  const std::uint64_t rows = get_u64(blob.data() + 5);
  const std::uint64_t cols = get_u64(blob.data() + 13);
  if (rows == 0 || cols == 0 || rows > (1ULL << 32) || cols > (1ULL << 32)) {
    fail(ErrorCode::CorruptFile, path.string() + ": implausible shape");
  }
  const std::uint64_t payload_bytes = rows * cols * sizeof(float);
  if (blob.size() != kHeaderBytes + payload_bytes + 8) {
    fail(ErrorCode::CorruptFile, path.string() + ": size does not match header (truncated?)");
  }
  std::vector<float> data(rows * cols);
  std::memcpy(data.data(), blob.data() + kHeaderBytes, payload_bytes);
  DenseMatrix m(rows, cols, std::move(data));
  const std::uint64_t stored = get_u64(blob.data() + kHeaderBytes + payload_bytes);
  const std::uint64_t actual = payload_checksum(m);
  if (stored != actual) fail(ErrorCode::CorruptFile, path.string() + ": payload checksum mismatch");

  const fs::path side = sidecar_path(path);
  std::ifstream sin(side);
  if (!sin) {
    fail(ErrorCode::FormatError, "missing sidecar " + side.string() +
                                     "; re-run the stage that produced " + path.filename().string());
  }
  TensorManifest manifest;
  try {
    json j = json::parse(sin);
    manifest.name = j.at("name").get<std::string>();
    auto role = parse_role(j.at("role").get<std::string>());
    if (!role) fail(ErrorCode::FormatError, side.string() + ": unknown role");
    manifest.role = *role;
    manifest.shape = j.at("shape").get<std::vector<std::uint64_t>>();
    manifest.checksum = parse_hex(j.at("checksum").get<std::string>());
    manifest.created_by_stage = j.at("created_by").at("stage").get<std::string>();
    manifest.created_by_seed = j.at("created_by").at("seed").get<std::uint64_t>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(ErrorCode::FormatError, side.string() + ": " + e.what());
  }
  if (manifest.checksum != actual) {
    fail(ErrorCode::CorruptFile, side.string() + ": manifest checksum does not match payload");
  }
  if (manifest.shape != std::vector<std::uint64_t>{rows, cols}) {
    fail(ErrorCode::CorruptFile, side.string() + ": manifest shape does not match payload");
  }
  return {std::move(m), std::move(manifest)};
}

std::uint64_t file_checksum(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(std::as_bytes(std::span(blob.data(), blob.size())));
}

}  // namespace pnmf
