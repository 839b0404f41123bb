#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "pnmf/error.hpp"
#include "pnmf/matrix.hpp"

namespace testing {

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("pnmf_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline pnmf::DenseMatrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& gen, double lo = 0.0,
                                       double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  pnmf::DenseMatrix m(rows, cols);
  for (auto& v : m.data()) v = static_cast<float>(u(gen));
  return m;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(gen);
  return v;
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace testing

/// Evaluates `expr` and checks that it throws pnmf::Error with the given code.
#define CHECK_ERROR_CODE(expr, expected)                                  \
  do {                                                                    \
    bool thrown_ = false;                                                 \
    try {                                                                 \
      (void)(expr);                                                       \
    } catch (const pnmf::Error& e_) {                                     \
      thrown_ = true;                                                     \
      CHECK_MESSAGE(e_.code() == (expected), (std::string("got ") + std::string(pnmf::to_string(e_.code())))); \
    }                                                                     \
    CHECK_MESSAGE(thrown_, "no pnmf::Error from " #expr);                 \
  } while (0)
