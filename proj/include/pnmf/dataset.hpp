#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pnmf/matrix.hpp"

namespace pnmf {

/// Binary labels; tumor is the positive class everywhere.
enum class ClassLabel : int { Normal = 0, Tumor = 1 };

enum class Split { Train, Val, Test };

std::string_view to_string(Split split);
std::optional<Split> parse_split(std::string_view text);

/// Images as columns (K = side*side rows), labels aligned with columns.
struct DatasetSplit {
  DenseMatrix images;
  std::vector<int> labels;
  Split split = Split::Train;
  std::vector<std::string> sources;
  std::vector<std::string> skipped;
};

/// Feature vectors as columns (R x N or M x N after selection).
struct FeatureSet {
  DenseMatrix X;
  std::vector<int> labels;
  Split split = Split::Train;
  bool normalized = false;

  std::size_t dim() const noexcept { return X.rows(); }
  std::size_t count() const noexcept { return X.cols(); }
};

}  // namespace pnmf
