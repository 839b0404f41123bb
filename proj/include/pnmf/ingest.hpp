#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pnmf/dataset.hpp"

namespace pnmf::ingest {

struct SyntheticSpec {
  /// counts[split][class], split order train/val/test, class order normal/tumor.
  std::array<std::array<std::size_t, 2>, 3> counts{{{240, 240}, {80, 80}, {100, 100}}};
  std::size_t image_side = 64;
  double lesion_intensity = 0.9;
  double lesion_radius_min = 8.0;
  double lesion_radius_max = 12.0;
  double noise_sigma = 0.04;
  std::uint64_t seed = 1234;

  void validate() const;
};

struct SplitSet {
  DatasetSplit train;
  DatasetSplit val;
  DatasetSplit test;

  DatasetSplit& operator[](Split s);
  const DatasetSplit& operator[](Split s) const;
};

/// Head phantom images; tumor images add one bright disc. Pure function of spec.
SplitSet generate_synthetic(const SyntheticSpec& spec, unsigned threads = 1);

/// Loads `dir/<class>/*.{pgm,png}` in lexicographic relative-path order.
/// `class_dirs` maps folder name -> label (default normal=0, tumor=1).
DatasetSplit load_split(const std::filesystem::path& dir, std::size_t image_side, Split split,
                        unsigned threads = 1,
                        const std::map<std::string, int>& class_dirs = {{"normal", 0},
                                                                        {"tumor", 1}});

struct CocoSummary {
  /// counts[class name] for the reorganized split.
  std::map<std::string, std::size_t> counts;
  std::vector<std::string> skipped;
};

/// Copies the images of one COCO-annotated split into out_dir/<split>/<class>/.
/// `category_to_class` maps COCO category names to "normal"/"tumor"; unlisted
/// categories are rejected. Images with no annotation go to "normal", and an
/// image with any tumor-mapped annotation goes to "tumor".
CocoSummary reorganize_coco(const std::filesystem::path& annotation_file,
                            const std::filesystem::path& image_dir,
                            const std::filesystem::path& out_dir, std::string_view split_name,
                            const std::map<std::string, std::string>& category_to_class = {
                                {"normal", "normal"}, {"tumor", "tumor"}});

}  // namespace pnmf::ingest
