#include "pnmf/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>

#include <nlohmann/json.hpp>

#include "pnmf/error.hpp"
#include "pnmf/image_io.hpp"
#include "pnmf/parallel.hpp"
#include "pnmf/rng.hpp"

namespace pnmf {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

std::optional<Split> parse_split(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "val" || text == "valid") return Split::Val;
  if (text == "test") return Split::Test;
  return std::nullopt;
}

}  // namespace pnmf

namespace pnmf::ingest {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Normalised elliptical radius: < 1 inside.
double ellipse_radius(double x, double y, double cx, double cy, double ax, double ay) {
  const double dx = (x - cx) / ax;
  const double dy = (y - cy) / ay;
  return std::sqrt(dx * dx + dy * dy);
}

std::vector<float> render_phantom(const SyntheticSpec& spec, bool tumor, KeyedRng& rng) {
  const std::size_t side = spec.image_side;
  const double cx = rng.uniform(-0.01, 0.01);
  const double cy = rng.uniform(-0.01, 0.01);
  const double ax = 0.78 + rng.uniform(-0.01, 0.01);
  const double ay = 0.88 + rng.uniform(-0.01, 0.01);
  const double edge = 2.0 / static_cast<double>(side);  // one-pixel soft edge

  double lx = 0.0, ly = 0.0, lr = 0.0;
  if (tumor) {
    // Position within the inner 60% of the brain ellipse.
    for (;;) {
      lx = rng.uniform(-0.6, 0.6);
      ly = rng.uniform(-0.6, 0.6);
      if (lx * lx + ly * ly <= 0.36) break;
    }
    lx = cx + lx * ax;
    ly = cy + ly * ay;
    lr = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max) * 2.0 /
         static_cast<double>(side);
  }

  std::vector<float> px(side * side);
  for (std::size_t iy = 0; iy < side; ++iy) {
    const double y = (static_cast<double>(iy) + 0.5) / static_cast<double>(side) * 2.0 - 1.0;
    for (std::size_t ix = 0; ix < side; ++ix) {
      const double x = (static_cast<double>(ix) + 0.5) / static_cast<double>(side) * 2.0 - 1.0;
      const double r = ellipse_radius(x, y, cx, cy, ax, ay);
      const double head = 1.0 - smoothstep(1.0 - edge, 1.0 + edge, r);
      const double brain = 1.0 - smoothstep(0.9 - edge, 0.9 + edge, r);
      // Skull ring 0.85, brain tissue 0.45, two darker ventricles.
      double v = 0.85 * (head - brain) + 0.45 * brain;
      const double vl = ellipse_radius(x, y, cx - 0.18 * ax, cy - 0.05 * ay, 0.10, 0.22);
      const double vr = ellipse_radius(x, y, cx + 0.18 * ax, cy - 0.05 * ay, 0.10, 0.22);
      v -= 0.2 * (1.0 - smoothstep(1.0 - 3 * edge, 1.0 + 3 * edge, std::min(vl, vr)));
      if (tumor) {
        const double d = std::hypot(x - lx, y - ly) / lr;
        const double disc = 1.0 - smoothstep(1.0 - edge / lr, 1.0 + edge / lr, d);
        v = std::max(v, spec.lesion_intensity * disc);
      }
      v += spec.noise_sigma * rng.normal() * head;
      px[iy * side + ix] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return px;
}

DatasetSplit make_split(const SyntheticSpec& spec, Split split, unsigned threads) {
  const auto& counts = spec.counts[static_cast<std::size_t>(split)];
  const std::size_t n = counts[0] + counts[1];
  const std::size_t k = spec.image_side * spec.image_side;
  DatasetSplit out;
  out.split = split;
  out.images = DenseMatrix(k, n);
  out.labels.resize(n);
  out.sources.resize(n);
  std::vector<std::vector<float>> columns(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const int label = i < counts[0] ? 0 : 1;
    const std::size_t within = label == 0 ? i : i - counts[0];
    KeyedRng rng(spec.seed, "synthetic",
                 static_cast<std::uint64_t>(split) * 2 + static_cast<std::uint64_t>(label), within);
    columns[i] = render_phantom(spec, label == 1, rng);
  });
  for (std::size_t i = 0; i < n; ++i) {
    out.labels[i] = i < counts[0] ? 0 : 1;
    out.sources[i] = std::string(out.labels[i] == 0 ? "normal/" : "tumor/") + "synthetic_" +
                     std::to_string(out.labels[i] == 0 ? i : i - counts[0]);
    for (std::size_t r = 0; r < k; ++r) out.images(r, i) = columns[i][r];
  }
  return out;
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".pgm" || ext == ".png";
}

}  // namespace

void SyntheticSpec::validate() const {
  for (const auto& split : counts)
    for (std::size_t c : split)
      if (c == 0) fail(ErrorCode::BadConfig, "synthetic counts must be positive");
  if (image_side < 8) fail(ErrorCode::BadConfig, "image_side must be >= 8");
  if (!(lesion_intensity >= 0.0 && lesion_intensity <= 1.0)) {
    fail(ErrorCode::BadConfig, "lesion_intensity must lie in [0, 1]");
  }
  if (!(lesion_radius_min > 0.0 && lesion_radius_min <= lesion_radius_max &&
        lesion_radius_max < 0.25 * static_cast<double>(image_side))) {
    fail(ErrorCode::BadConfig, "lesion radius range must lie within the image bounds");
  }
  if (!(noise_sigma >= 0.0)) fail(ErrorCode::BadConfig, "noise_sigma must be >= 0");
}

DatasetSplit& SplitSet::operator[](Split s) {
  return s == Split::Train ? train : (s == Split::Val ? val : test);
}
const DatasetSplit& SplitSet::operator[](Split s) const {
  return s == Split::Train ? train : (s == Split::Val ? val : test);
}

SplitSet generate_synthetic(const SyntheticSpec& spec, unsigned threads) {
  spec.validate();
  return {make_split(spec, Split::Train, threads), make_split(spec, Split::Val, threads),
          make_split(spec, Split::Test, threads)};
}

DatasetSplit load_split(const fs::path& dir, std::size_t image_side, Split split, unsigned threads,
                        const std::map<std::string, int>& class_dirs) {
  if (image_side == 0) fail(ErrorCode::BadConfig, "image_side must be positive");
  if (!fs::is_directory(dir)) fail(ErrorCode::IoError, dir.string() + " is not a directory");

  struct Entry {
    std::string rel;
    fs::path path;
    int label;
  };
  std::vector<Entry> entries;
  for (const auto& [name, label] : class_dirs) {
    const fs::path class_dir = dir / name;
    std::size_t found = 0;
    if (fs::is_directory(class_dir)) {
      for (const auto& e : fs::directory_iterator(class_dir)) {
        if (!e.is_regular_file() || !is_image_file(e.path())) continue;
        entries.push_back({name + "/" + e.path().filename().string(), e.path(), label});
        ++found;
      }
    }
    if (found == 0) fail(ErrorCode::EmptyClass, "class folder '" + class_dir.string() + "' has no images");
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.rel < b.rel; });

  const std::size_t k = image_side * image_side;
  std::vector<std::optional<std::vector<float>>> columns(entries.size());
  std::vector<std::string> errors(entries.size());
  parallel_for(entries.size(), threads, [&](std::size_t i) {
    try {
      GrayImage img = read_image(entries[i].path);
      if (img.width != image_side || img.height != image_side) {
        img = resize_bilinear(img, image_side, image_side);
      }
      columns[i] = std::move(img.pixels);
    } catch (const Error& e) {
      errors[i] = entries[i].rel + ": " + e.what();
    }
  });

  DatasetSplit out;
  out.split = split;
  std::vector<std::size_t> kept;
  std::set<int> seen;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (columns[i]) {
      kept.push_back(i);
      seen.insert(entries[i].label);
    } else {
      out.skipped.push_back(errors[i]);
    }
  }
  for (const auto& [name, label] : class_dirs) {
    if (!seen.count(label)) fail(ErrorCode::EmptyClass, "no readable images for class '" + name + "'");
  }
  out.images = DenseMatrix(k, kept.size());
  for (std::size_t c = 0; c < kept.size(); ++c) {
    const auto& col = *columns[kept[c]];
    for (std::size_t r = 0; r < k; ++r) out.images(r, c) = std::clamp(col[r], 0.0f, 1.0f);
    out.labels.push_back(entries[kept[c]].label);
    out.sources.push_back(entries[kept[c]].rel);
  }
  return out;
}

CocoSummary reorganize_coco(const fs::path& annotation_file, const fs::path& image_dir,
                            const fs::path& out_dir, std::string_view split_name,
                            const std::map<std::string, std::string>& category_to_class) {
  for (const auto& [cat, cls] : category_to_class) {
    if (cls != "normal" && cls != "tumor") {
      fail(ErrorCode::BadConfig, "category '" + cat + "' maps to unknown class '" + cls + "'");
    }
  }
  json doc;
  {
    std::ifstream in(annotation_file);
    if (!in) fail(ErrorCode::IoError, "cannot open " + annotation_file.string());
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      fail(ErrorCode::ParseError, annotation_file.string() + ": " + e.what());
    }
  }

  CocoSummary summary;
  summary.counts = {{"normal", 0}, {"tumor", 0}};
  try {
    if (!doc.contains("images") || !doc.contains("annotations") || !doc.contains("categories")) {
      fail(ErrorCode::ParseError, "COCO file must contain images, annotations and categories");
    }
    std::map<std::int64_t, std::string> category_names;
    for (const auto& c : doc.at("categories")) {
      category_names[c.at("id").get<std::int64_t>()] = c.at("name").get<std::string>();
    }
    std::map<std::int64_t, std::string> image_class;
    for (const auto& a : doc.at("annotations")) {
      const auto image_id = a.at("image_id").get<std::int64_t>();
      const auto cat_id = a.at("category_id").get<std::int64_t>();
      auto name_it = category_names.find(cat_id);
      if (name_it == category_names.end()) {
        fail(ErrorCode::ParseError, "annotation references unknown category id " + std::to_string(cat_id));
      }
      auto map_it = category_to_class.find(name_it->second);
      if (map_it == category_to_class.end()) {
        fail(ErrorCode::BadConfig, "category '" + name_it->second + "' has no class mapping");
      }
      auto& cls = image_class[image_id];
      if (cls != "tumor") cls = map_it->second;
    }

    const fs::path split_dir = out_dir / std::string(split_name);
    fs::create_directories(split_dir / "normal");
    fs::create_directories(split_dir / "tumor");
    for (const auto& img : doc.at("images")) {
      const auto id = img.at("id").get<std::int64_t>();
      const auto file = img.at("file_name").get<std::string>();
      auto it = image_class.find(id);
      const std::string cls = it == image_class.end() ? "normal" : it->second;
      const fs::path src = image_dir / file;
      if (!fs::is_regular_file(src)) {
        summary.skipped.push_back(file + ": missing on disk");
        continue;
      }
      fs::copy_file(src, split_dir / cls / fs::path(file).filename(),
                    fs::copy_options::overwrite_existing);
      ++summary.counts[cls];
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, annotation_file.string() + ": " + e.what());
  } catch (const fs::filesystem_error& e) {
    fail(ErrorCode::IoError, e.what());
  }
  return summary;
}

}  // namespace pnmf::ingest
