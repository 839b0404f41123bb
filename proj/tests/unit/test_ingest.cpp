#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "pnmf/featstats.hpp"
#include "pnmf/image_io.hpp"
#include "pnmf/ingest.hpp"
#include "pnmf/nnmf.hpp"
#include "unit/support.hpp"

using namespace pnmf;
namespace fs = std::filesystem;

namespace {

void tiny_pgm(const fs::path& p, float level, std::size_t side = 4) {
  fs::create_directories(p.parent_path());
  write_pgm(GrayImage{side, side, std::vector<float>(side * side, level)}, p);
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(); }

nlohmann::json coco(std::vector<std::pair<int, std::string>> images, std::vector<std::pair<int, int>> annotations) {
  nlohmann::json j;
  j["categories"] = nlohmann::json::array({{{"id", 1}, {"name", "tumor"}}, {{"id", 2}, {"name", "normal"}}});
  j["images"] = nlohmann::json::array();
  for (const auto& [id, file] : images) j["images"].push_back({{"id", id}, {"file_name", file}});
  j["annotations"] = nlohmann::json::array();
  int aid = 1;
  for (const auto& [img, cat] : annotations) j["annotations"].push_back({{"id", aid++}, {"image_id", img}, {"category_id", cat}});
  return j;
}

double mean_brightness(const DatasetSplit& s, std::size_t n) {
  double m = 0.0;
  for (std::size_t r = 0; r < s.images.rows(); ++r) m += s.images(r, n);
  return m / static_cast<double>(s.images.rows());
}

// Best accuracy of any single threshold on a scalar score (either orientation).
double best_threshold_accuracy(const std::vector<double>& score, const std::vector<int>& y) {
  std::vector<double> cuts = score;
  std::sort(cuts.begin(), cuts.end());
  double best = 0.0;
  for (double c : cuts) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < y.size(); ++i) hit += (score[i] >= c) == (y[i] == 1);
    const double acc = static_cast<double>(hit) / static_cast<double>(y.size());
    best = std::max({best, acc, 1.0 - acc});
  }
  return best;
}

}  // namespace

TEST_SUITE("ingest") {
  TEST_CASE("coco: two tumor annotations and one unannotated image") {
    testing::TempDir dir("coco");
    for (const char* f : {"a.pgm", "b.pgm", "c.pgm"}) tiny_pgm(dir / "img" / f, 0.5f);
    write_json(dir / "ann.json", coco({{1, "a.pgm"}, {2, "b.pgm"}, {3, "c.pgm"}}, {{1, 1}, {2, 1}}));
    const auto s = ingest::reorganize_coco(dir / "ann.json", dir / "img", dir / "out", "train");
    CHECK(s.counts.at("tumor") == 2);
    CHECK(s.counts.at("normal") == 1);
    CHECK(s.skipped.empty());
    CHECK(fs::exists(dir / "out/train/tumor/a.pgm"));
    CHECK(fs::exists(dir / "out/train/tumor/b.pgm"));
    CHECK(fs::exists(dir / "out/train/normal/c.pgm"));
  }

  TEST_CASE("coco: empty annotation list sends everything to normal") {
    testing::TempDir dir("coco");
    for (const char* f : {"a.pgm", "b.pgm", "c.pgm"}) tiny_pgm(dir / "img" / f, 0.5f);
    write_json(dir / "ann.json", coco({{1, "a.pgm"}, {2, "b.pgm"}, {3, "c.pgm"}}, {}));
    const auto s = ingest::reorganize_coco(dir / "ann.json", dir / "img", dir / "out", "valid");
    CHECK(s.counts.at("normal") == 3);
    CHECK(s.counts.at("tumor") == 0);
  }

  TEST_CASE("coco: any tumor annotation wins over a normal one") {
    testing::TempDir dir("coco");
    tiny_pgm(dir / "img/a.pgm", 0.5f);
    write_json(dir / "ann.json", coco({{1, "a.pgm"}}, {{1, 2}, {1, 1}, {1, 2}}));
    const auto s = ingest::reorganize_coco(dir / "ann.json", dir / "img", dir / "out", "test");
    CHECK(s.counts.at("tumor") == 1);
  }

  TEST_CASE("coco: missing images are reported, not fatal") {
    testing::TempDir dir("coco");
    tiny_pgm(dir / "img/a.pgm", 0.5f);
    write_json(dir / "ann.json", coco({{1, "a.pgm"}, {2, "gone.pgm"}}, {{2, 1}}));
    const auto s = ingest::reorganize_coco(dir / "ann.json", dir / "img", dir / "out", "train");
    CHECK(s.counts.at("normal") == 1);
    CHECK(s.counts.at("tumor") == 0);
    REQUIRE(s.skipped.size() == 1);
    CHECK(s.skipped[0].find("gone.pgm") != std::string::npos);
  }

  TEST_CASE("coco: malformed input") {
    testing::TempDir dir("coco");
    fs::create_directories(dir / "img");
    std::ofstream(dir / "bad.json") << "{\"images\": [";
    CHECK_ERROR_CODE(ingest::reorganize_coco(dir / "bad.json", dir / "img", dir / "out", "train"), ErrorCode::ParseError);
    write_json(dir / "partial.json", {{"images", nlohmann::json::array()}});
    CHECK_ERROR_CODE(ingest::reorganize_coco(dir / "partial.json", dir / "img", dir / "out", "train"),
                     ErrorCode::ParseError);
    write_json(dir / "cat.json", coco({{1, "a.pgm"}}, {{1, 9}}));
    CHECK_ERROR_CODE(ingest::reorganize_coco(dir / "cat.json", dir / "img", dir / "out", "train"), ErrorCode::ParseError);
    write_json(dir / "ok.json", coco({{1, "a.pgm"}}, {{1, 1}}));
    CHECK_ERROR_CODE(ingest::reorganize_coco(dir / "ok.json", dir / "img", dir / "out", "train", {{"tumor", "lesion"}}),
                     ErrorCode::BadConfig);
  }

  TEST_CASE("load_split: lexicographic order, labels and resizing") {
    testing::TempDir dir("split");
    tiny_pgm(dir / "normal/b.pgm", 0.2f, 4);
    tiny_pgm(dir / "normal/a.pgm", 0.4f, 8);
    tiny_pgm(dir / "tumor/z.pgm", 1.0f, 4);
    const auto s = ingest::load_split(dir.path(), 6, Split::Val);
    REQUIRE(s.images.cols() == 3);
    CHECK(s.images.rows() == 36);
    CHECK(s.labels == std::vector<int>{0, 0, 1});
    CHECK(s.sources == std::vector<std::string>{"normal/a.pgm", "normal/b.pgm", "tumor/z.pgm"});
    CHECK(s.images(0, 0) == doctest::Approx(0.4).epsilon(1e-2));
    CHECK(s.images(35, 1) == doctest::Approx(0.2).epsilon(1e-2));
    CHECK(s.images(17, 2) == 1.0f);
    CHECK(s.split == Split::Val);
  }

  TEST_CASE("load_split: unreadable images are skipped, empty classes fail") {
    testing::TempDir dir("split");
    tiny_pgm(dir / "normal/a.pgm", 0.2f);
    tiny_pgm(dir / "tumor/t.pgm", 0.9f);
    std::ofstream(dir / "tumor/broken.png") << "not a png";
    const auto s = ingest::load_split(dir.path(), 4, Split::Train);
    CHECK(s.images.cols() == 2);
    REQUIRE(s.skipped.size() == 1);
    CHECK(s.skipped[0].find("broken.png") != std::string::npos);

    testing::TempDir empty("split");
    tiny_pgm(empty / "normal/a.pgm", 0.2f);
    fs::create_directories(empty / "tumor");
    CHECK_ERROR_CODE(ingest::load_split(empty.path(), 4, Split::Train), ErrorCode::EmptyClass);
  }

  TEST_CASE("synthetic generation is deterministic and bounded") {
    ingest::SyntheticSpec spec;
    spec.counts = {{{6, 5}, {2, 3}, {4, 4}}};
    spec.image_side = 24;
    spec.lesion_radius_min = 2.0;
    spec.lesion_radius_max = 4.0;
    const auto a = ingest::generate_synthetic(spec);
    const auto b = ingest::generate_synthetic(spec, 4);
    for (Split sp : {Split::Train, Split::Val, Split::Test}) {
      CHECK(a[sp].images == b[sp].images);
      CHECK(a[sp].labels == b[sp].labels);
      for (float v : a[sp].images.data()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
      }
    }
    CHECK(a.train.images.cols() == 11);
    CHECK(std::count(a.train.labels.begin(), a.train.labels.end(), 1) == 5);
    CHECK(a.val.images.cols() == 5);
    CHECK(a.test.images.rows() == 24u * 24u);
    spec.seed = 99;
    CHECK_FALSE(ingest::generate_synthetic(spec).train.images == a.train.images);
  }

  TEST_CASE("synthetic spec validation") {
    ingest::SyntheticSpec spec;
    spec.counts[1][0] = 0;
    CHECK_ERROR_CODE(spec.validate(), ErrorCode::BadConfig);
    spec = {};
    spec.lesion_radius_max = 40.0;
    CHECK_ERROR_CODE(spec.validate(), ErrorCode::BadConfig);
    spec = {};
    spec.lesion_intensity = 1.5;
    CHECK_ERROR_CODE(spec.validate(), ErrorCode::BadConfig);
  }

  TEST_CASE("default spec: a mean-brightness threshold reaches 0.9") {
    const auto s = ingest::generate_synthetic(ingest::SyntheticSpec{});
    std::vector<double> score;
    for (std::size_t n = 0; n < s.train.images.cols(); ++n) score.push_back(mean_brightness(s.train, n));
    CHECK(best_threshold_accuracy(score, s.train.labels) >= 0.9);
  }

  TEST_CASE("zero lesion intensity leaves the classes indistinguishable downstream") {
    ingest::SyntheticSpec spec;
    spec.counts = {{{300, 300}, {1, 1}, {1, 1}}};
    spec.image_side = 16;
    spec.lesion_radius_min = 2.0;
    spec.lesion_radius_max = 3.0;
    spec.lesion_intensity = 0.0;
    const auto s = ingest::generate_synthetic(spec);
    nnmf::FitOptions fo;
    fo.rank = 4;
    fo.max_iters = 150;
    const auto model = nnmf::fit(s.train.images, fo);
    for (std::size_t r = 0; r < fo.rank; ++r) {
      std::vector<double> pos, neg;
      for (std::size_t n = 0; n < s.train.labels.size(); ++n)
        (s.train.labels[n] == 1 ? pos : neg).push_back(model.H_train(r, n));
      CHECK(std::abs(featstats::auc(pos, neg) - 0.5) <= 0.1);
    }
  }
}
