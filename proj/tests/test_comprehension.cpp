#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "refexp/comprehension.hpp"
#include "refexp/errors.hpp"
#include "refexp/rng_util.hpp"

using namespace refexp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("refexp_comp_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

ObjectRegion make_region(std::uint64_t id, std::uint64_t scene_id, int category,
                         BoundingBox box, std::vector<double> feature) {
  ObjectRegion r;
  r.region_id = id;
  r.scene_id = scene_id;
  r.category_id = category;
  r.box = box;
  r.feature = std::move(feature);
  return r;
}

// One 100x100 scene, four same-category regions on a horizontal row, one
// expression per region whose first token encodes the region id (id - 10).
Dataset row_dataset() {
  Dataset ds;
  Scene scene;
  scene.scene_id = 1;
  scene.width = 100.0;
  scene.height = 100.0;
  for (std::uint64_t id = 10; id < 14; ++id) {
    double x = 10.0 + 20.0 * static_cast<double>(id - 10);
    scene.regions.push_back(make_region(
        id, 1, 7, BoundingBox{x, 40.0, x + 10.0, 50.0},
        {static_cast<double>(id - 10), 1.0, 0.0, 0.5}));
  }
  scene.context_features[ContextSource::kGlobal] = {0.5, 0.5, 0.5, 0.5};
  ds.scenes.push_back(scene);
  for (std::uint64_t id = 10; id < 14; ++id) {
    RefExpression expr;
    expr.expression_id = 100 + id;
    expr.region_id = id;
    expr.token_ids = {static_cast<int>(id - 10), Vocabulary::kEnd};
    ds.expressions.push_back(expr);
  }
  ds.feature_dim = 4;
  ds.rebuild_index();
  return ds;
}

}  // namespace

TEST_CASE("iou matches hand-computed overlaps") {
  BoundingBox a{0.0, 0.0, 2.0, 2.0};
  BoundingBox b{1.0, 1.0, 3.0, 3.0};
  // intersection 1, union 4 + 4 - 1 = 7
  CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(iou(b, a) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));

  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(a, BoundingBox{5.0, 5.0, 6.0, 6.0}) == 0.0);   // disjoint
  CHECK(iou(a, BoundingBox{2.0, 0.0, 4.0, 2.0}) == 0.0);   // shared edge only
  CHECK(iou(BoundingBox{0.0, 0.0, 4.0, 4.0}, BoundingBox{1.0, 1.0, 3.0, 3.0}) ==
        doctest::Approx(4.0 / 16.0));                      // containment
  CHECK(iou(BoundingBox{1.0, 1.0, 1.0, 1.0}, BoundingBox{1.0, 1.0, 1.0, 1.0}) == 0.0);
}

TEST_CASE("iou is symmetric on random boxes") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    auto box = [&] {
      double x = uniform_real(rng, 0.0, 50.0);
      double y = uniform_real(rng, 0.0, 50.0);
      return BoundingBox{x, y, x + uniform_real(rng, 1.0, 30.0),
                         y + uniform_real(rng, 1.0, 30.0)};
    };
    BoundingBox a = box();
    BoundingBox b = box();
    CHECK(iou(a, b) == doctest::Approx(iou(b, a)).epsilon(1e-14));
    CHECK(iou(a, b) >= 0.0);
    CHECK(iou(a, b) <= 1.0);
  }
}

TEST_CASE("comprehend ranks by score with id tie-break") {
  Dataset ds = row_dataset();
  const Scene& scene = ds.scenes[0];
  std::vector<int> tokens = {2, Vocabulary::kEnd};

  SUBCASE("descending by score") {
    auto scorer = [](const std::vector<int>&, const ObjectRegion& candidate,
                     std::span<const ObjectRegion> candidates, const Scene&) {
      CHECK(candidates.size() == 4);
      return -std::abs(static_cast<double>(candidate.region_id) - 12.0);
    };
    auto ranked = comprehend(tokens, scene.regions, scene, scorer);
    REQUIRE(ranked.size() == 4);
    CHECK(ranked[0].region_id == 12);
    CHECK(ranked[0].score == 0.0);
    // 11 and 13 tie at -1; the lower id comes first
    CHECK(ranked[1].region_id == 11);
    CHECK(ranked[2].region_id == 13);
    CHECK(ranked[3].region_id == 10);
  }

  SUBCASE("constant scores fall back to ascending ids") {
    auto scorer = [](const std::vector<int>&, const ObjectRegion&,
                     std::span<const ObjectRegion>, const Scene&) { return 1.25; };
    auto ranked = comprehend(tokens, scene.regions, scene, scorer);
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      CHECK(ranked[i].region_id == 10 + i);
    }
  }

  SUBCASE("no candidates is rejected") {
    std::vector<ObjectRegion> none;
    auto scorer = [](const std::vector<int>&, const ObjectRegion&,
                     std::span<const ObjectRegion>, const Scene&) { return 0.0; };
    CHECK_THROWS_AS(comprehend(tokens, none, scene, scorer), DomainError);
  }
}

TEST_CASE("random scorer sits at chance accuracy") {
  Dataset ds = row_dataset();
  const Scene& scene = ds.scenes[0];
  std::mt19937_64 rng(2024);
  auto scorer = [&rng](const std::vector<int>&, const ObjectRegion&,
                       std::span<const ObjectRegion>, const Scene&) {
    return uniform_unit(rng);
  };
  // Four candidates: a scorer that ignores everything must be right about a
  // quarter of the time. 2000 seeded trials; +-3 sigma is ~0.029.
  const int trials = 2000;
  int hits = 0;
  std::vector<int> tokens = {0, Vocabulary::kEnd};
  for (int t = 0; t < trials; ++t) {
    auto ranked = comprehend(tokens, scene.regions, scene, scorer);
    if (ranked.front().region_id == 10) ++hits;
  }
  double rate = static_cast<double>(hits) / trials;
  CHECK(rate > 0.25 - 0.03);
  CHECK(rate < 0.25 + 0.03);
}

TEST_CASE("evaluate_comprehension against annotated regions") {
  Dataset ds = row_dataset();

  SUBCASE("a scorer that decodes the token is always right") {
    auto scorer = [](const std::vector<int>& tokens, const ObjectRegion& candidate,
                     std::span<const ObjectRegion>, const Scene&) {
      return tokens[0] == static_cast<int>(candidate.region_id - 10) ? 1.0 : 0.0;
    };
    auto result = evaluate_comprehension(ds, {}, scorer);
    CHECK(result.total == 4);
    CHECK(result.correct == 4);
    CHECK(result.accuracy() == doctest::Approx(1.0));
  }

  SUBCASE("an inverted scorer is always wrong") {
    auto scorer = [](const std::vector<int>& tokens, const ObjectRegion& candidate,
                     std::span<const ObjectRegion>, const Scene&) {
      return tokens[0] == static_cast<int>(candidate.region_id - 10) ? -1.0 : 0.0;
    };
    auto result = evaluate_comprehension(ds, {}, scorer);
    CHECK(result.total == 4);
    CHECK(result.correct == 0);
    CHECK(result.accuracy() == 0.0);
  }

  SUBCASE("region filter restricts the evaluated expressions") {
    auto scorer = [](const std::vector<int>& tokens, const ObjectRegion& candidate,
                     std::span<const ObjectRegion>, const Scene&) {
      return tokens[0] == static_cast<int>(candidate.region_id - 10) ? 1.0 : 0.0;
    };
    auto result = evaluate_comprehension(ds, {11, 13}, scorer);
    CHECK(result.total == 2);
    CHECK(result.correct == 2);
  }
}

TEST_CASE("evaluate_comprehension against detections") {
  Dataset ds = row_dataset();
  // the scorer picks the detection whose id the expression names
  auto scorer = [](const std::vector<int>& tokens, const ObjectRegion& candidate,
                   std::span<const ObjectRegion>, const Scene&) {
    return tokens[0] == static_cast<int>(candidate.region_id % 10) ? 1.0 : 0.0;
  };

  SUBCASE("overlap above a half counts, below does not") {
    DetectionSet det;
    // detection 900+k should match region 10+k; give 900 a good box
    // (IoU with the truth = 0.8) and 901 a disjoint one
    det.by_scene[1] = {
        make_region(900, 1, 7, BoundingBox{12.0, 40.0, 20.0, 50.0}, {0.0, 1.0, 0.0, 0.5}),
        make_region(901, 1, 7, BoundingBox{40.0, 60.0, 50.0, 70.0}, {1.0, 1.0, 0.0, 0.5}),
        make_region(902, 1, 7, BoundingBox{50.0, 40.0, 60.0, 50.0}, {2.0, 1.0, 0.0, 0.5}),
        make_region(903, 1, 7, BoundingBox{70.0, 40.0, 80.0, 50.0}, {3.0, 1.0, 0.0, 0.5}),
    };
    CHECK(iou(det.by_scene[1][0].box, ds.scenes[0].regions[0].box) ==
          doctest::Approx(0.8));
    CHECK(iou(det.by_scene[1][1].box, ds.scenes[0].regions[1].box) == 0.0);

    auto result = evaluate_comprehension(ds, {}, scorer, &det);
    CHECK(result.total == 4);
    CHECK(result.correct == 3);  // 900, 902, 903 overlap exactly; 901 misses
    CHECK(result.scenes_missing_detections == 0);
  }

  SUBCASE("a scene without detections fails every expression") {
    DetectionSet det;  // empty map
    auto result = evaluate_comprehension(ds, {}, scorer, &det);
    CHECK(result.total == 4);
    CHECK(result.correct == 0);
    CHECK(result.scenes_missing_detections == 4);
  }
}

TEST_CASE("load_detections round trip and failure modes") {
  TempDir dir;
  json doc = {
      {"detections",
       json::array({json{
           {"scene_id", 1},
           {"regions", json::array({
                           json{{"id", 900}, {"category_id", 7}, {"bbox", {12, 40, 8, 10}}},
                           json{{"id", 901}, {"bbox", {40, 60, 10, 10}}},
                       })},
       }})},
  };
  FeatureTable table;
  table.dim = 4;
  table.rows = {{900, {0.0, 1.0, 0.0, 0.5}}, {901, {1.0, 1.0, 0.0, 0.5}}};

  SUBCASE("round trip") {
    std::ofstream(dir.file("det.json")) << doc.dump();
    write_feature_file(dir.file("det.feat"), table);
    DetectionSet det = load_detections(dir.file("det.json"), dir.file("det.feat"));
    REQUIRE(det.by_scene.count(1) == 1);
    REQUIRE(det.by_scene[1].size() == 2);
    const ObjectRegion& first = det.by_scene[1][0];
    CHECK(first.region_id == 900);
    CHECK(first.category_id == 7);
    CHECK(first.box.x_tl == 12.0);
    CHECK(first.box.x_br == 20.0);
    CHECK(first.box.y_br == 50.0);
    CHECK(first.feature == std::vector<double>{0.0, 1.0, 0.0, 0.5});
    CHECK(det.by_scene[1][1].category_id == 0);  // default when absent
  }

  SUBCASE("missing feature row") {
    std::ofstream(dir.file("det.json")) << doc.dump();
    table.rows.pop_back();
    write_feature_file(dir.file("det.feat"), table);
    CHECK_THROWS_AS(load_detections(dir.file("det.json"), dir.file("det.feat")),
                    IntegrityError);
  }

  SUBCASE("malformed JSON") {
    std::ofstream(dir.file("det.json")) << "{ not json";
    write_feature_file(dir.file("det.feat"), table);
    CHECK_THROWS_AS(load_detections(dir.file("det.json"), dir.file("det.feat")), ParseError);
  }

  SUBCASE("missing file") {
    write_feature_file(dir.file("det.feat"), table);
    CHECK_THROWS_AS(load_detections(dir.file("absent.json"), dir.file("det.feat")), IoError);
  }
}

TEST_CASE("model_scorer drives comprehension through feature bundles") {
  Dataset ds = row_dataset();
  const Scene& scene = ds.scenes[0];
  FeatureConfig features;

  ModelConfig config;
  config.word_dim = 3;
  config.visual_dim = 4;
  config.hidden_dim = 5;
  config.vocab_size = 6;
  config.input_dim = bundle_dim(ds.feature_dim, features);
  config.max_length = 6;
  SpeakerModel model(config);

  SUBCASE("zero model ties everywhere, lowest id wins") {
    auto scorer = model_scorer(model, features);
    auto result = evaluate_comprehension(ds, {}, scorer);
    CHECK(result.total == 4);
    CHECK(result.correct == 1);  // only region 10's expression picks region 10
  }

  SUBCASE("scores agree with a hand-built bundle") {
    model.init_params(31);
    auto scorer = model_scorer(model, features);
    std::vector<int> tokens = {2, 3, Vocabulary::kEnd};
    for (const ObjectRegion& candidate : scene.regions) {
      FeatureBundle bundle = build_bundle(candidate, scene.regions, scene.width, scene.height,
                                          scene.context_features, features);
      double direct = model.sentence_logprob(bundle.concat(), tokens);
      double scored = scorer(tokens, candidate, scene.regions, scene);
      CHECK(scored == doctest::Approx(direct).epsilon(1e-15));
    }
  }

  SUBCASE("a candidate without features is reported") {
    auto scorer = model_scorer(model, features);
    ObjectRegion bare = scene.regions[0];
    bare.feature.clear();
    std::vector<ObjectRegion> candidates = {bare, scene.regions[1]};
    std::vector<int> tokens = {2, Vocabulary::kEnd};
    CHECK_THROWS_AS(comprehend(tokens, candidates, scene, scorer), MissingFeatureError);
  }
}
