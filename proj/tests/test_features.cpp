#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "refexp/errors.hpp"
#include "refexp/features.hpp"
#include "refexp/rng_util.hpp"

using namespace refexp;

namespace {

ObjectRegion make_region(std::uint64_t id, int category, BoundingBox box,
                         std::vector<double> feature) {
  ObjectRegion r;
  r.region_id = id;
  r.scene_id = 0;
  r.category_id = category;
  r.box = box;
  r.feature = std::move(feature);
  return r;
}

double l2_norm(const std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  return std::sqrt(sq);
}

}  // namespace

TEST_CASE("encode_location matches the five-value formula") {
  BoundingBox full{0, 0, 100, 200};
  CHECK(encode_location(full, 100, 200) == std::vector<double>{0, 0, 1, 1, 1});

  BoundingBox box{10, 20, 50, 60};
  std::vector<double> enc = encode_location(box, 100, 200);
  CHECK(enc[0] == doctest::Approx(0.1));
  CHECK(enc[1] == doctest::Approx(0.1));
  CHECK(enc[2] == doctest::Approx(0.5));
  CHECK(enc[3] == doctest::Approx(0.3));
  CHECK(enc[4] == doctest::Approx(0.08));

  BoundingBox point{50, 50, 50, 50};
  CHECK(encode_location(point, 100, 100) == std::vector<double>{0.5, 0.5, 0.5, 0.5, 0.0});

  CHECK_THROWS_AS(encode_location(BoundingBox{90, 0, 110, 10}, 100, 100), DomainError);
  CHECK_THROWS_AS(encode_location(box, 0, 100), DomainError);
}

TEST_CASE("select_comparisons filters by category and partitions") {
  std::vector<ObjectRegion> regions = {
      make_region(1, 7, {0, 0, 10, 10}, {1.0}),   // giraffe A (target)
      make_region(2, 7, {20, 0, 30, 10}, {2.0}),  // giraffe B
      make_region(3, 9, {40, 0, 50, 10}, {3.0}),  // zebra C
  };
  ComparisonConfig cfg;

  cfg.comparison_set = ComparisonSet::kSameCategory;
  auto same = select_comparisons(regions[0], regions, cfg);
  REQUIRE(same.size() == 1);
  CHECK(same[0]->region_id == 2);

  cfg.comparison_set = ComparisonSet::kAllObjects;
  auto all = select_comparisons(regions[0], regions, cfg);
  REQUIRE(all.size() == 2);
  CHECK(all[0]->region_id == 2);
  CHECK(all[1]->region_id == 3);

  cfg.comparison_set = ComparisonSet::kDifferentCategory;
  auto different = select_comparisons(regions[0], regions, cfg);
  REQUIRE(different.size() == 1);
  CHECK(different[0]->region_id == 3);

  // same ∪ different == all, disjoint
  std::set<std::uint64_t> ids;
  for (auto* r : same) ids.insert(r->region_id);
  for (auto* r : different) ids.insert(r->region_id);
  CHECK(ids.size() == all.size());

  std::vector<ObjectRegion> lone = {regions[0]};
  CHECK(select_comparisons(regions[0], lone, cfg).empty());
}

TEST_CASE("visual_difference matches hand-computed normalized differences") {
  ComparisonConfig cfg;
  ObjectRegion target = make_region(1, 1, {0, 0, 1, 1}, {1.0, 0.0});
  ObjectRegion other = make_region(2, 1, {0, 0, 1, 1}, {0.0, 1.0});
  ObjectRegion twin = make_region(3, 1, {0, 0, 1, 1}, {1.0, 0.0});

  CHECK(visual_difference(target, {}, cfg) == std::vector<double>{0.0, 0.0});

  auto one = visual_difference(target, {&other}, cfg);
  CHECK(one[0] == doctest::Approx(0.70711).epsilon(1e-4));
  CHECK(one[1] == doctest::Approx(-0.70711).epsilon(1e-4));

  // the identical pair is zeroed by the epsilon guard but still counts in n
  auto two = visual_difference(target, {&other, &twin}, cfg);
  CHECK(two[0] == doctest::Approx(0.35355).epsilon(1e-4));
  CHECK(two[1] == doctest::Approx(-0.35355).epsilon(1e-4));

  ObjectRegion bad = make_region(4, 1, {0, 0, 1, 1}, {1.0, 0.0, 0.0});
  CHECK_THROWS_AS(visual_difference(target, {&bad}, cfg), DimensionError);
}

TEST_CASE("visual_difference pooling variants take per-dimension extrema") {
  ComparisonConfig cfg;
  ObjectRegion target = make_region(1, 1, {0, 0, 1, 1}, {1.0, 0.0});
  ObjectRegion a = make_region(2, 1, {0, 0, 1, 1}, {0.0, 1.0});   // diff -> (0.707, -0.707)
  ObjectRegion b = make_region(3, 1, {0, 0, 1, 1}, {2.0, 0.0});   // diff -> (-1, 0)

  cfg.pooling = Pooling::kMin;
  auto mn = visual_difference(target, {&a, &b}, cfg);
  CHECK(mn[0] == doctest::Approx(-1.0));
  CHECK(mn[1] == doctest::Approx(-0.70711).epsilon(1e-4));

  cfg.pooling = Pooling::kMax;
  auto mx = visual_difference(target, {&a, &b}, cfg);
  CHECK(mx[0] == doctest::Approx(0.70711).epsilon(1e-4));
  CHECK(mx[1] == doctest::Approx(0.0));
}

TEST_CASE("visual_difference is permutation invariant with bounded norm") {
  std::mt19937_64 rng(31);
  ObjectRegion target = make_region(0, 1, {0, 0, 1, 1}, {});
  std::vector<ObjectRegion> others;
  for (int i = 0; i < 6; ++i) others.push_back(make_region(1 + i, 1, {0, 0, 1, 1}, {}));
  for (int d = 0; d < 4; ++d) {
    target.feature.push_back(uniform_real(rng, -1, 1));
  }
  for (ObjectRegion& o : others) {
    for (int d = 0; d < 4; ++d) o.feature.push_back(uniform_real(rng, -1, 1));
  }

  std::vector<const ObjectRegion*> order1, order2;
  for (const ObjectRegion& o : others) order1.push_back(&o);
  order2 = order1;
  std::reverse(order2.begin(), order2.end());

  for (Pooling pooling : {Pooling::kAvg, Pooling::kMin, Pooling::kMax}) {
    ComparisonConfig cfg;
    cfg.pooling = pooling;
    auto v1 = visual_difference(target, order1, cfg);
    auto v2 = visual_difference(target, order2, cfg);
    for (std::size_t d = 0; d < v1.size(); ++d) {
      CHECK(v1[d] == doctest::Approx(v2[d]).epsilon(1e-12));
    }
    if (pooling == Pooling::kAvg) CHECK(l2_norm(v1) <= 1.0 + 1e-12);
  }
}

TEST_CASE("location_difference produces ratio blocks for nearest same-category neighbors") {
  ComparisonConfig cfg;
  ObjectRegion target = make_region(1, 1, {10, 10, 30, 30}, {0.0});

  std::vector<ObjectRegion> alone = {target};
  CHECK(location_difference(target, alone, cfg) == std::vector<double>(25, 0.0));

  std::vector<ObjectRegion> pair = {target, make_region(2, 1, {40, 10, 60, 30}, {0.0})};
  auto dl = location_difference(target, pair, cfg);
  CHECK(dl[0] == doctest::Approx(1.5));
  CHECK(dl[1] == doctest::Approx(0.0));
  CHECK(dl[2] == doctest::Approx(1.5));
  CHECK(dl[3] == doctest::Approx(0.0));
  CHECK(dl[4] == doctest::Approx(1.0));
  for (std::size_t i = 5; i < 25; ++i) CHECK(dl[i] == 0.0);

  // different-category or zero-area cases
  std::vector<ObjectRegion> mixed = {target, make_region(3, 2, {40, 10, 60, 30}, {0.0})};
  CHECK(location_difference(target, mixed, cfg) == std::vector<double>(25, 0.0));
  ObjectRegion degenerate = make_region(4, 1, {5, 5, 5, 5}, {0.0});
  CHECK_THROWS_AS(location_difference(degenerate, pair, cfg), DomainError);
}

TEST_CASE("location_difference keeps only the five nearest, matching a brute-force sort") {
  ComparisonConfig cfg;
  ObjectRegion target = make_region(100, 1, {0, 0, 10, 10}, {0.0});
  std::vector<ObjectRegion> regions = {target};
  // 6 equal-size neighbors at increasing distances, inserted shuffled
  std::vector<double> offsets = {55, 25, 85, 40, 70, 15};
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    regions.push_back(
        make_region(i, 1, {offsets[i], 0, offsets[i] + 10, 10}, {0.0}));
  }

  auto dl = location_difference(target, regions, cfg);

  // brute force: sort by center distance, take 5
  std::vector<std::pair<double, std::uint64_t>> ranked;
  for (std::size_t i = 0; i < offsets.size(); ++i) ranked.push_back({offsets[i], i});
  std::sort(ranked.begin(), ranked.end());
  for (std::size_t k = 0; k < 5; ++k) {
    double expected_dx = ranked[k].first / 10.0;
    CHECK(dl[5 * k + 0] == doctest::Approx(expected_dx));
    CHECK(dl[5 * k + 4] == doctest::Approx(1.0));
  }
  // the 6th (farthest) neighbor must not appear: offsets beyond block 5 absent
  double farthest = 85.0 / 10.0;
  for (std::size_t k = 0; k < 5; ++k) CHECK(dl[5 * k] != doctest::Approx(farthest));
}

TEST_CASE("location_difference breaks distance ties by region id") {
  ComparisonConfig cfg;
  cfg.max_location_neighbors = 2;
  ObjectRegion target = make_region(10, 1, {50, 50, 60, 60}, {0.0});
  // two neighbors mirrored left/right at identical distance
  std::vector<ObjectRegion> regions = {
      target,
      make_region(7, 1, {80, 50, 90, 60}, {0.0}),  // +30
      make_region(3, 1, {20, 50, 30, 60}, {0.0}),  // -30
  };
  auto dl = location_difference(target, regions, cfg);
  CHECK(dl[0] == doctest::Approx(-3.0));  // id 3 first
  CHECK(dl[5] == doctest::Approx(3.0));   // id 7 second
}

TEST_CASE("location encodings are translation and uniform-scale covariant") {
  ComparisonConfig cfg;
  std::mt19937_64 rng(77);
  auto random_box = [&](double max_xy) {
    double x = uniform_real(rng, 0, max_xy);
    double y = uniform_real(rng, 0, max_xy);
    double w = uniform_real(rng, 5, 20);
    double h = uniform_real(rng, 5, 20);
    return BoundingBox{x, y, x + w, y + h};
  };
  std::vector<ObjectRegion> regions;
  for (int i = 0; i < 4; ++i) regions.push_back(make_region(i, 1, random_box(60), {0.0}));

  auto shifted = regions;
  for (ObjectRegion& r : shifted) {
    r.box.x_tl += 100;
    r.box.x_br += 100;
    r.box.y_tl += 50;
    r.box.y_br += 50;
  }
  auto scaled = regions;
  for (ObjectRegion& r : scaled) {
    r.box.x_tl *= 3;
    r.box.x_br *= 3;
    r.box.y_tl *= 3;
    r.box.y_br *= 3;
  }

  auto base_dl = location_difference(regions[0], regions, cfg);
  auto shift_dl = location_difference(shifted[0], shifted, cfg);
  auto scale_dl = location_difference(scaled[0], scaled, cfg);
  for (std::size_t i = 0; i < base_dl.size(); ++i) {
    CHECK(base_dl[i] == doctest::Approx(shift_dl[i]).epsilon(1e-9));
    CHECK(base_dl[i] == doctest::Approx(scale_dl[i]).epsilon(1e-9));
  }

  auto base_l = encode_location(regions[0].box, 100, 100);
  auto scale_l = encode_location(scaled[0].box, 300, 300);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(base_l[i] == doctest::Approx(scale_l[i]).epsilon(1e-9));
  }
}

TEST_CASE("build_bundle assembles all five parts") {
  FeatureConfig cfg;
  Scene scene;
  scene.scene_id = 1;
  scene.width = 100;
  scene.height = 100;
  scene.regions = {
      make_region(1, 1, {10, 10, 30, 30}, {1.0, 0.0}),
      make_region(2, 1, {60, 10, 80, 30}, {0.0, 1.0}),
  };

  SUBCASE("single-object scene synthesizes global context and zero differences") {
    Scene lone = scene;
    lone.regions.resize(1);
    FeatureBundle b = build_bundle(lone.regions[0], lone, cfg);
    CHECK(b.o == std::vector<double>{1.0, 0.0});
    CHECK(b.g == std::vector<double>{1.0, 0.0});  // mean of the single region
    CHECK(b.dv == std::vector<double>{0.0, 0.0});
    CHECK(b.dl == std::vector<double>(25, 0.0));
    CHECK(b.dim() == bundle_dim(2, cfg));
  }

  SUBCASE("stored global context row passes through unchanged") {
    scene.context_features[ContextSource::kGlobal] = {0.125, -0.375};
    FeatureBundle b = build_bundle(scene.regions[0], scene, cfg);
    CHECK(b.g == std::vector<double>{0.125, -0.375});
  }

  SUBCASE("context choice none yields a zero context") {
    cfg.context = ContextChoice::kNone;
    FeatureBundle b = build_bundle(scene.regions[0], scene, cfg);
    CHECK(b.g == std::vector<double>{0.0, 0.0});
  }

  SUBCASE("windowed context must be stored") {
    cfg.context = ContextChoice::kScale3;
    CHECK_THROWS_AS(build_bundle(scene.regions[0], scene, cfg), MissingFeatureError);
    scene.context_features[ContextSource::kScale3] = {0.5, 0.5};
    FeatureBundle b = build_bundle(scene.regions[0], scene, cfg);
    CHECK(b.g == std::vector<double>{0.5, 0.5});
  }

  SUBCASE("difference parts can be disabled for baselines") {
    cfg.use_visual_difference = false;
    cfg.use_location_difference = false;
    FeatureBundle b = build_bundle(scene.regions[0], scene, cfg);
    CHECK(b.dv == std::vector<double>{0.0, 0.0});
    CHECK(b.dl == std::vector<double>(25, 0.0));
    // parts keep their slots so the model input dimension is unchanged
    CHECK(b.dim() == bundle_dim(2, cfg));
  }

  SUBCASE("concat preserves part order") {
    FeatureBundle b = build_bundle(scene.regions[0], scene, cfg);
    std::vector<double> flat = b.concat();
    REQUIRE(flat.size() == b.dim());
    CHECK(std::equal(b.o.begin(), b.o.end(), flat.begin()));
    CHECK(std::equal(b.g.begin(), b.g.end(), flat.begin() + 2));
    CHECK(std::equal(b.l.begin(), b.l.end(), flat.begin() + 4));
    CHECK(std::equal(b.dv.begin(), b.dv.end(), flat.begin() + 9));
    CHECK(std::equal(b.dl.begin(), b.dl.end(), flat.begin() + 11));
  }
}
