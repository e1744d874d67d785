#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "refexp/dataset.hpp"
#include "refexp/errors.hpp"

using namespace refexp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("refexp_ds_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_json(const std::string& path, const json& doc) {
  std::ofstream out(path);
  out << doc.dump(2);
}

// 1 scene (100x80), 2 regions, 3 expressions; context rows for global+scale2.
json basic_annotation() {
  return json{
      {"images", json::array({json{{"id", 1}, {"width", 100}, {"height", 80}}})},
      {"annotations",
       json::array({
           json{{"id", 10}, {"image_id", 1}, {"category_id", 3}, {"bbox", {10, 10, 20, 30}}},
           json{{"id", 11}, {"image_id", 1}, {"category_id", 3}, {"bbox", {50, 20, 25, 25}}},
       })},
      {"refs",
       json::array({
           json{{"expression_id", 100}, {"region_id", 10}, {"raw", "the left ball"}},
           json{{"expression_id", 101}, {"region_id", 10}, {"raw", "Red ball, left!"}},
           json{{"expression_id", 102}, {"region_id", 11}, {"raw", "right ball"}},
       })},
  };
}

FeatureTable basic_features() {
  FeatureTable table;
  table.dim = 4;
  table.rows = {
      {10, {1.0, 0.0, 0.5, -0.25}},
      {11, {0.0, 1.0, 0.5, 0.125}},
      {context_key(1, ContextSource::kGlobal), {0.5, 0.5, 0.5, 0.0}},
      {context_key(1, ContextSource::kScale2), {0.25, 0.25, 0.75, 0.0}},
  };
  return table;
}

}  // namespace

TEST_CASE("tokenize lowercases and splits on punctuation") {
  CHECK(tokenize("The RED ball!") == std::vector<std::string>{"the", "red", "ball"});
  CHECK(tokenize("man's hat, left-most.") ==
        std::vector<std::string>{"man", "s", "hat", "left", "most"});
  CHECK(tokenize("  ") == std::vector<std::string>{});
  CHECK(tokenize("2nd guy") == std::vector<std::string>{"2nd", "guy"});
}

TEST_CASE("vocabulary round trip maps out-of-vocab words to the unk surface form") {
  std::vector<RefExpression> corpus(3);
  corpus[0].words = {"red"};
  corpus[1].words = {"red"};
  corpus[2].words = {"ball"};

  Vocabulary vocab = build_vocabulary(corpus, 2);
  CHECK(vocab.size() == 4);  // specials + "red"
  CHECK(vocab.contains("red"));
  CHECK(!vocab.contains("ball"));
  CHECK(vocab.id_of("ball") == Vocabulary::kUnk);

  std::vector<std::string> words = {"red", "ball"};
  auto decoded = vocab.decode(vocab.encode(words));
  CHECK(decoded == std::vector<std::string>{"red", "<unk>"});

  Vocabulary all = build_vocabulary(corpus, 1);
  CHECK(all.size() == 5);
  CHECK(all.decode(all.encode(words)) == words);

  Vocabulary empty = build_vocabulary({}, 1);
  CHECK(empty.size() == 3);
  CHECK(empty.token_of(Vocabulary::kBos) == "<bos>");
  CHECK(empty.token_of(Vocabulary::kEnd) == "<end>");
  CHECK(empty.token_of(Vocabulary::kUnk) == "<unk>");
}

TEST_CASE("vocabulary ids are frequency-ordered with alphabetical ties and a stable hash") {
  std::vector<RefExpression> corpus(1);
  corpus[0].words = {"zeta", "alpha", "alpha", "mid", "mid", "zeta", "alpha"};
  Vocabulary vocab = build_vocabulary(corpus, 1);
  CHECK(vocab.id_of("alpha") == 3);  // count 3
  CHECK(vocab.id_of("mid") == 4);    // count 2, 'm' < 'z'
  CHECK(vocab.id_of("zeta") == 5);
  Vocabulary again = build_vocabulary(corpus, 1);
  CHECK(vocab.hash() == again.hash());
  Vocabulary other = build_vocabulary({}, 1);
  CHECK(vocab.hash() != other.hash());
}

TEST_CASE("context keys pack source and scene id reversibly") {
  for (ContextSource src : {ContextSource::kGlobal, ContextSource::kScale2,
                            ContextSource::kScale3, ContextSource::kScale4}) {
    std::uint64_t key = context_key(123456, src);
    CHECK(is_context_key(key));
    auto [scene, parsed] = parse_context_key(key);
    CHECK(scene == 123456);
    CHECK(parsed == src);
    CHECK(context_source_from_name(context_source_name(src)) == src);
  }
  CHECK(!is_context_key(42));
}

TEST_CASE("feature file round trips through disk") {
  TempDir dir;
  FeatureTable table = basic_features();
  write_feature_file(dir.file("f.bin"), table);
  FeatureTable loaded = read_feature_file(dir.file("f.bin"));
  REQUIRE(loaded.dim == table.dim);
  REQUIRE(loaded.rows.size() == table.rows.size());
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    CHECK(loaded.rows[i].key == table.rows[i].key);
    // values survive the f32 boundary exactly because the fixture uses
    // f32-representable numbers
    CHECK(loaded.rows[i].values == table.rows[i].values);
  }
}

TEST_CASE("load_dataset cross-links scenes, regions, expressions, and context") {
  TempDir dir;
  write_json(dir.file("ann.json"), basic_annotation());
  write_feature_file(dir.file("feat.bin"), basic_features());

  Dataset ds = load_dataset(dir.file("ann.json"), dir.file("feat.bin"));
  REQUIRE(ds.scenes.size() == 1);
  REQUIRE(ds.total_regions() == 2);
  REQUIRE(ds.expressions.size() == 3);
  CHECK(ds.feature_dim == 4);

  const Scene& scene = ds.scene_by_id(1);
  CHECK(scene.width == doctest::Approx(100.0));
  CHECK(scene.regions[0].box.x_br == doctest::Approx(30.0));
  CHECK(scene.regions[0].box.y_br == doctest::Approx(40.0));
  CHECK(scene.context_features.count(ContextSource::kGlobal) == 1);
  CHECK(scene.context_features.count(ContextSource::kScale2) == 1);
  CHECK(scene.context_features.count(ContextSource::kScale3) == 0);

  const ObjectRegion& r10 = ds.region_by_id(10);
  CHECK(r10.feature == std::vector<double>{1.0, 0.0, 0.5, -0.25});
  CHECK(ds.scene_of_region(11).scene_id == 1);
  CHECK(ds.expressions_of(10).size() == 2);
  CHECK(ds.expressions_of(11).size() == 1);
  CHECK(ds.expressions[1].words == std::vector<std::string>{"red", "ball", "left"});
}

TEST_CASE("load_dataset accepts an empty dataset") {
  TempDir dir;
  write_json(dir.file("ann.json"),
             json{{"images", json::array()}, {"annotations", json::array()},
                  {"refs", json::array()}});
  FeatureTable empty;
  empty.dim = 4;
  write_feature_file(dir.file("feat.bin"), empty);
  Dataset ds = load_dataset(dir.file("ann.json"), dir.file("feat.bin"));
  CHECK(ds.scenes.empty());
  CHECK(ds.expressions.empty());
}

TEST_CASE("load_dataset rejects broken inputs") {
  TempDir dir;
  write_feature_file(dir.file("feat.bin"), basic_features());

  SUBCASE("malformed JSON") {
    std::ofstream(dir.file("bad.json")) << "{ not json";
    CHECK_THROWS_AS(load_dataset(dir.file("bad.json"), dir.file("feat.bin")), ParseError);
  }

  SUBCASE("expression referencing unknown region") {
    json doc = basic_annotation();
    doc["refs"].push_back(json{{"expression_id", 103}, {"region_id", 999}, {"raw", "ghost"}});
    write_json(dir.file("ann.json"), doc);
    CHECK_THROWS_AS(load_dataset(dir.file("ann.json"), dir.file("feat.bin")), IntegrityError);
  }

  SUBCASE("duplicate region id") {
    json doc = basic_annotation();
    doc["annotations"].push_back(
        json{{"id", 10}, {"image_id", 1}, {"category_id", 3}, {"bbox", {1, 1, 2, 2}}});
    write_json(dir.file("ann.json"), doc);
    CHECK_THROWS_AS(load_dataset(dir.file("ann.json"), dir.file("feat.bin")), IntegrityError);
  }

  SUBCASE("missing feature row") {
    json doc = basic_annotation();
    doc["annotations"].push_back(
        json{{"id", 12}, {"image_id", 1}, {"category_id", 3}, {"bbox", {1, 1, 2, 2}}});
    write_json(dir.file("ann.json"), doc);
    CHECK_THROWS_AS(load_dataset(dir.file("ann.json"), dir.file("feat.bin")), IntegrityError);
  }

  SUBCASE("box outside scene") {
    json doc = basic_annotation();
    doc["annotations"][0]["bbox"] = {90, 10, 20, 30};  // x_br = 110 > width 100
    write_json(dir.file("ann.json"), doc);
    CHECK_THROWS_AS(load_dataset(dir.file("ann.json"), dir.file("feat.bin")), IntegrityError);
  }

  SUBCASE("context row for unknown scene") {
    write_json(dir.file("ann.json"), basic_annotation());
    FeatureTable table = basic_features();
    table.rows.push_back({context_key(77, ContextSource::kGlobal), {0, 0, 0, 0}});
    write_feature_file(dir.file("feat2.bin"), table);
    CHECK_THROWS_AS(load_dataset(dir.file("ann.json"), dir.file("feat2.bin")), IntegrityError);
  }

  SUBCASE("feature row for unknown region") {
    write_json(dir.file("ann.json"), basic_annotation());
    FeatureTable table = basic_features();
    table.rows.push_back({999, {0, 0, 0, 0}});
    write_feature_file(dir.file("feat2.bin"), table);
    CHECK_THROWS_AS(load_dataset(dir.file("ann.json"), dir.file("feat2.bin")), IntegrityError);
  }
}

TEST_CASE("encode_expressions terminates every expression with the end id") {
  TempDir dir;
  write_json(dir.file("ann.json"), basic_annotation());
  write_feature_file(dir.file("feat.bin"), basic_features());
  Dataset ds = load_dataset(dir.file("ann.json"), dir.file("feat.bin"));
  Vocabulary vocab = build_vocabulary(ds.expressions, 1);
  encode_expressions(ds, vocab);
  for (const RefExpression& expr : ds.expressions) {
    REQUIRE(!expr.token_ids.empty());
    CHECK(expr.token_ids.back() == Vocabulary::kEnd);
    for (int id : expr.token_ids) {
      CHECK(id >= 0);
      CHECK(static_cast<std::size_t>(id) < vocab.size());
    }
  }
}

namespace {

// 10 single-region scenes so per-object splits are easy to reason about.
Dataset ten_region_dataset(const TempDir& dir) {
  json doc{{"images", json::array()}, {"annotations", json::array()}, {"refs", json::array()}};
  FeatureTable table;
  table.dim = 2;
  for (int i = 0; i < 10; ++i) {
    doc["images"].push_back(json{{"id", i}, {"width", 50}, {"height", 50}});
    doc["annotations"].push_back(
        json{{"id", 100 + i}, {"image_id", i}, {"category_id", 1}, {"bbox", {5, 5, 10, 10}}});
    doc["refs"].push_back(
        json{{"expression_id", 200 + i}, {"region_id", 100 + i}, {"raw", "thing"}});
    table.rows.push_back({static_cast<std::uint64_t>(100 + i), {1.0, 0.0}});
  }
  write_json(dir.file("ann10.json"), doc);
  write_feature_file(dir.file("feat10.bin"), table);
  return load_dataset(dir.file("ann10.json"), dir.file("feat10.bin"));
}

}  // namespace

TEST_CASE("per-object split partitions regions reproducibly") {
  TempDir dir;
  Dataset ds = ten_region_dataset(dir);

  PerObjectSplit split = split_per_object(ds, 0.8, 7);
  CHECK(split.train_regions.size() == 8);
  CHECK(split.test_regions.size() == 2);

  std::set<std::uint64_t> all(split.train_regions.begin(), split.train_regions.end());
  all.insert(split.test_regions.begin(), split.test_regions.end());
  CHECK(all.size() == 10);  // disjoint and exhaustive

  PerObjectSplit again = split_per_object(ds, 0.8, 7);
  CHECK(again.train_regions == split.train_regions);
  CHECK(again.test_regions == split.test_regions);

  PerObjectSplit other = split_per_object(ds, 0.8, 8);
  CHECK(other.train_regions != split.train_regions);

  CHECK_THROWS_AS(split_per_object(ds, 0.0, 1), DomainError);
  CHECK_THROWS_AS(split_per_object(ds, 1.0, 1), DomainError);
}

TEST_CASE("per-object split keeps a lone region in train for ratio near one") {
  TempDir dir;
  json doc{{"images", json::array({json{{"id", 1}, {"width", 10}, {"height", 10}}})},
           {"annotations", json::array({json{{"id", 5},
                                             {"image_id", 1},
                                             {"category_id", 1},
                                             {"bbox", {1, 1, 2, 2}}}})},
           {"refs", json::array()}};
  write_json(dir.file("ann1.json"), doc);
  FeatureTable table;
  table.dim = 2;
  table.rows = {{5, {0.0, 0.0}}};
  write_feature_file(dir.file("feat1.bin"), table);
  Dataset ds = load_dataset(dir.file("ann1.json"), dir.file("feat1.bin"));

  PerObjectSplit split = split_per_object(ds, 0.999, 3);
  CHECK(split.train_regions == std::vector<std::uint64_t>{5});
  CHECK(split.test_regions.empty());
}

namespace {

// Six scenes exercising every eligibility case of the scene-level split:
//   scene 0: 3 referred people           -> people-eligible
//   scene 1: 2 referred people + 1 chair -> people-eligible
//   scene 2: 2 referred giraffes         -> objects-eligible
//   scene 3: 1 person + 1 giraffe        -> neither (no same-category pair)
//   scene 4: 2 people, only 1 referred   -> neither (eligibility counts referred only)
//   scene 5: 2 chairs + 2 people         -> both-eligible
Dataset mixed_split_dataset(const TempDir& dir) {
  constexpr int kPerson = 1;
  constexpr int kGiraffe = 2;
  constexpr int kChair = 3;
  json doc{{"images", json::array()}, {"annotations", json::array()}, {"refs", json::array()}};
  FeatureTable table;
  table.dim = 2;
  std::uint64_t next_region = 0;
  std::uint64_t next_expr = 1000;
  auto add_scene = [&](std::uint64_t scene_id, const std::vector<std::pair<int, bool>>& members) {
    doc["images"].push_back(json{{"id", scene_id}, {"width", 64}, {"height", 64}});
    for (auto [category, referred] : members) {
      std::uint64_t rid = next_region++;
      doc["annotations"].push_back(json{{"id", rid},
                                        {"image_id", scene_id},
                                        {"category_id", category},
                                        {"bbox", {4, 4, 8, 8}}});
      table.rows.push_back({rid, {0.5, 0.5}});
      if (referred) {
        doc["refs"].push_back(
            json{{"expression_id", next_expr++}, {"region_id", rid}, {"raw", "it"}});
      }
    }
  };
  add_scene(0, {{kPerson, true}, {kPerson, true}, {kPerson, true}});
  add_scene(1, {{kPerson, true}, {kPerson, true}, {kChair, true}});
  add_scene(2, {{kGiraffe, true}, {kGiraffe, true}});
  add_scene(3, {{kPerson, true}, {kGiraffe, true}});
  add_scene(4, {{kPerson, true}, {kPerson, false}});
  add_scene(5, {{kChair, true}, {kChair, true}, {kPerson, true}, {kPerson, true}});
  write_json(dir.file("ann6.json"), doc);
  write_feature_file(dir.file("feat6.bin"), table);
  return load_dataset(dir.file("ann6.json"), dir.file("feat6.bin"));
}

}  // namespace

TEST_CASE("people-vs-objects split is a scene-level partition honoring eligibility") {
  TempDir dir;
  Dataset ds = mixed_split_dataset(dir);
  constexpr int kPerson = 1;

  // fraction 0.5: people pool {0,1,5} -> 2 scenes; object pool {2,5} minus
  // any people picks -> 1 scene
  PeopleVsObjectsSplit split = split_people_vs_objects(ds, kPerson, 0.5, 11);

  std::set<std::uint64_t> people(split.test_people_scenes.begin(),
                                 split.test_people_scenes.end());
  std::set<std::uint64_t> objects(split.test_objects_scenes.begin(),
                                  split.test_objects_scenes.end());
  std::set<std::uint64_t> train(split.train_scenes.begin(), split.train_scenes.end());

  CHECK(people.size() == 2);
  for (std::uint64_t id : people) CHECK((id == 0 || id == 1 || id == 5));
  for (std::uint64_t id : objects) CHECK((id == 2 || id == 5));

  // pairwise disjoint, exhaustive
  CHECK(people.size() + objects.size() + train.size() == 6);
  for (std::uint64_t id : people) {
    CHECK(objects.count(id) == 0);
    CHECK(train.count(id) == 0);
  }
  for (std::uint64_t id : objects) CHECK(train.count(id) == 0);

  // scenes 3 and 4 are never eligible for either test side
  CHECK(train.count(3) == 1);
  CHECK(train.count(4) == 1);

  PeopleVsObjectsSplit again = split_people_vs_objects(ds, kPerson, 0.5, 11);
  CHECK(again.test_people_scenes == split.test_people_scenes);
  CHECK(again.test_objects_scenes == split.test_objects_scenes);
}
