#include <doctest.h>

#include "efl/data/dataset.hpp"
#include "efl/error.hpp"

#include <array>
#include <map>
#include <set>
#include <cmath>
#include <numbers>

using namespace efl;
using namespace efl::data;

namespace {

ActionInstance ek(const std::string& vid, double t, double t_end) {
  ActionInstance a;
  a.video_id = vid;
  a.action_label = "open drawer";
  a.t_start = t;
  a.t_end = t_end;
  a.dataset_tag = DatasetTag::ek_style;
  return a;
}

std::vector<FrameRecord> scored(std::initializer_list<double> scores) {
  std::vector<FrameRecord> out;
  for (double s : scores) out.push_back({static_cast<double>(out.size()), blank_image(2, 2), s});
  return out;
}

// Encodes an angle in the red channel; the extractor below maps it to a unit
// vector, so the cosine between two frames is cos(angle difference).
class AngleExtractor final : public FeatureExtractor {
 public:
  std::vector<double> features(const Image& img) const override {
    const double a = img[0] * std::numbers::pi;
    return {std::cos(a), std::sin(a)};
  }
  std::string fingerprint() const override { return "angle"; }
};

// Frames before t_start have angle 0; frames after carry the per-video angle
// that yields the requested similarity.
class PlantedSource final : public FrameSource {
 public:
  std::map<std::string, double> similarity;
  std::vector<FrameRecord> frames(const ActionInstance& inst) const override {
    const double a = std::acos(similarity.at(inst.video_id)) / std::numbers::pi;
    std::vector<FrameRecord> out;
    for (int i = 0; i < 30; ++i) {
      const double t = inst.t_start - 1.0 + i * 0.1;
      out.push_back({t, blank_image(4, 4, t < inst.t_start ? 0.0 : a), 0.0});
    }
    return out;
  }
};

PipelineConfig small_config() {
  PipelineConfig c;
  c.resolution = 4;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("frame offsets for both annotation styles") {
  ActionInstance a = ek("v", 10.0, 12.0);
  a.dataset_tag = DatasetTag::ego4d_style;
  a.t_pre = 9.5;
  a.t_pnr = 10.8;
  auto o = compute_frame_offsets(a, 0.6, 0.25);
  CHECK(o.delta_in == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(o.delta_out == doctest::Approx(0.8).epsilon(1e-12));

  auto b = compute_frame_offsets(ek("v", 5.0, 7.0), 0.6, 0.25);
  CHECK(b.delta_in == 0.25);
  CHECK(b.delta_out == doctest::Approx(1.2).epsilon(1e-12));

  a.t_pre.reset();
  try {
    compute_frame_offsets(a, 0.6, 0.25);
    FAIL("expected annotation_incomplete");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::annotation_incomplete);
  }

  ActionInstance z = ek("v", 1.0, 2.0);
  z.dataset_tag = DatasetTag::ego4d_style;
  z.t_pre = 1.0;
  z.t_pnr = 1.5;
  try {
    compute_frame_offsets(z, 0.6, 0.25);
    FAIL("expected degenerate_annotation");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::degenerate_annotation);
  }
  CHECK_THROWS_AS(compute_frame_offsets(ek("v", 1.0, 2.0), 1.0, 0.25), Error);
}

TEST_CASE("best frame selection") {
  auto f = scored({0.3, 0.5, 0.9, 0.4, 0.2, 0.1, 0.6});
  CHECK(select_best_frame_index(f, 3, 3) == 2);
  auto eq = scored({1, 1, 1, 1, 1, 1, 1});
  CHECK(select_best_frame_index(eq, 3, 3) == 3);
  auto edge = scored({0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.9});
  CHECK(select_best_frame_index(edge, 0, 3) == 3);
  // Equidistant tie resolves to the lower index.
  auto tie = scored({0.0, 0.7, 0.1, 0.7, 0.0});
  CHECK(select_best_frame_index(tie, 2, 2) == 1);
  CHECK_THROWS_AS(select_best_frame_index(std::vector<FrameRecord>{}, 0, 3), Error);

  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(15));
    std::vector<FrameRecord> c;
    for (int i = 0; i < n; ++i) c.push_back({0.0, {}, std::floor(rng.uniform() * 4.0)});
    const int center = static_cast<int>(rng.index(static_cast<std::size_t>(n)));
    const int radius = static_cast<int>(rng.index(5));
    const auto got = select_best_frame_index(c, center, radius);
    int want = -1;
    for (int i = std::max(0, center - radius); i <= std::min(n - 1, center + radius); ++i) {
      if (want < 0) {
        want = i;
        continue;
      }
      const double si = c[i].aesthetic_score, sw = c[want].aesthetic_score;
      if (si > sw || (si == sw && std::abs(i - center) < std::abs(want - center))) want = i;
    }
    REQUIRE(static_cast<int>(got) == want);
    for (int i = std::max(0, center - radius); i <= std::min(n - 1, center + radius); ++i)
      CHECK(c[got].aesthetic_score >= c[i].aesthetic_score);
  }
}

TEST_CASE("similarity band is inclusive") {
  CHECK(filter_by_similarity(0.90, 0.81, 0.97));
  CHECK_FALSE(filter_by_similarity(0.80, 0.81, 0.97));
  CHECK_FALSE(filter_by_similarity(0.98, 0.81, 0.97));
  CHECK(filter_by_similarity(0.81, 0.81, 0.97));
  CHECK(filter_by_similarity(0.97, 0.81, 0.97));
}

namespace {

class IdentityExtractor final : public FeatureExtractor {
 public:
  std::vector<double> features(const Image& img) const override { return img.to_vector(); }
  std::string fingerprint() const override { return "identity"; }
};

}  // namespace

TEST_CASE("embed similarity") {
  IdentityExtractor id;
  Rng rng(2);
  Image a = blank_image(4, 4), b = blank_image(4, 4);
  for (auto& v : a.storage()) v = rng.uniform() - 0.5;
  for (auto& v : b.storage()) v = rng.uniform() - 0.5;
  FrameRecord fa{0, a, 0}, fb{0, b, 0};
  CHECK(embed_similarity(fa, fa, id) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::abs(embed_similarity(fa, fb, id) - embed_similarity(fb, fa, id)) < 1e-12);

  Image neg = a;
  for (auto& v : neg.storage()) v = -v;
  CHECK(embed_similarity(fa, FrameRecord{0, neg, 0}, id) == doctest::Approx(-1.0).epsilon(1e-12));

  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  CHECK(embed_similarity(fa, fb, id) == doctest::Approx(dot / std::sqrt(na * nb)).epsilon(1e-12));

  FrameRecord zero{0, blank_image(4, 4), 0};
  CHECK_THROWS_AS(embed_similarity(zero, fa, id), Error);
  CHECK_THROWS_AS(embed_similarity(FrameRecord{0, blank_image(2, 2, 0.5), 0}, fa, id), Error);
}

TEST_CASE("prompt templates") {
  const auto defaults = default_prompt_templates();
  CHECK(defaults.size() == 10);
  for (const auto& t : defaults) CHECK_NOTHROW(validate_template(t));

  Rng rng(1);
  std::vector<std::string> one{"Do {action} now"};
  CHECK(select_prompt_template(one, rng) == one[0]);
  CHECK(fill_template("How do I {action}?", "open drawer") == "How do I open drawer?");
  CHECK_THROWS_AS(validate_template("no placeholder"), Error);
  CHECK_THROWS_AS(validate_template("{action} and {action}"), Error);

  std::map<std::string, int> counts;
  Rng draws(2024);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[select_prompt_template(defaults, draws)];
  CHECK(counts.size() == 10);
  for (const auto& [t, c] : counts) CHECK(std::abs(c / static_cast<double>(n) - 0.1) <= 0.01);
}

TEST_CASE("build manifest keeps the band and logs rejections") {
  PlantedSource src;
  src.similarity = {{"a", 0.90}, {"b", 0.99}, {"c", 0.85}};
  std::vector<ActionInstance> inst{ek("c", 3.0, 5.0), ek("a", 1.0, 3.0), ek("b", 2.0, 4.0)};
  AngleExtractor ex;
  SharpnessScorer sc;
  auto r = build_manifest(inst, src, ex, sc, small_config());
  REQUIRE(r.manifest.entries.size() == 2);
  REQUIRE(r.rejections.size() == 1);
  CHECK(r.rejections[0].key == "b@2.000");
  CHECK(r.rejections[0].reason == "similarity_high");
  CHECK(r.manifest.entries[0].instance.video_id == "a");
  CHECK(r.manifest.entries[1].instance.video_id == "c");
  CHECK(r.manifest.entries[0].similarity == doctest::Approx(0.90).epsilon(1e-9));
  for (const auto& e : r.manifest.entries) {
    CHECK(e.delta_in > 0);
    CHECK(e.delta_out > 0);
    CHECK(e.prompt.find("open drawer") != std::string::npos);
    CHECK(image_height(e.input_frame.image) == 4);
  }

  auto again = build_manifest(inst, src, ex, sc, small_config());
  CHECK(manifest_to_jsonl(again.manifest) == manifest_to_jsonl(r.manifest));
  CHECK(rejections_to_jsonl(again.rejections) == rejections_to_jsonl(r.rejections));

  const auto parsed = manifest_from_jsonl(manifest_to_jsonl(r.manifest), Split::train);
  CHECK(manifest_to_jsonl(parsed) == manifest_to_jsonl(r.manifest));
}

TEST_CASE("build manifest matches a brute-force band filter and accounts for every instance") {
  PlantedSource src;
  std::vector<ActionInstance> inst;
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    const std::string id = "vid" + std::to_string(i);
    src.similarity[id] = rng.uniform(0.7, 1.0);
    auto a = ek(id, 1.0 + i, 3.0 + i);
    if (i % 17 == 0) {
      a.dataset_tag = DatasetTag::ego4d_style;  // missing t_pre / t_pnr
    }
    inst.push_back(a);
  }
  inst.push_back(inst[5]);  // duplicate key

  AngleExtractor ex;
  SharpnessScorer sc;
  auto r = build_manifest(inst, src, ex, sc, small_config());
  std::set<std::string> got, want;
  for (const auto& e : r.manifest.entries) got.insert(e.instance.video_id);
  for (int i = 0; i < 200; ++i) {
    const std::string id = "vid" + std::to_string(i);
    const double s = src.similarity[id];
    if (i % 17 != 0 && s >= 0.81 && s <= 0.97) want.insert(id);
  }
  CHECK(got == want);
  CHECK(r.manifest.entries.size() + r.rejections.size() == inst.size());
  std::map<std::string, int> reasons;
  for (const auto& rej : r.rejections) ++reasons[rej.reason];
  CHECK(reasons["duplicate_key"] == 1);
  CHECK(reasons["annotation_incomplete"] == 12);
  for (const auto& e : r.manifest.entries) CHECK(filter_by_similarity(e, 0.81, 0.97));
}

TEST_CASE("build manifest with no survivors throws") {
  PlantedSource src;
  src.similarity = {{"a", 0.99}};
  std::vector<ActionInstance> inst{ek("a", 1.0, 3.0)};
  AngleExtractor ex;
  SharpnessScorer sc;
  try {
    build_manifest(inst, src, ex, sc, small_config());
    FAIL("expected empty_manifest");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::empty_manifest);
  }
}

namespace {

Manifest synthetic_manifest(const std::string& prefix, int n, DatasetTag tag) {
  Manifest m;
  m.source_tags = {tag};
  for (int i = 0; i < n; ++i) {
    CuratedPair p;
    p.instance = ek(prefix + std::to_string(i), i, i + 1.0);
    p.instance.dataset_tag = tag;
    p.similarity = 0.9;
    m.entries.push_back(p);
  }
  return m;
}

}  // namespace

TEST_CASE("merge manifests") {
  auto a = synthetic_manifest("ego", 100, DatasetTag::ego4d_style);
  auto b = synthetic_manifest("ek", 80, DatasetTag::ek_style);
  auto m = merge_manifests(a, b);
  CHECK(m.entries.size() == 180);
  CHECK(m.source_tags.size() == 2);
  int ego = 0;
  for (const auto& e : m.entries) ego += e.instance.dataset_tag == DatasetTag::ego4d_style;
  CHECK(ego == 100);

  auto c = synthetic_manifest("ego", 3, DatasetTag::ego4d_style);
  try {
    merge_manifests(a, c);
    FAIL("expected duplicate_key");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::duplicate_key);
  }
  b.split = Split::test;
  try {
    merge_manifests(a, b);
    FAIL("expected split_mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::split_mismatch);
  }
}

TEST_CASE("instance validation and json round trip") {
  auto a = ek("v", 2.0, 1.0);
  CHECK_THROWS_AS(a.validate(), Error);
  a = ek("v", 1.0, 2.0);
  a.boxes.push_back({"cup", {0.2, 0.2, 0.1, 0.5}});
  CHECK_THROWS_AS(a.validate(), Error);
  a.boxes[0].box = {0.1, 0.2, 0.3, 0.5};
  a.t_pre = 0.5;
  a.t_pnr = 1.5;
  CHECK_NOTHROW(a.validate());
  const auto back = instance_from_json(to_json(a));
  CHECK(to_json(back) == to_json(a));
  CHECK(a.key() == "v@1.000");
}
