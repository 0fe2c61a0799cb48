#include <doctest.h>

#include "efl/data/synthetic.hpp"
#include "efl/eval/extractors.hpp"
#include "efl/io.hpp"

#include <filesystem>

using namespace efl;
using namespace efl::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("efl_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string tree_digest(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += fs::relative(f, root).string() + ":" + io::hash_file(f) + "\n";
  return io::hash_bytes(acc);
}

}  // namespace

TEST_CASE("corpus generation is deterministic and valid") {
  SyntheticCorpusSpec spec;
  spec.n_instances = 100;
  spec.seed = 7;
  const auto a = make_corpus(spec);
  const auto b = make_corpus(spec);
  REQUIRE(a.size() == 100);
  int ego = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(to_json(a[i].instance) == to_json(b[i].instance));
    CHECK(a[i].description == b[i].description);
    CHECK_NOTHROW(a[i].instance.validate());
    CHECK(a[i].instance.boxes.size() >= 3);
    ego += a[i].instance.dataset_tag == DatasetTag::ego4d_style;
  }
  CHECK(ego > 30);
  CHECK(ego < 70);

  spec.seed = 8;
  CHECK(to_json(make_corpus(spec)[0].instance) != to_json(a[0].instance));
}

TEST_CASE("raw store is byte-identical across reruns and reads back") {
  SyntheticCorpusSpec spec;
  spec.n_instances = 6;
  const auto scenes = make_corpus(spec);
  const auto d1 = scratch_dir("raw1"), d2 = scratch_dir("raw2");
  write_raw_store(d1, scenes, 32);
  write_raw_store(d2, scenes, 32);
  CHECK(tree_digest(d1) == tree_digest(d2));

  const auto inst = read_instances(d1);
  REQUIRE(inst.size() == 6);
  DirectoryFrameSource disk(d1);
  SyntheticFrameSource live(scenes, 32);
  for (const auto& i : inst) {
    const auto f1 = disk.frames(i);
    const auto f2 = live.frames(i);
    REQUIRE(f1.size() == f2.size());
    REQUIRE(!f1.empty());
    for (std::size_t k = 0; k < f1.size(); ++k) {
      CHECK(f1[k].time == f2[k].time);
      CHECK(f1[k].image.storage() == f2[k].image.storage());
    }
  }
  ActionInstance missing = inst[0];
  missing.video_id = "nope";
  CHECK(disk.frames(missing).empty());
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("blurred frames score lower sharpness") {
  SyntheticCorpusSpec spec;
  spec.n_instances = 12;
  spec.blur_fraction = 0.5;
  int lower = 0, total = 0;
  for (const auto& s : make_corpus(spec)) {
    const auto clip = render_clip(s, 64);
    for (int i : s.blurred) {
      const double blurred = sharpness(clip[static_cast<std::size_t>(i)].image);
      const double sharp = sharpness(quantize8(render_frame(s, s.frame_time(i), 64)));
      lower += blurred < sharp;
      ++total;
    }
  }
  REQUIRE(total > 0);
  CHECK(lower == total);
}

TEST_CASE("similarity distribution straddles the curation band") {
  SyntheticCorpusSpec spec;
  spec.n_instances = 120;
  const auto scenes = make_corpus(spec);
  SyntheticFrameSource src(scenes, 64);
  eval::PerceptualEncoder enc;
  SharpnessScorer sc;
  PipelineConfig cfg;
  cfg.sim_lo = -1.0;
  cfg.sim_hi = 1.0;
  std::vector<ActionInstance> inst;
  for (const auto& s : scenes) inst.push_back(s.instance);
  const auto r = build_manifest(inst, src, enc, sc, cfg);
  int below = 0, above = 0, inside = 0;
  for (const auto& e : r.manifest.entries) {
    below += e.similarity < 0.81;
    above += e.similarity > 0.97;
    inside += e.similarity >= 0.81 && e.similarity <= 0.97;
  }
  CHECK(below > 0);
  CHECK(above > 0);
  CHECK(inside > static_cast<int>(r.manifest.entries.size()) / 4);
}
