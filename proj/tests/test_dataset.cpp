#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <set>
#include <vector>

#include "sfda/dataset.hpp"
#include "sfda/rng.hpp"

using namespace sfda;
namespace fs = std::filesystem;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data(), b.data(), sizeof(double) * size_t(a.numel())) == 0;
}

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) : path(fs::path("ds_test_tmp") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all("ds_test_tmp"); }
};

}  // namespace

TEST_CASE("scene generation is deterministic and validated") {
  data::SceneSpec spec = data::source_spec(5, 32, 32);
  data::LabeledSample a = data::generate_scene(7, spec);
  data::LabeledSample b = data::generate_scene(7, spec);
  CHECK(bitwise_equal(a.image, b.image));
  CHECK(bitwise_equal(a.labels, b.labels));
  REQUIRE(a.image.shape() == std::vector<int>{3, 32, 32});
  REQUIRE(a.labels.shape() == std::vector<int>{32, 32});

  data::LabeledSample c = data::generate_scene(8, spec);
  CHECK_FALSE(bitwise_equal(a.labels, c.labels));

  data::SceneSpec bad = spec;
  bad.num_classes = 1;
  CHECK_THROWS(data::generate_scene(7, bad));
  bad = spec;
  bad.width = 0;
  CHECK_THROWS(data::generate_scene(7, bad));
}

TEST_CASE("domain shift changes pixels, never labels") {
  data::SceneSpec src = data::source_spec(5, 48, 48);
  data::SceneSpec tgt = data::target_spec(5, 48, 48);
  CHECK(tgt.shift.hue_deg == 40.0);
  CHECK(tgt.shift.noise_std == 0.05);
  CHECK(tgt.shift.texture_freq_scale == 1.6);

  for (uint64_t seed : {3u, 11u, 42u}) {
    data::LabeledSample s = data::generate_scene(seed, src);
    data::LabeledSample t = data::generate_scene(seed, tgt);
    CHECK(bitwise_equal(s.labels, t.labels));
    CHECK_FALSE(bitwise_equal(s.image, t.image));
  }
}

TEST_CASE("images live on the 8-bit grid inside [0,1]") {
  data::SceneSpec tgt = data::target_spec(5, 32, 32);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    data::LabeledSample s = data::generate_scene(seed, tgt);
    for (int64_t i = 0; i < s.image.numel(); ++i) {
      const double v = s.image[i];
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      CHECK(v == std::round(255.0 * v) / 255.0);
    }
  }
}

TEST_CASE("class coverage over many scenes") {
  data::SceneSpec spec = data::source_spec(5, 64, 64);
  int full_coverage = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    data::LabeledSample s = data::generate_scene(uint64_t(10000 + i), spec);
    std::set<int> seen;
    for (int64_t p = 0; p < s.labels.numel(); ++p) {
      const int id = int(s.labels[p]);
      REQUIRE(id >= 0);
      REQUIRE(id < 5);
      seen.insert(id);
    }
    if (int(seen.size()) == 5) ++full_coverage;
  }
  CHECK(full_coverage >= int(0.9 * n));
}

TEST_CASE("dataset build, manifest round-trip, batch loads") {
  TmpDir tmp("train");
  data::SceneSpec spec = data::source_spec(4, 32, 32);

  data::DatasetManifest m = data::build_dataset(6, spec, 123, tmp.path.string());
  CHECK(m.count == 6);
  CHECK(m.image_files.size() == 6);
  for (const auto& f : m.image_files) CHECK(fs::exists(tmp.path / f));
  for (const auto& f : m.label_files) CHECK(fs::exists(tmp.path / f));

  data::DatasetManifest r = data::load_manifest(tmp.path.string());
  CHECK(r.count == 6);
  CHECK(r.seed == 123);
  CHECK(r.spec.num_classes == 4);
  CHECK(r.spec.height == 32);
  CHECK(r.spec.domain == data::Domain::kSource);
  CHECK(r.image_files == m.image_files);

  // overwrite guard
  CHECK_THROWS(data::build_dataset(2, spec, 9, tmp.path.string()));
  data::DatasetManifest forced = data::build_dataset(2, spec, 9, tmp.path.string(), true);
  CHECK(forced.count == 2);
}

TEST_CASE("loaded batches reproduce the generated samples exactly") {
  TmpDir tmp("roundtrip");
  data::SceneSpec spec = data::target_spec(5, 32, 32);
  data::DatasetManifest m = data::build_dataset(5, spec, 77, tmp.path.string());

  std::vector<int> all(5);
  std::iota(all.begin(), all.end(), 0);
  auto [images, labels] = data::load_batch(m, all);
  REQUIRE(images.shape() == std::vector<int>{5, 3, 32, 32});
  REQUIRE(labels.shape() == std::vector<int>{5, 32, 32});

  for (int i = 0; i < 5; ++i) {
    const uint64_t sseed = substream(77, "dataset.sample", uint64_t(i)).raw();
    data::LabeledSample want = data::generate_scene(sseed, spec);
    CHECK(std::memcmp(want.image.data(), images.data() + int64_t(i) * 3 * 32 * 32,
                      sizeof(double) * 3 * 32 * 32) == 0);
    CHECK(std::memcmp(want.labels.data(), labels.data() + int64_t(i) * 32 * 32,
                      sizeof(double) * 32 * 32) == 0);
  }

  // duplicated and permuted index lists
  auto [dups, dlabs] = data::load_batch(m, {1, 1});
  CHECK(std::memcmp(dups.data(), dups.data() + 3 * 32 * 32, sizeof(double) * 3 * 32 * 32) == 0);
  (void)dlabs;

  std::vector<int> perm = {4, 2, 0, 3, 1};
  auto [pimg, plab] = data::load_batch(m, perm);
  for (int i = 0; i < 5; ++i) {
    auto [one_img, one_lab] = data::load_batch(m, {perm[size_t(i)]});
    CHECK(std::memcmp(one_img.data(), pimg.data() + int64_t(i) * 3 * 32 * 32,
                      sizeof(double) * 3 * 32 * 32) == 0);
    CHECK(std::memcmp(one_lab.data(), plab.data() + int64_t(i) * 32 * 32,
                      sizeof(double) * 32 * 32) == 0);
  }

  CHECK_THROWS(data::load_batch(m, {5}));
  CHECK_THROWS(data::load_batch(m, {-1}));
}

TEST_CASE("empty dataset and empty batch") {
  TmpDir tmp("empty");
  data::SceneSpec spec = data::source_spec(3, 16, 16);
  data::DatasetManifest m = data::build_dataset(0, spec, 5, tmp.path.string());
  CHECK(m.count == 0);
  data::DatasetManifest r = data::load_manifest(tmp.path.string());
  CHECK(r.count == 0);
  auto [img, lab] = data::load_batch(r, {});
  CHECK(img.dim(0) == 0);
  CHECK(lab.dim(0) == 0);
}

TEST_CASE("file access trace supports a directory guard") {
  TmpDir tmp("trace");
  data::SceneSpec spec = data::source_spec(3, 16, 16);
  data::build_dataset(2, spec, 1, (tmp.path / "src").string());
  data::build_dataset(2, spec, 2, (tmp.path / "tgt").string());

  data::io_trace::clear();
  CHECK_FALSE(data::io_trace::any_under(tmp.path.string()));

  data::DatasetManifest m = data::load_manifest((tmp.path / "tgt").string());
  data::load_batch(m, {0, 1});
  CHECK(data::io_trace::any_under((tmp.path / "tgt").string()));
  CHECK_FALSE(data::io_trace::any_under((tmp.path / "src").string()));
  CHECK(data::io_trace::snapshot().size() == 5);  // manifest + 2 images + 2 labels

  data::io_trace::clear();
  CHECK(data::io_trace::snapshot().empty());
}
