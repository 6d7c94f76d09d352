#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <unistd.h>

#include "hybrid/dataset.hpp"

using namespace hyb;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hybrid_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SynthSpec small_spec(std::size_t count = 60) {
  SynthSpec s;
  s.count = count;
  return s;
}

}  // namespace

TEST(Synth, GradeZeroHasEmptyMask) {
  const auto ds = synth_dataset(small_spec());
  std::size_t zeros = 0;
  for (const auto& s : ds.samples) {
    ASSERT_NE(s.combined_mask(), nullptr);
    if (s.label == 0) {
      ++zeros;
      EXPECT_EQ(s.combined_mask()->count(), 0u) << s.id;
    } else {
      EXPECT_GT(s.combined_mask()->count(), 0u) << s.id;
    }
  }
  EXPECT_EQ(zeros, 20u);
}

TEST(Synth, SameSeedIsIdentical) {
  const auto a = synth_dataset(small_spec(30));
  const auto b = synth_dataset(small_spec(30));
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].label, b.samples[i].label);
    EXPECT_EQ(a.samples[i].image.data, b.samples[i].image.data);
    EXPECT_EQ(a.samples[i].combined_mask()->px, b.samples[i].combined_mask()->px);
  }
  auto spec = small_spec(30);
  spec.seed = 2;
  const auto c = synth_dataset(spec);
  EXPECT_NE(a.samples[0].image.data, c.samples[0].image.data);
}

// Pixel count of a rasterized disk is pi r^2 up to the boundary pixels.
TEST(Synth, MaskAreaMatchesDiskArea) {
  const auto spec = small_spec();
  for (std::size_t i = 0; i < 30; ++i) {
    const auto ss = synth_sample(spec, i, 2);
    ASSERT_GE(ss.disks.size(), 5u);
    for (const Disk& d : ss.disks) {
      std::size_t px = 0;
      for (std::size_t y = 0; y < spec.image_size; ++y)
        for (std::size_t x = 0; x < spec.image_size; ++x) px += disk_contains(d, x, y) && ss.sample.combined_mask()->at(y, x);
      const double area = 3.14159265358979 * d.radius * d.radius;
      const double perimeter = 2 * 3.14159265358979 * d.radius;
      EXPECT_LE(std::fabs(static_cast<double>(px) - area), perimeter) << "r=" << d.radius;
    }
  }
}

TEST(Synth, MaskMarksExactlyLesionPixels) {
  const auto spec = small_spec();
  const auto ss = synth_sample(spec, 3, 1);
  const auto* m = ss.sample.combined_mask();
  for (std::size_t y = 0; y < spec.image_size; ++y)
    for (std::size_t x = 0; x < spec.image_size; ++x) {
      bool in = false;
      for (const Disk& d : ss.disks) in = in || disk_contains(d, x, y);
      EXPECT_EQ(m->at(y, x) != 0, in);
      // Lesions are bright in the green channel, background is dark.
      if (in) EXPECT_GT(ss.sample.image.at(1, y, x), 0.5f);
      else EXPECT_LT(ss.sample.image.at(1, y, x), 0.4f);
    }
}

TEST(Synth, LesionCountsFollowGrades) {
  const auto spec = small_spec();
  const auto counts = spec.resolved_counts();
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t i = 0; i < 20; ++i) {
      const auto ss = synth_sample(spec, i, g);
      EXPECT_GE(ss.disks.size(), counts[g].first);
      EXPECT_LE(ss.disks.size(), counts[g].second);
    }
}

TEST(Synth, GradeHistogramFollowsProportions) {
  auto spec = small_spec(100);
  spec.proportions = {0.5, 0.3, 0.2};
  const auto ds = synth_dataset(spec);
  std::vector<long> h(3, 0);
  for (const auto& s : ds.samples) ++h[s.label];
  EXPECT_LE(std::abs(h[0] - 50), 1);
  EXPECT_LE(std::abs(h[1] - 30), 1);
  EXPECT_LE(std::abs(h[2] - 20), 1);
  spec.count = 7;
  spec.proportions = {1, 1, 1};
  const auto alloc = grade_allocation(spec);
  EXPECT_EQ(alloc[0] + alloc[1] + alloc[2], 7u);
  for (auto a : alloc) EXPECT_LE(std::llabs(static_cast<long long>(a) * 3 - 7), 3);
}

TEST(Synth, InfeasibleSpecsRejected) {
  auto spec = small_spec();
  spec.radius_max = 40;
  EXPECT_THROW(synth_dataset(spec), ConfigError);
  spec = small_spec();
  spec.lesion_counts = {{0, 0}, {0, 2}, {3, 5}};
  EXPECT_THROW(synth_dataset(spec), ConfigError);
  spec = small_spec();
  spec.classes = 1;
  EXPECT_THROW(synth_dataset(spec), ConfigError);
  spec = small_spec();
  spec.proportions = {1, 1};
  EXPECT_THROW(synth_dataset(spec), ConfigError);
}

TEST(Synth, RadiusStepGrowsSevereLesions) {
  auto spec = small_spec();
  spec.radius_step = 1.5;
  for (std::size_t i = 0; i < 20; ++i) {
    for (const Disk& d : synth_sample(spec, i, 1).disks) {
      EXPECT_GE(d.radius, spec.radius_min);
      EXPECT_LE(d.radius, spec.radius_max);
    }
    for (const Disk& d : synth_sample(spec, i, 2).disks) {
      EXPECT_GE(d.radius, spec.radius_min + 1.5);
      EXPECT_LE(d.radius, spec.radius_max + 1.5);
    }
  }
  spec.radius_step = -0.5;
  EXPECT_THROW(synth_dataset(spec), ConfigError);
  spec.radius_step = 30;
  EXPECT_THROW(synth_dataset(spec), ConfigError);
}

TEST(Split, IntegrityAndSizes) {
  const auto ds = synth_dataset(small_spec(600));
  const auto sp = split_dataset(ds, 0.1, 0.15, 1);
  EXPECT_LE(std::abs(static_cast<long>(sp.val.size()) - 60), 1);
  EXPECT_LE(std::abs(static_cast<long>(sp.test.size()) - 90), 1);
  std::set<std::string> seen;
  for (const auto* v : {&sp.train, &sp.val, &sp.test})
    for (std::size_t i : *v) EXPECT_TRUE(seen.insert(ds.samples[i].id).second) << ds.samples[i].id;
  EXPECT_EQ(seen.size(), 600u);
}

TEST(Split, SubjectsStayTogether) {
  auto ds = synth_dataset(small_spec(40));
  for (std::size_t i = 0; i < ds.size(); ++i) ds.samples[i].subject = "subj" + std::to_string(i / 4);
  const auto sp = split_dataset(ds, 0.2, 0.2, 3);
  std::map<std::string, int> where;
  int tag = 0;
  for (const auto* v : {&sp.train, &sp.val, &sp.test}) {
    for (std::size_t i : *v) {
      auto [it, fresh] = where.emplace(ds.samples[i].subject, tag);
      EXPECT_EQ(it->second, tag) << ds.samples[i].subject;
    }
    ++tag;
  }
}

TEST(Split, DeterministicAndValidated) {
  const auto ds = synth_dataset(small_spec(50));
  const auto a = split_dataset(ds, 0.2, 0.2, 5), b = split_dataset(ds, 0.2, 0.2, 5);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.val, b.val);
  EXPECT_THROW(split_dataset(ds, 0.6, 0.5, 1), ConfigError);
  EXPECT_THROW(split_dataset(ds, 0.0, 0.5, 1), ConfigError);
}

TEST(DatasetDir, RoundTrip) {
  const auto dir = scratch_dir("roundtrip");
  auto ds = synth_dataset(small_spec(12));
  write_dataset_dir(ds, dir);
  EXPECT_TRUE(fs::exists(dir / "labels.csv"));
  const auto back = load_dataset_dir(dir, 3);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.samples[i].id, ds.samples[i].id);
    EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    EXPECT_EQ(back.samples[i].image.data, ds.samples[i].image.data);  // 8-bit quantized in memory already
    EXPECT_EQ(back.samples[i].combined_mask()->px, ds.samples[i].combined_mask()->px);
  }
  fs::remove_all(dir);
}

TEST(DatasetDir, MissingLabelsNamesTheFile) {
  const auto dir = scratch_dir("nolabels");
  try {
    load_dataset_dir(dir);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("labels.csv"), std::string::npos);
  }
  std::ofstream(dir / "labels.csv") << "name,grade\n";
  EXPECT_THROW(load_dataset_dir(dir), FormatError);
  fs::remove_all(dir);
}

TEST(DatasetDir, BadLabelLineReportsLineNumber) {
  const auto dir = scratch_dir("badlabel");
  auto ds = synth_dataset(small_spec(3));
  write_dataset_dir(ds, dir);
  std::ofstream(dir / "labels.csv") << "filename,label\n" << ds.samples[0].id << ",1\n" << ds.samples[1].id << ",x\n";
  try {
    load_dataset_dir(dir);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(DatasetDir, PerTypeMasksFormUnion) {
  const auto dir = scratch_dir("types");
  auto ds = synth_dataset(small_spec(3));
  for (auto& s : ds.samples) {
    LesionMask a = LesionMask::empty(64, 64), b = LesionMask::empty(64, 64);
    a.px[0] = 1;
    b.px[65] = 1;
    s.masks.clear();
    s.masks.emplace("MA", a);
    s.masks.emplace("HE", b);
  }
  write_dataset_dir(ds, dir);
  const auto back = load_dataset_dir(dir);
  const auto* u = back.samples[0].combined_mask();
  ASSERT_NE(u, nullptr);
  EXPECT_EQ(u->count(), 2u);
  EXPECT_EQ(back.samples[0].masks.count("MA"), 1u);
  EXPECT_EQ(back.samples[0].masks.count("HE"), 1u);
  fs::remove_all(dir);
}

TEST(Augment, DisabledIsIdentity) {
  const auto ss = synth_sample(small_spec(), 0, 2);
  Augment off;
  off.flip = off.rotation = false;
  Rng rng(1);
  EXPECT_EQ(augment(ss.sample.image, off, rng).data, ss.sample.image.data);
}

TEST(Augment, FlipsArePermutationsAndDeterministic) {
  const auto ss = synth_sample(small_spec(), 1, 2);
  Augment flip_only;
  flip_only.rotation = false;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng r1(seed), r2(seed);
    const auto a = augment(ss.sample.image, flip_only, r1);
    EXPECT_EQ(a.data, augment(ss.sample.image, flip_only, r2).data);
    auto sa = a.data, so = ss.sample.image.data;
    std::sort(sa.begin(), sa.end());
    std::sort(so.begin(), so.end());
    EXPECT_EQ(sa, so);
  }
  Augment all;
  all.crop = all.brightness = true;
  Rng r(3);
  const auto b = augment(ss.sample.image, all, r);
  for (float v : b.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Batch, StacksImagesAndChecksSizes) {
  const auto a = synth_sample(small_spec(), 0, 1).sample.image;
  const auto b = synth_sample(small_spec(), 1, 1).sample.image;
  const auto t = to_batch<float>(std::vector<const Image*>{&a, &b});
  EXPECT_EQ(t.shape(), (Shape{2, 3, 64, 64}));
  EXPECT_EQ(t.at(1, 2, 5, 7), b.at(2, 5, 7));
  const Image c = Image::blank(3, 32, 32);
  EXPECT_THROW(to_batch<float>(std::vector<const Image*>{&a, &c}), ShapeError);
}

TEST(Dataset, ChannelMeans) {
  Dataset ds;
  ds.classes = 2;
  Sample s1, s2;
  s1.image = Image::blank(2, 2, 2, 0.25f);
  s2.image = Image::blank(2, 2, 2, 0.75f);
  s2.image.at(1, 0, 0) = 0.0f;
  ds.samples = {s1, s2};
  const auto m = channel_means(ds, {0, 1});
  EXPECT_FLOAT_EQ(m[0], 0.5f);
  EXPECT_FLOAT_EQ(m[1], (4 * 0.25f + 3 * 0.75f) / 8);
  EXPECT_THROW(channel_means(ds, {}), ConfigError);
}
