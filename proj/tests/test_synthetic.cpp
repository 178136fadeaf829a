#include <fstream>

#include <gtest/gtest.h>

#include "dapsam/dapsam.hpp"
#include "test_util.hpp"

using namespace dapsam;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

SuiteConfig small_suite(std::size_t domains, std::size_t n) {
  SuiteConfig s = default_config().data;
  s.domains.resize(domains);
  s.samples_per_domain = n;
  return s;
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = testutil::slurp(e.path());
  }
  return out;
}

}  // namespace

TEST(Generate, ByteIdenticalTrees) {
  TempDir a("gen_a"), b("gen_b");
  generate_domain_suite(small_suite(3, 5), 11, a.path, true);
  generate_domain_suite(small_suite(3, 5), 11, b.path, true);
  EXPECT_EQ(tree_contents(a.path), tree_contents(b.path));
  TempDir c("gen_c");
  generate_domain_suite(small_suite(3, 5), 12, c.path, true);
  EXPECT_NE(tree_contents(a.path), tree_contents(c.path));
}

TEST(Generate, FileCounts) {
  TempDir d("counts");
  generate_domain_suite(small_suite(4, 50), 0, d.path, true);
  std::size_t images = 0, masks = 0, manifests = 0;
  for (const auto& e : fs::recursive_directory_iterator(d.path)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    images += ext == ".dapd";
    masks += ext == ".dapm";
    manifests += e.path().filename() == "manifest.json";
  }
  EXPECT_EQ(images, 200u);
  EXPECT_EQ(masks, 200u);
  EXPECT_EQ(manifests, 1u);
}

TEST(Generate, RefusesNonEmptyDirectory) {
  TempDir d("refuse");
  std::ofstream(d / "keep.txt") << "x";
  EXPECT_THROW(generate_domain_suite(small_suite(2, 2), 0, d.path), InvalidInput);
  EXPECT_TRUE(fs::exists(d / "keep.txt"));
  EXPECT_NO_THROW(generate_domain_suite(small_suite(2, 2), 0, d.path, true));
  EXPECT_FALSE(fs::exists(d / "keep.txt"));
}

TEST(Generate, MaskAreaSameDistributionAcrossDomains) {
  const SuiteConfig s = default_config().data;
  std::vector<double> means;
  for (const auto& d : s.domains) {
    double area = 0.0;
    for (std::size_t i = 0; i < 500; ++i) {
      const DomainSample x = make_sample(s, d, 0, i);
      area += static_cast<double>(std::count(x.mask.begin(), x.mask.end(), 1));
    }
    means.push_back(area / 500.0);
  }
  const auto [lo, hi] = std::minmax_element(means.begin(), means.end());
  EXPECT_LT((*hi - *lo) / *lo, 0.05);
}

TEST(Generate, DomainShiftNeverTouchesMasks) {
  const SuiteConfig s = default_config().data;
  const Anatomy a = render_anatomy(1234, 64, 2);
  for (const auto& d : s.domains) {
    const auto img = apply_domain(a, d, 99);
    EXPECT_EQ(img.size(), a.mask.size());
  }
  // same anatomy seed rendered under two domains: the sample masks agree
  DomainSpec x = s.domains[1];
  x.name = s.domains[0].name;  // same name -> same per-sample seed, different shift
  EXPECT_EQ(make_sample(s, s.domains[0], 3, 7).mask, make_sample(s, x, 3, 7).mask);
  EXPECT_NE(make_sample(s, s.domains[0], 3, 7).image, make_sample(s, x, 3, 7).image);
}

TEST(Generate, IntensityRangeAndLabels) {
  const SuiteConfig s = default_config().data;
  for (const auto& d : s.domains) {
    for (std::size_t i = 0; i < 5; ++i) {
      const DomainSample x = make_sample(s, d, 5, i);
      for (float v : x.image) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
      for (auto l : x.mask) EXPECT_LT(l, 2);
    }
  }
  const SuiteConfig f = fundus_config().data;
  bool saw_cup = false;
  for (std::size_t i = 0; i < 5; ++i) {
    const DomainSample x = make_sample(f, f.domains[0], 5, i);
    for (auto l : x.mask) {
      EXPECT_LT(l, 3);
      saw_cup |= l == 2;
    }
  }
  EXPECT_TRUE(saw_cup);
}

TEST(Load, CountsMatchManifest) {
  TempDir d("load");
  generate_domain_suite(small_suite(3, 4), 2, d.path, true);
  const Dataset ds = load_dataset(d.path);
  ASSERT_EQ(ds.domains.size(), 3u);
  for (const auto& dom : ds.domains) EXPECT_EQ(dom.samples.size(), 4u);
  EXPECT_EQ(ds.sample_count(), 12u);
  EXPECT_EQ(ds.num_labels, 2u);
  EXPECT_EQ(ds.image_size, 64u);
}

TEST(Load, RoundTripBitExact) {
  TempDir d("roundtrip");
  const SuiteConfig s = small_suite(2, 3);
  generate_domain_suite(s, 8, d.path, true);
  const Dataset ds = load_dataset(d.path);
  for (const auto& dom : ds.domains) {
    for (const auto& x : dom.samples) {
      const DomainSample ref = make_sample(s, s.domains[dom.name == "A" ? 0 : 1], 8, x.index);
      EXPECT_EQ(0, std::memcmp(ref.image.data(), x.image.data(), ref.image.size() * sizeof(float)));
      EXPECT_EQ(ref.mask, x.mask);
    }
  }
}

TEST(Load, FileFormatHeader) {
  TempDir d("header");
  write_image_file(d / "x.dapd", 2, 3, std::vector<float>{0.f, 0.25f, 0.5f, 0.75f, 1.f, 0.125f});
  const std::string bytes = testutil::slurp(d / "x.dapd");
  ASSERT_EQ(bytes.size(), 13u + 24u);
  EXPECT_EQ(bytes.substr(0, 4), "DAPD");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 2u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 3u);
  // 0.25f = 0x3E800000 little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[13 + 4 + 3]), 0x3Eu);
  EXPECT_EQ(static_cast<unsigned char>(bytes[13 + 4 + 2]), 0x80u);
  write_mask_file(d / "m.dapm", 1, 2, std::vector<std::uint8_t>{0, 1});
  EXPECT_EQ(testutil::slurp(d / "m.dapm"), std::string("DAPM\x01\x01\0\0\0\x02\0\0\0\0\x01", 15));
}

TEST(Load, TruncatedImageNamesFile) {
  TempDir d("trunc");
  generate_domain_suite(small_suite(2, 2), 0, d.path, true);
  const fs::path victim = d.path / "B" / image_name(1);
  fs::resize_file(victim, fs::file_size(victim) - 7);
  try {
    load_dataset(d.path);
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find(victim.string()), std::string::npos) << e.what();
  }
}

TEST(Load, CorruptHeaderAndBadLabel) {
  TempDir d("corrupt");
  generate_domain_suite(small_suite(2, 2), 0, d.path, true);
  {
    std::fstream f(d.path / "A" / image_name(0), std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(load_dataset(d.path), LoadError);
  generate_domain_suite(small_suite(2, 2), 0, d.path, true);
  write_mask_file(d.path / "A" / mask_name(1), 64, 64, std::vector<std::uint8_t>(64 * 64, 5));
  try {
    load_dataset(d.path);
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find(mask_name(1)), std::string::npos);
  }
  generate_domain_suite(small_suite(2, 2), 0, d.path, true);
  write_image_file(d.path / "B" / image_name(0), 32, 32, std::vector<float>(32 * 32, 0.f));
  EXPECT_THROW(load_dataset(d.path), LoadError);
}

TEST(Split, LeaveOneOut) {
  TempDir d("split");
  generate_domain_suite(small_suite(6, 3), 0, d.path, true);
  const Dataset ds = load_dataset(d.path);
  const Split s = leave_one_out_splits(ds, "A");
  EXPECT_EQ(s.tests.size(), 5u);
  std::size_t total = s.train.size();
  for (const auto& t : s.tests) {
    EXPECT_NE(t.name, "A");
    total += t.samples.size();
  }
  EXPECT_EQ(total, ds.sample_count());
  for (const auto& x : s.train) EXPECT_EQ(x.domain, "A");
  EXPECT_THROW(leave_one_out_splits(ds, "Z"), InventoryError);
}

TEST(Split, TwoDomains) {
  TempDir d("split2");
  generate_domain_suite(small_suite(2, 3), 0, d.path, true);
  const Split s = leave_one_out_splits(load_dataset(d.path), "B");
  ASSERT_EQ(s.tests.size(), 1u);
  EXPECT_EQ(s.tests[0].name, "A");
}
