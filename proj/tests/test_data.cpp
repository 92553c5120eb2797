#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "test_util.hpp"
#include "vmx/dataset_io.hpp"

using namespace vmx;

namespace {

bool same_pair(const ModalityPair& a, const ModalityPair& b) {
  return a.id == b.id && a.ct.shape() == b.ct.shape() && a.ct.values() == b.ct.values() &&
         a.pet.values() == b.pet.values() && a.mask.values == b.mask.values && a.mask.height == b.mask.height &&
         a.mask.width == b.mask.width;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("vmx_test_" + name)).string();
}

// Weighted centroid of the pixels above half the maximum.
std::pair<double, double> hot_centroid(const Tensor& img, std::size_t n) {
  double hi = 0.0;
  for (double v : img.data()) hi = std::max(hi, v);
  double sr = 0, sc = 0, sw = 0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const double v = img[r * n + c];
      if (v < 0.5 * hi) continue;
      sr += v * r;
      sc += v * c;
      sw += v;
    }
  return {sr / sw, sc / sw};
}

std::pair<double, double> mask_centroid(const BinaryMask& m) {
  double sr = 0, sc = 0, k = 0;
  for (std::size_t r = 0; r < m.height; ++r)
    for (std::size_t c = 0; c < m.width; ++c)
      if (m.at(r, c)) {
        sr += r;
        sc += c;
        ++k;
      }
  return {sr / k, sc / k};
}

}  // namespace

TEST(Phantom, DeterministicInSeedAndIndex) {
  PhantomSpec spec;
  EXPECT_TRUE(same_pair(generate_phantom(spec, 3), generate_phantom(spec, 3)));
  EXPECT_FALSE(same_pair(generate_phantom(spec, 3), generate_phantom(spec, 4)));
  PhantomSpec other = spec;
  other.rng_seed = 8;
  EXPECT_NE(generate_phantom(spec, 3).ct.values(), generate_phantom(other, 3).ct.values());
  EXPECT_EQ(generate_phantom(spec, 12).id, "phantom_000012");
}

TEST(Phantom, ValuesInUnitRangeAndMaskBinary) {
  PhantomSpec spec;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const ModalityPair p = generate_phantom(spec, i);
    EXPECT_EQ(p.ct.shape(), (Shape{1, 64, 64}));
    for (double v : p.ct.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    for (double v : p.pet.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    for (auto v : p.mask.values) ASSERT_LE(v, 1);
    EXPECT_GT(p.mask.count(), 0u);
  }
}

TEST(Phantom, NoTumorMeansEmptyMaskAndNoHotSpot) {
  PhantomSpec spec;
  spec.tumor_count_min = spec.tumor_count_max = 0;
  const double sigma = spec.pet_noise_sigma;
  for (std::uint64_t i = 0; i < 10; ++i) {
    PhantomTruth truth;
    const ModalityPair p = generate_phantom(spec, i, &truth);
    EXPECT_EQ(p.mask.count(), 0u);
    // 3x3 box means of SUV minus the noise-free background.
    for (std::size_t r = 1; r + 1 < 64; ++r)
      for (std::size_t c = 1; c + 1 < 64; ++c) {
        double excess = 0.0;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const std::size_t k = (r + dr) * 64 + c + dc;
            excess += p.pet[k] * spec.suv_reference - truth.background_suv[k];
          }
        ASSERT_LE(excess / 9.0, 4.0 * sigma) << r << "," << c;
      }
  }
}

TEST(Phantom, MaskPetMeanMatchesConfiguredAmplitude) {
  PhantomSpec spec;
  spec.tumor_count_min = spec.tumor_count_max = 1;
  spec.vessel_count_min = spec.vessel_count_max = 0;
  spec.offset_probability = 0.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    PhantomTruth truth;
    const ModalityPair p = generate_phantom(spec, i, &truth);
    ASSERT_EQ(truth.lesions.size(), 1u);
    const auto& l = truth.lesions[0];
    const double sig = spec.pet_blur * l.radius;
    double observed = 0.0, expected = 0.0;
    std::size_t k = 0;
    for (std::size_t r = 0; r < 64; ++r)
      for (std::size_t c = 0; c < 64; ++c) {
        if (!p.mask.at(r, c)) continue;
        const std::size_t idx = r * 64 + c;
        observed += p.pet[idx] * spec.suv_reference - truth.background_suv[idx];
        const double d2 = (r - l.row) * (r - l.row) + (c - l.col) * (c - l.col);
        expected += l.amplitude * std::exp(-d2 / (2 * sig * sig));
        ++k;
      }
    observed /= static_cast<double>(k);
    expected /= static_cast<double>(k);
    EXPECT_NEAR(observed, expected, 4.0 * spec.pet_noise_sigma / std::sqrt(static_cast<double>(k)) + 1e-5);
    EXPECT_GT(observed, 0.5 * l.amplitude);
    EXPECT_GE(l.amplitude, spec.lesion_suv_min);
    EXPECT_LE(l.amplitude, spec.lesion_suv_max);
  }
}

TEST(Phantom, InvalidSpecRejected) {
  PhantomSpec spec;
  spec.tumor_count_min = 3;
  spec.tumor_count_max = 1;
  EXPECT_THROW(generate_phantom(spec, 0), ParameterError);
}

TEST(Preprocess, CtWindowEndpointsAndClamp) {
  const Tensor raw(Shape{5}, std::vector<double>{-1200, -200, -700, 3000, -3000});
  const Tensor out = preprocess_ct(raw);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[1], 1.0);
  EXPECT_EQ(out[2], 0.5);
  EXPECT_EQ(out[3], 1.0);
  EXPECT_EQ(out[4], 0.0);
}

TEST(Preprocess, PetScalingLinearityAndErrors) {
  const double scale = 0.01;
  const Tensor raw(Shape{4}, std::vector<double>{0.0, 1000.0, 120.0, 240.0});
  const Tensor out = preprocess_pet(raw, scale);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_DOUBLE_EQ(out[1], 1.0);
  EXPECT_DOUBLE_EQ(out[3], 2.0 * out[2]);
  EXPECT_EQ(preprocess_pet(Tensor(Shape{1}, 1e9), scale)[0], 1.0);
  EXPECT_THROW(preprocess_pet(raw, 0.0), ParameterError);
  EXPECT_THROW(preprocess_pet(raw, -1.0), ParameterError);
}

TEST(Resize, IdentityConstantAndErrors) {
  Rng rng(1);
  const Tensor x = vmx::testing::random_tensor({2, 9, 9}, rng);
  EXPECT_EQ(resize(x, 9).values(), x.values());
  const Tensor c(Shape{1, 7, 7}, 0.375);
  for (std::size_t side : {13, 3}) {
    const Tensor r = resize(c, side);
    for (double v : r.data()) EXPECT_DOUBLE_EQ(v, 0.375);
  }
  EXPECT_THROW(resize(x, 0), ParameterError);
  EXPECT_THROW(resize(BinaryMask(3, 3), 0), ParameterError);
}

TEST(Resize, NearestUpscaleOfCheckerboardReplicatesBlocks) {
  BinaryMask m(4, 4);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) m.at(r, c) = (r + c) % 2;
  const BinaryMask up = resize(m, 8);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(up.at(r, c), m.at(r / 2, c / 2));
  EXPECT_DOUBLE_EQ(up.spacing_row, 0.5);
  EXPECT_EQ(resize(m, 4).values, m.values);
}

TEST(Augment, FlipTwiceIsIdentityAndPreservesArea) {
  const ModalityPair p = generate_phantom(PhantomSpec{}, 1);
  AugmentDecision d;
  d.flip_horizontal = true;
  d.flip_vertical = true;
  const ModalityPair once = apply_augment(p, d);
  EXPECT_EQ(once.mask.count(), p.mask.count());
  EXPECT_NE(once.ct.values(), p.ct.values());
  EXPECT_TRUE(same_pair(apply_augment(once, d), p));
  d.flip_vertical = false;
  EXPECT_TRUE(same_pair(apply_augment(apply_augment(p, d), d), p));
}

TEST(Augment, SampledCropsStayInsideAndOutputKeepsSize) {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const AugmentDecision d = sample_augment(64, rng);
    ASSERT_GE(d.crop_side, 51u);
    ASSERT_LE(d.crop_side, 64u);
    ASSERT_LE(d.crop_top + d.crop_side, 64u);
    ASSERT_LE(d.crop_left + d.crop_side, 64u);
  }
  const ModalityPair out = augment(generate_phantom(PhantomSpec{}, 2), rng);
  EXPECT_EQ(out.ct.shape(), (Shape{1, 64, 64}));
  EXPECT_EQ(out.mask.height, 64u);
  AugmentDecision bad;
  bad.crop_side = 60;
  bad.crop_top = 10;
  EXPECT_THROW(apply_augment(generate_phantom(PhantomSpec{}, 2), bad), ParameterError);
}

TEST(Augment, MaskAndPetHotSpotStayAligned) {
  PhantomSpec spec;
  spec.tumor_count_min = spec.tumor_count_max = 1;
  spec.offset_probability = 0.0;
  Rng rng(3);
  for (std::uint64_t i = 0; i < 20; ++i) {
    const ModalityPair p = augment(generate_phantom(spec, i), rng);
    if (p.mask.count() < 4) continue;  // crop may cut the lesion away
    const auto [mr, mc] = mask_centroid(p.mask);
    const auto [pr, pc] = hot_centroid(p.pet, 64);
    EXPECT_NEAR(mr, pr, 1.5) << i;
    EXPECT_NEAR(mc, pc, 1.5) << i;
  }
}

TEST(DatasetIo, RoundTripIsBitExact) {
  const auto pairs = generate_dataset(PhantomSpec{}, 5);
  const auto decoded = dataset_decode(dataset_encode(pairs));
  ASSERT_EQ(decoded.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(same_pair(decoded[i], pairs[i]));
  const std::string path = temp_path("roundtrip.vmds");
  dataset_write(pairs, path);
  const auto from_disk = dataset_read(path);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(same_pair(from_disk[i], pairs[i]));
  EXPECT_EQ(dataset_encode(from_disk), dataset_encode(pairs));
  std::filesystem::remove(path);
}

TEST(DatasetIo, EmptyDatasetRoundTrips) {
  const auto bytes = dataset_encode({});
  EXPECT_EQ(bytes.size(), 12u);
  EXPECT_TRUE(dataset_decode(bytes).empty());
}

TEST(DatasetIo, CorruptedLengthFieldNamesOffset) {
  auto bytes = dataset_encode(generate_dataset(PhantomSpec{}, 2));
  // Width field of the first sample: 12 header + 2 + 14 id bytes + 4 height.
  const std::size_t width_at = 12 + 2 + 14 + 4;
  bytes[width_at + 2] = 0x7f;
  try {
    dataset_decode(bytes);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_EQ(e.offset(), width_at - 4);
    EXPECT_NE(std::string(e.what()).find("offset 28"), std::string::npos) << e.what();
  }
  auto truncated = dataset_encode(generate_dataset(PhantomSpec{}, 1));
  truncated.resize(truncated.size() - 10);
  try {
    dataset_decode(truncated);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_GT(e.offset(), 12u);
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
  // Shortened id length field shifts everything: the decoder must fail cleanly.
  auto shifted = dataset_encode(generate_dataset(PhantomSpec{}, 1));
  shifted[12] = 0xff;
  EXPECT_THROW(dataset_decode(shifted), IoError);
}

TEST(DatasetIo, BadMagicVersionAndMaskValues) {
  auto bytes = dataset_encode(generate_dataset(PhantomSpec{}, 1));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(dataset_decode(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(dataset_decode(bad), FormatError);
  bad = bytes;
  bad.back() = 7;
  EXPECT_THROW(dataset_decode(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(dataset_decode(bad), FormatError);
  EXPECT_THROW(dataset_read(temp_path("does_not_exist.vmds")), IoError);
}

TEST(DatasetIo, PgmExportRoundTrips) {
  const auto p = generate_phantom(PhantomSpec{}, 4);
  const std::string path = temp_path("mask.pgm");
  write_pgm(p.mask, path);
  const auto bytes = io::read_file(path);
  const std::string header = "P5\n64 64\n255\n";
  ASSERT_GE(bytes.size(), header.size());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + header.size()), header);
  EXPECT_EQ(bytes.size(), header.size() + 64 * 64);
  EXPECT_EQ(read_pgm(path).values, p.mask.values);
  std::filesystem::remove(path);
}
