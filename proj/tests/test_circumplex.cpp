#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "levasa/circumplex.hpp"

using namespace levasa;
namespace fs = std::filesystem;

namespace {

EllipseModel two_centroids() {
  EllipseModel m;
  m.ellipses.push_back({EmotionLabel{0, "calm"}, 0.0, 0.0, 0.1, 0.1, 1});
  m.ellipses.push_back({EmotionLabel{1, "joy"}, 1.0, 1.0, 0.1, 0.1, 1});
  return m;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("levasa_circumplex_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(FitReference, MeanAndPopulationStd) {
  const EmotionLabel happy{0, "happiness"};
  const std::vector<ReferenceSample> ref = {{happy, {0.8, 0.5}}, {happy, {0.6, 0.3}}};
  const auto m = fit_reference(ref, {});
  ASSERT_EQ(m.ellipses.size(), 1u);
  const auto& e = m.ellipses[0];
  EXPECT_NEAR(e.mu_v, 0.7, 1e-15);
  EXPECT_NEAR(e.mu_a, 0.4, 1e-15);
  EXPECT_NEAR(e.sigma_v, 0.1, 1e-15);
  EXPECT_NEAR(e.sigma_a, 0.1, 1e-15);
  EXPECT_EQ(e.count, 2u);
}

TEST(FitReference, SingleSampleHasZeroSpread) {
  const std::vector<ReferenceSample> ref = {{{0, "x"}, {0.2, 0.2}}};
  const auto e = fit_reference(ref, {}).ellipses.at(0);
  EXPECT_EQ(e.mu_v, 0.2);
  EXPECT_EQ(e.mu_a, 0.2);
  EXPECT_EQ(e.sigma_v, 0.0);
  EXPECT_EQ(e.sigma_a, 0.0);
}

TEST(FitReference, IdenticalGroupsGiveIdenticalEllipsesWithDistinctLabels) {
  std::vector<ReferenceSample> ref;
  for (std::size_t k = 0; k < 2; ++k)
    for (VAPoint p : {VAPoint{0.1, 0.2}, VAPoint{-0.3, 0.5}, VAPoint{0.4, -0.1}})
      ref.push_back({{k, k == 0 ? "a" : "b"}, p});
  const auto m = fit_reference(ref, {});
  ASSERT_EQ(m.ellipses.size(), 2u);
  EXPECT_NE(m.ellipses[0].label, m.ellipses[1].label);
  EXPECT_EQ(m.ellipses[0].mu_v, m.ellipses[1].mu_v);
  EXPECT_EQ(m.ellipses[0].sigma_a, m.ellipses[1].sigma_a);
}

TEST(FitReference, EmptyInputAndOutOfDomainPointAreErrors) {
  EXPECT_THROW(
      {
        try {
          fit_reference({}, {});
        } catch (const Error& e) {
          EXPECT_STREQ(e.what(), "empty reference");
          throw;
        }
      },
      Error);
  const std::vector<ReferenceSample> ref = {{{0, "a"}, {0.0, 0.0}}, {{0, "a"}, {1.5, 0.0}}};
  try {
    fit_reference(ref, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("sample 1"), std::string::npos) << e.what();
  }
}

TEST(FitReference, PermutationInvariant) {
  SeededRng rng(3);
  std::vector<ReferenceSample> ref;
  for (int i = 0; i < 200; ++i) {
    const std::size_t k = rng.uniform_index(3);
    ref.push_back({{k, "e" + std::to_string(k)}, {rng.uniform(-1, 1), rng.uniform(-1, 1)}});
  }
  const auto base = fit_reference(ref, {});
  for (int t = 0; t < 5; ++t) {
    shuffle(ref.begin(), ref.end(), rng);
    EXPECT_EQ(fit_reference(ref, {}), base);
  }
}

TEST(SampleVa, ForcedPolarCoordinates) {
  const EmotionEllipse e{{0, "x"}, 0.2, -0.1, 0.3, 0.15, 1};
  const VADomain d;
  const auto c = ellipse_point(e, 0.0, 1.234, d);
  EXPECT_DOUBLE_EQ(c.v, 0.2);
  EXPECT_DOUBLE_EQ(c.a, -0.1);
  const auto rim = ellipse_point(e, 1.0, 0.0, d);
  EXPECT_DOUBLE_EQ(rim.v, 0.5);
  EXPECT_DOUBLE_EQ(rim.a, -0.1);
}

TEST(SampleVa, ClampsToDomain) {
  EllipseModel m;
  m.ellipses.push_back({{0, "edge"}, 0.95, 0.95, 0.5, 0.5, 1});
  SeededRng rng(1);
  for (int i = 0; i < 1000; ++i) EXPECT_TRUE(m.domain.contains(sample_va(m, m.ellipses[0].label, rng)));
}

TEST(SampleVa, UnknownLabelListsKnownLabels) {
  const auto m = two_centroids();
  SeededRng rng(0);
  try {
    sample_va(m, {7, "rage"}, rng);
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("calm"), std::string::npos) << msg;
    EXPECT_NE(msg.find("joy"), std::string::npos) << msg;
  }
}

TEST(SampleVa, QuarterOfDrawsFallInHalfAxesEllipseAndMeanIsCentre) {
  EllipseModel m;
  m.domain = {-10, 10, -10, 10};
  m.ellipses.push_back({{0, "u"}, 0.5, -0.25, 1.0, 0.6, 1});
  const auto& e = m.ellipses[0];
  SeededRng rng(77);
  const int n = 100000;
  int inner = 0;
  double sv = 0, sa = 0;
  for (int i = 0; i < n; ++i) {
    const auto p = sample_va(m, e.label, rng);
    const double q = std::pow((p.v - e.mu_v) / e.sigma_v, 2) + std::pow((p.a - e.mu_a) / e.sigma_a, 2);
    ASSERT_LE(q, 1.0 + 1e-12);
    inner += q <= 0.25;
    sv += p.v;
    sa += p.a;
  }
  EXPECT_NEAR(inner / double(n), 0.25, 0.01);
  // Standard error of a uniform-disc coordinate mean: sigma / (2 sqrt(n)).
  EXPECT_NEAR(sv / n, e.mu_v, 3 * e.sigma_v / (2 * std::sqrt(double(n))));
  EXPECT_NEAR(sa / n, e.mu_a, 3 * e.sigma_a / (2 * std::sqrt(double(n))));
}

TEST(DiscretizeVa, RoundingRule) {
  EXPECT_EQ(discretize_va({0.14, -0.31}, 10), (DiscreteVA{1, -3}));
  EXPECT_EQ(discretize_va({1.0, 1.0}, 10), (DiscreteVA{10, 10}));
  EXPECT_EQ(discretize_va({0.05, -0.05}, 10), (DiscreteVA{1, -1}));
  EXPECT_EQ(discretize_va({3.0, -7.0}, 10), (DiscreteVA{10, -10}));
  EXPECT_THROW(discretize_va({0, 0}, 0), Error);
}

TEST(NearestEmotion, Examples) {
  const auto m = two_centroids();
  EXPECT_EQ(nearest_emotion(m, {1.0, 1.0}).name, "joy");
  EXPECT_EQ(nearest_emotion(m, {0.2, 0.2}).name, "calm");
  EXPECT_EQ(nearest_emotion(m, {0.5, 0.5}).index, 0u);
  EXPECT_EQ(nearest_emotion(m, {1.0, 0.0}).index, 0u);
}

TEST(NearestEmotion, TranslationInvariant) {
  const auto base = default_emotion_model();
  SeededRng rng(6);
  for (int i = 0; i < 200; ++i) {
    const VAPoint p{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    // Power-of-two shifts keep the translated coordinates exact.
    const double dv = std::ldexp(1.0, static_cast<int>(rng.uniform_index(4))), da = -dv / 2;
    EllipseModel moved = base;
    for (auto& e : moved.ellipses) {
      e.mu_v += dv;
      e.mu_a += da;
    }
    moved.domain = {-100, 100, -100, 100};
    EXPECT_EQ(nearest_emotion(moved, {p.v + dv, p.a + da}), nearest_emotion(base, p));
  }
}

TEST(AreaFraction, ClosedForms) {
  EllipseModel m;
  m.ellipses.push_back({{0, "zero"}, 0, 0, 0, 0, 1});
  m.ellipses.push_back({{1, "unit"}, 0, 0, 1, 1, 1});
  m.ellipses.push_back({{2, "small"}, 0, 0, 0.1, 0.1, 1});
  const auto f = area_fraction(m);
  EXPECT_EQ(f[0], 0.0);
  EXPECT_NEAR(f[1], std::numbers::pi / 4, 1e-15);
  EXPECT_NEAR(f[2], std::numbers::pi * 0.01 / 4, 1e-15);
}

TEST(RoundTrip, SeparatedCentroidsRecoverLabel) {
  EllipseModel m;
  const double r = 0.8;
  for (std::size_t k = 0; k < 6; ++k) {
    const double t = 2 * std::numbers::pi * k / 6;
    m.ellipses.push_back({{k, "e" + std::to_string(k)}, r * std::cos(t), r * std::sin(t), 0.08, 0.1, 1});
  }
  SeededRng rng(10);
  for (int i = 0; i < 3000; ++i) {
    const auto& e = m.ellipses[rng.uniform_index(6)];
    ASSERT_EQ(nearest_emotion(m, sample_va(m, e.label, rng)), e.label);
  }
}

TEST(EllipseCsv, WriteReadRoundTripIsExact) {
  const auto dir = temp_dir("csv");
  const auto m = default_emotion_model();
  write_ellipse_csv(dir / "ellipses.csv", m);
  std::ifstream in(dir / "ellipses.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "emotion,index,mu_v,mu_a,sigma_v,sigma_a,count");
  EXPECT_EQ(read_ellipse_csv(dir / "ellipses.csv"), m);
}

TEST(ReferenceCsv, IndicesFollowSortedNames) {
  const auto dir = temp_dir("ref");
  {
    std::ofstream out(dir / "ref.csv");
    out << "emotion,valence,arousal\nsadness,-0.5,-0.5\nanger,-0.4,0.6\nsadness,-0.6,-0.4\n";
  }
  const auto ref = read_reference_csv(dir / "ref.csv");
  ASSERT_EQ(ref.size(), 3u);
  EXPECT_EQ(ref[0].label, (EmotionLabel{1, "sadness"}));
  EXPECT_EQ(ref[1].label, (EmotionLabel{0, "anger"}));
  const auto m = fit_reference(ref, {});
  EXPECT_EQ(m.ellipses[1].count, 2u);
}

TEST(DefaultModel, CentresInsideDomainAndSmallAreas) {
  const auto m = default_emotion_model();
  EXPECT_EQ(m.ellipses.size(), 6u);
  double mean = 0;
  for (double f : area_fraction(m)) mean += f / 6;
  EXPECT_LT(mean, 0.05);
  for (const auto& e : m.ellipses) EXPECT_TRUE(m.domain.contains({e.mu_v, e.mu_a}));
}
