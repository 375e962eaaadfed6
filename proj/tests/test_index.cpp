#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "egn/error.hpp"
#include "egn/index.hpp"
#include "egn/objectives.hpp"
#include "test_support.hpp"

namespace egn {
namespace {

// Independent scalar re-implementations used as the oracle.
double oracle_distance(const std::vector<double>& a, const std::vector<double>& b, Metric metric) {
  if (metric == Metric::kL1) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
    return s;
  }
  if (metric == Metric::kL2) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a[i] - b[i];
      s += d * d;
    }
    return std::sqrt(s);
  }
  double aa = 0.0, bb = 0.0, ab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) aa += a[i] * a[i];
  for (std::size_t i = 0; i < a.size(); ++i) bb += b[i] * b[i];
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i];
  const double c = 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
  return c < 0.0 ? 0.0 : c;
}

std::vector<double> random_vector(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

struct RandomIndex {
  ExemplarIndex index{16, 3};
  std::vector<std::vector<double>> views;
  std::vector<std::uint64_t> patients;
};

RandomIndex make_random_index(std::size_t n, std::size_t n_patients, Rng& rng) {
  RandomIndex r;
  for (std::size_t i = 0; i < n; ++i) {
    r.views.push_back(random_vector(16, rng));
    r.patients.push_back(rng.below(n_patients));
    r.index.add(1000 + i, r.patients.back(), r.views.back(), random_vector(3, rng));
  }
  return r;
}

TEST(Distance, IdentityIsZero) {
  Rng rng(1);
  const auto a = random_vector(7, rng);
  for (Metric m : {Metric::kL2, Metric::kL1, Metric::kCosine}) EXPECT_EQ(distance(a, a, m), 0.0);
}

TEST(Distance, OrthogonalUnitVectors) {
  const std::vector<double> a = {1, 0}, b = {0, 1};
  EXPECT_DOUBLE_EQ(distance(a, b, Metric::kL2), std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(distance(a, b, Metric::kL1), 2.0);
  EXPECT_DOUBLE_EQ(distance(a, b, Metric::kCosine), 1.0);
}

TEST(Distance, MatchesScalarOracleAndIsSymmetric) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    const auto a = random_vector(n, rng);
    const auto b = random_vector(n, rng);
    for (Metric m : {Metric::kL2, Metric::kL1, Metric::kCosine}) {
      EXPECT_NEAR(distance(a, b, m), oracle_distance(a, b, m), 1e-12);
      EXPECT_GE(distance(a, b, m), 0.0);
    }
    EXPECT_EQ(distance(a, b, Metric::kL1), distance(b, a, Metric::kL1));
    EXPECT_EQ(distance(a, b, Metric::kL2), distance(b, a, Metric::kL2));
  }
}

TEST(Distance, Errors) {
  const std::vector<double> z = {0, 0}, a = {1, 2};
  EXPECT_THROW(distance(z, a, Metric::kCosine), DegenerateInputError);
  EXPECT_THROW(distance(a, std::vector<double>{1}, Metric::kL2), DimensionError);
  EXPECT_EQ(parse_metric("cosine"), Metric::kCosine);
  EXPECT_THROW(parse_metric("l3"), ConfigError);
}

TEST(Query, StoredCrossPatientViewIsNearest) {
  ExemplarIndex index(2, 1);
  index.add(1, 0, std::vector<double>{0.5, 0.5}, std::vector<double>{1});
  index.add(2, 1, std::vector<double>{0.1, 0.9}, std::vector<double>{2});
  index.add(3, 1, std::vector<double>{3.0, 3.0}, std::vector<double>{3});
  const ExemplarSet s = index.query(std::vector<double>{0.1, 0.9}, 0, 1, Metric::kL2);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s.window_ids[0], 2u);
  EXPECT_EQ(s.distances[0], 0.0);
}

TEST(Query, SamePatientOnlyRaisesWithEligibleCount) {
  ExemplarIndex index(2, 1);
  index.add(1, 4, std::vector<double>{0, 1}, std::vector<double>{0});
  index.add(2, 4, std::vector<double>{1, 0}, std::vector<double>{0});
  index.add(3, 5, std::vector<double>{1, 1}, std::vector<double>{0});
  try {
    index.query(std::vector<double>{1, 1}, 4, 2, Metric::kL2);
    FAIL() << "expected InsufficientExemplarsError";
  } catch (const InsufficientExemplarsError& e) {
    EXPECT_EQ(e.eligible(), 1u);
  }
  EXPECT_THROW(index.query(std::vector<double>{1, 1}, 5, 3, Metric::kL2), InsufficientExemplarsError);
  EXPECT_THROW(index.query(std::vector<double>{1, 1}, 5, 0, Metric::kL2), ContractError);
}

TEST(Query, TiesBreakBySmallerWindowId) {
  ExemplarIndex index(2, 1);
  for (std::uint64_t id : {9u, 3u, 7u}) index.add(id, 1, std::vector<double>{1, 1}, std::vector<double>{0});
  const ExemplarSet s = index.query(std::vector<double>{0, 0}, 0, 3, Metric::kL1);
  EXPECT_EQ(s.window_ids, (std::vector<std::uint64_t>{3, 7, 9}));
}

TEST(Query, ExcludesTheQueryWindowItself) {
  ExemplarIndex index(1, 1);
  index.add(1, 0, std::vector<double>{0}, std::vector<double>{0});
  index.add(2, 1, std::vector<double>{5}, std::vector<double>{0});
  const ExemplarSet s = index.query(std::vector<double>{0}, 7, 1, Metric::kL2, 1);
  EXPECT_EQ(s.window_ids[0], 2u);
  EXPECT_EQ(s.query_window_id, 1u);
}

TEST(Query, MatchesBruteForceOracleExactly) {
  Rng rng(3);
  RandomIndex r = make_random_index(500, 6, rng);
  for (Metric metric : {Metric::kL2, Metric::kL1, Metric::kCosine}) {
    for (int q = 0; q < 20; ++q) {
      const auto view = random_vector(16, rng);
      const std::uint64_t patient = rng.below(6);
      std::vector<std::pair<double, std::uint64_t>> all;
      for (std::size_t i = 0; i < r.views.size(); ++i) {
        if (r.patients[i] != patient) all.emplace_back(oracle_distance(view, r.views[i], metric), 1000 + i);
      }
      std::sort(all.begin(), all.end());
      const ExemplarSet s = r.index.query(view, patient, 9, metric);
      ASSERT_EQ(s.size(), 9u);
      for (std::size_t j = 0; j < 9; ++j) {
        EXPECT_EQ(s.window_ids[j], all[j].second) << metric_name(metric);
        EXPECT_EQ(s.distances[j], all[j].first) << metric_name(metric);
        EXPECT_NE(s.patient_ids[j], patient);
        EXPECT_EQ(r.index.window_id(s.rows[j]), s.window_ids[j]);
      }
      EXPECT_TRUE(std::is_sorted(s.distances.begin(), s.distances.end()));
    }
  }
}

TEST(Query, TopKIsPrefixOfTopKPlusOne) {
  Rng rng(4);
  RandomIndex r = make_random_index(120, 4, rng);
  // Duplicate views force ties.
  for (std::size_t i = 0; i < 10; ++i) r.index.add(5000 + i, 3, r.views[i], std::vector<double>{0, 0, 0});
  for (int q = 0; q < 10; ++q) {
    const auto view = q % 2 ? r.views[q] : random_vector(16, rng);
    const ExemplarSet big = r.index.query(view, q % 3, 12, Metric::kL2);
    for (std::size_t k = 1; k < 12; ++k) {
      const ExemplarSet small = r.index.query(view, q % 3, k, Metric::kL2);
      EXPECT_TRUE(std::equal(small.window_ids.begin(), small.window_ids.end(), big.window_ids.begin()));
    }
  }
}

DatasetBundle ten_window_bundle() {
  SynthConfig sc;
  sc.n_patients = 2;
  sc.windows_per_patient = 5;
  sc.image_size = 16;
  sc.num_genes = 4;
  return generate(sc);
}

ExtractorConfig tiny_extractor() {
  ExtractorConfig c;
  c.image_size = 16;
  c.style_dim = 6;
  c.base_channels = 4;
  c.decoder_channels = 4;
  return c;
}

TEST(BuildIndex, OneEntryPerWindowWithEncodedViews) {
  const DatasetBundle bundle = ten_window_bundle();
  const Extractor ex(tiny_extractor(), 1);
  const Matrix targets = normalize_targets(bundle.raw_expression, fit_normalization(bundle.raw_expression));
  const ExemplarIndex index = build_index(bundle, ex, targets);
  ASSERT_EQ(index.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto e = ex.encode(bundle.image(i));
    ASSERT_TRUE(std::equal(e.begin(), e.end(), index.view(i).begin()));
    EXPECT_EQ(index.patient_id(i), bundle.windows[i].patient_id);
    for (std::size_t g = 0; g < 4; ++g) {
      EXPECT_GE(index.expression(i)[g], 0.0);
      EXPECT_LE(index.expression(i)[g], 1.0);
    }
  }
  EXPECT_THROW(build_index(bundle, ex, Matrix(9, 4)), DimensionError);
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(BuildIndex, RebuildIsByteIdenticalAndRoundTrips) {
  const DatasetBundle bundle = ten_window_bundle();
  const Matrix targets = normalize_targets(bundle.raw_expression, fit_normalization(bundle.raw_expression));
  const auto dir = std::filesystem::temp_directory_path();
  const auto a = dir / "egn_test_a.egni", b = dir / "egn_test_b.egni";
  build_index(bundle, Extractor(tiny_extractor(), 5), targets).save(a);
  build_index(bundle, Extractor(tiny_extractor(), 5), targets).save(b);
  const std::string bytes = read_bytes(a);
  EXPECT_EQ(bytes, read_bytes(b));
  EXPECT_EQ(bytes.substr(0, 4), "EGNI");
  EXPECT_EQ(bytes.size(), 4u + 4 + 3 * 8 + 10 * (16 + 8 * (6 + 4)));

  const ExemplarIndex loaded = ExemplarIndex::load(a);
  EXPECT_TRUE(loaded == build_index(bundle, Extractor(tiny_extractor(), 5), targets));

  std::ofstream(b, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW(ExemplarIndex::load(b), DataError);
  EXPECT_THROW(ExemplarIndex::load(dir / "egn_missing.egni"), ArtifactError);
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

}  // namespace
}  // namespace egn
