#include <gtest/gtest.h>
#include <png.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include "egn/dataset.hpp"
#include "egn/error.hpp"
#include "probe.hpp"

namespace egn {
namespace {

namespace fs = std::filesystem;

double skewness(const Matrix& x, std::size_t col) {
  double mean = 0.0;
  for (std::size_t r = 0; r < x.rows; ++r) mean += x(r, col);
  mean /= static_cast<double>(x.rows);
  double m2 = 0.0, m3 = 0.0;
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double d = x(r, col) - mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= static_cast<double>(x.rows);
  m3 /= static_cast<double>(x.rows);
  return m3 / std::pow(m2, 1.5);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TEST(Generate, SameSeedGivesByteIdenticalBundles) {
  SynthConfig c;
  c.n_patients = 3;
  c.windows_per_patient = 10;
  const fs::path a = fresh_dir("egn_synth_a"), b = fresh_dir("egn_synth_b");
  save_bundle(generate(c), a);
  save_bundle(generate(c), b);
  EXPECT_EQ(read_bytes(a / "manifest.json"), read_bytes(b / "manifest.json"));
  EXPECT_EQ(read_bytes(a / "bundle.egnd"), read_bytes(b / "bundle.egnd"));
  c.seed += 1;
  EXPECT_NE(generate(c).raw_expression, generate(SynthConfig{.n_patients = 3, .windows_per_patient = 10}).raw_expression);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Generate, ShapesRangesAndPatientIntegrity) {
  const SynthConfig c;
  const DatasetBundle b = generate(c);
  EXPECT_NO_THROW(b.validate());
  EXPECT_EQ(b.size(), 360u);
  EXPECT_EQ(b.num_genes(), 16u);
  EXPECT_EQ(b.patients().size(), 6u);
  for (double px : b.images) {
    ASSERT_GE(px, 0.0);
    ASSERT_LE(px, 1.0);
  }
  for (double v : b.raw_expression.values) ASSERT_GE(v, 0.0);
  std::map<std::uint64_t, std::uint64_t> owner;
  for (const auto& w : b.windows) {
    auto [it, fresh] = owner.emplace(w.slide_id, w.patient_id);
    EXPECT_EQ(it->second, w.patient_id);
  }
  for (const auto& m : b.generation->motifs) {
    EXPECT_FALSE(m.genes.empty());
    for (double w : m.weights) EXPECT_GE(w, 0.0);
  }
}

TEST(Generate, RejectsInvalidConfigListingEveryProblem) {
  SynthConfig c;
  c.n_patients = 0;
  c.skew_fraction = 1.5;
  try {
    generate(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("n_patients"), std::string::npos);
    EXPECT_NE(msg.find("skew_fraction"), std::string::npos);
  }
}

TEST(Generate, SkewFractionControlsLongTails) {
  SynthConfig c;
  c.num_genes = 20;
  c.skew_fraction = 0.0;
  const DatasetBundle flat = generate(c);
  for (std::size_t g = 0; g < c.num_genes; ++g) EXPECT_LT(std::abs(skewness(flat.raw_expression, g)), 2.0) << g;

  c.skew_fraction = 0.5;
  const DatasetBundle skewed = generate(c);
  std::size_t heavy = 0;
  for (std::size_t g = 0; g < c.num_genes; ++g) heavy += skewness(skewed.raw_expression, g) > 2.0;
  EXPECT_GE(static_cast<double>(heavy), 0.4 * static_cast<double>(c.num_genes));
}

TEST(Generate, WindowsWithoutMotifsCarryOnlyNoise) {
  SynthConfig c;
  c.windows_per_patient = 120;
  const DatasetBundle b = generate(c);
  const auto& info = *b.generation;
  const auto& trace = *b.trace;
  std::size_t empty_windows = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    bool empty = true;
    for (double n : trace.motif_counts.row(i)) empty = empty && n == 0.0;
    if (!empty) continue;
    ++empty_windows;
    for (std::size_t g = 0; g < b.num_genes(); ++g) {
      const double noise = trace.noise(i, g);
      const bool skewed = std::count(info.skewed_genes.begin(), info.skewed_genes.end(), g) > 0;
      const double expected = skewed ? std::expm1(info.skew_gain * noise * noise) : noise;
      EXPECT_EQ(b.raw_expression(i, g), expected);
    }
  }
  EXPECT_GT(empty_windows, 0u);
}

TEST(Generate, NoiseIsLognormalAroundTheFloor) {
  const DatasetBundle b = generate(SynthConfig{});
  const auto& info = *b.generation;
  double sum = 0.0, sq = 0.0;
  for (double n : b.trace->noise.values) {
    const double l = std::log(n / info.noise_floor);
    sum += l;
    sq += l * l;
  }
  const double count = static_cast<double>(b.trace->noise.values.size());
  const double mean = sum / count;
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(std::sqrt(sq / count - mean * mean), info.noise_sigma, 0.02);
}

// Mean colour carries some of the planted signal, so a linear probe on it must
// beat chance on held-out patients.
TEST(Generate, MeanColourProbeBeatsChance) {
  const DatasetBundle b = generate(SynthConfig{});
  const std::size_t s2 = b.image_size * b.image_size;
  Matrix colours(b.size(), 3);
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto img = b.image(i);
    for (std::size_t c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (std::size_t p = 0; p < s2; ++p) acc += img[c * s2 + p];
      colours(i, c) = acc / static_cast<double>(s2);
    }
  }
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < b.size(); ++i) (b.windows[i].patient_id < 4 ? train : test).push_back(i);
  Matrix logged = b.raw_expression;
  for (double& v : logged.values) v = std::log1p(v);
  EXPECT_GT(testing::ridge_probe_pcc(colours, logged, train, test), 0.0);
}

TEST(Bundle, SaveLoadRoundTrip) {
  SynthConfig c;
  c.n_patients = 2;
  c.windows_per_patient = 7;
  const DatasetBundle b = generate(c);
  const fs::path dir = fresh_dir("egn_synth_rt");
  const fs::path manifest = save_bundle(b, dir);
  EXPECT_TRUE(manifest_has_blob(manifest));
  const DatasetBundle loaded = load_bundle(manifest);
  EXPECT_EQ(loaded.images, b.images);
  EXPECT_EQ(loaded.raw_expression, b.raw_expression);
  EXPECT_EQ(loaded.gene_names, b.gene_names);
  ASSERT_EQ(loaded.size(), b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(loaded.windows[i].id, b.windows[i].id);
    EXPECT_EQ(loaded.windows[i].slide_id, b.windows[i].slide_id);
  }
  EXPECT_EQ(loaded.generation->skewed_genes, b.generation->skewed_genes);
  ASSERT_EQ(loaded.generation->tissues.size(), b.generation->tissues.size());
  for (std::size_t k = 0; k < b.generation->tissues.size(); ++k) {
    EXPECT_EQ(loaded.generation->tissues[k].rate_scale, b.generation->tissues[k].rate_scale);
    EXPECT_EQ(loaded.generation->tissues[k].background, b.generation->tissues[k].background);
  }
  EXPECT_FALSE(loaded.trace.has_value());

  const std::string blob = read_bytes(dir / "bundle.egnd");
  EXPECT_EQ(blob.substr(0, 4), "EGND");
  EXPECT_EQ(blob.size(), 4u + 4 + 4 * 8 + 8 * (b.images.size() + b.raw_expression.values.size()));
  std::ofstream(dir / "bundle.egnd", std::ios::binary | std::ios::trunc) << blob.substr(0, 100);
  EXPECT_THROW(load_bundle(manifest), DataError);
  EXPECT_THROW(load_bundle(dir / "absent.json"), ArtifactError);
  fs::remove_all(dir);
}

TEST(Bundle, ValidateRejectsSlideSharedAcrossPatients) {
  SynthConfig c;
  c.n_patients = 2;
  c.windows_per_patient = 2;
  DatasetBundle b = generate(c);
  b.windows[3].slide_id = b.windows[0].slide_id;
  EXPECT_THROW(b.validate(), DataError);
}

// ---------------------------------------------------------------------------
// External ingestion
// ---------------------------------------------------------------------------

void write_png(const fs::path& path, std::size_t w, std::size_t h, unsigned char r, unsigned char g, unsigned char b) {
  std::vector<unsigned char> rgb(w * h * 3);
  for (std::size_t i = 0; i < w * h; ++i) {
    rgb[3 * i] = r;
    rgb[3 * i + 1] = g;
    rgb[3 * i + 2] = b;
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  ASSERT_TRUE(png_image_write_to_file(&image, path.string().c_str(), 0, rgb.data(), 0, nullptr)) << image.message;
}

struct ExternalFixture {
  fs::path dir;
  fs::path manifest;
};

ExternalFixture write_external(const std::string& name, const std::string& table) {
  ExternalFixture f;
  f.dir = fresh_dir(name);
  write_png(f.dir / "w0.png", 20, 20, 255, 0, 0);
  write_png(f.dir / "w1.png", 12, 12, 0, 0, 255);
  std::ofstream(f.dir / "expr.csv") << table;
  f.manifest = f.dir / "manifest.json";
  std::ofstream(f.manifest) << R"({
  "genes": ["A", "B", "C", "D", "E"],
  "expression": "expr.csv",
  "patients": [
    {"id": 1, "slides": [{"id": 10, "windows": [{"id": 100, "image": "w0.png", "expression_row": 0}]}]},
    {"id": 2, "slides": [{"id": 20, "windows": [{"id": 200, "image": "w1.png", "expression_row": 1}]}]}
  ]
})";
  return f;
}

TEST(Ingest, TwoWindowManifestKeepsHighestMeanGenes) {
  // Column means are [3, 1, 4, 1, 5].
  const ExternalFixture f = write_external("egn_ingest_ok", "2,1,3,0,4\n4,1,5,2,6\n");
  const DatasetBundle b = ingest_external(f.manifest, 2, 8);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b.gene_names, (std::vector<std::string>{"C", "E"}));
  EXPECT_EQ(b.raw_expression(0, 0), 3.0);
  EXPECT_EQ(b.raw_expression(1, 1), 6.0);
  EXPECT_EQ(b.windows[1].patient_id, 2u);
  EXPECT_EQ(b.windows[1].slide_id, 20u);
  EXPECT_EQ(b.image_size, 8u);
  // Uniform colour survives resampling exactly.
  const auto red = b.image(0), blue = b.image(1);
  EXPECT_EQ(red[0], 1.0);
  EXPECT_EQ(red[64], 0.0);
  EXPECT_EQ(blue[2 * 64 + 5], 1.0);
  fs::remove_all(f.dir);
}

TEST(Ingest, SelectTopGenesByMean) {
  Matrix m(1, 5);
  m.values = {3, 1, 4, 1, 5};
  EXPECT_EQ(select_top_genes(m, 2), (std::vector<std::size_t>{2, 4}));
  EXPECT_THROW(select_top_genes(m, 6), DataError);
}

TEST(Ingest, ShortRowCitesLineNumber) {
  const ExternalFixture f = write_external("egn_ingest_short", "2,1,3,0,4\n4,1,5,2\n");
  try {
    ingest_external(f.manifest, 2, 8);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("expr.csv:2"), std::string::npos) << e.what();
  }
  fs::remove_all(f.dir);
}

TEST(Ingest, NegativeValueAndMissingFilesAreDataErrors) {
  ExternalFixture f = write_external("egn_ingest_neg", "2,1,3,0,4\n4,-1,5,2,6\n");
  EXPECT_THROW(ingest_external(f.manifest, 2, 8), DataError);
  std::ofstream(f.dir / "expr.csv", std::ios::trunc) << "2,1,3,0,4\n";
  try {
    ingest_external(f.manifest, 2, 8);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("window 200"), std::string::npos) << e.what();
  }
  std::ofstream(f.dir / "expr.csv", std::ios::trunc) << "2,1,3,0,4\n4,1,5,2,6\n";
  fs::remove(f.dir / "w0.png");
  try {
    ingest_external(f.manifest, 2, 8);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("window 100"), std::string::npos) << e.what();
  }
  fs::remove_all(f.dir);
}

TEST(Generate, TissueContextScalesMotifRatesAndTintsBackground) {
  SynthConfig c;
  c.seed = 12;
  c.n_patients = 6;
  c.windows_per_patient = 200;
  const DatasetBundle b = generate(c);
  const GenerationInfo& info = *b.generation;
  const GenerationTrace& trace = *b.trace;
  const std::size_t contexts = info.tissues.size(), motifs = info.motifs.size();
  ASSERT_GE(contexts, 2u);
  std::vector<double> windows(contexts, 0.0);
  std::vector<std::vector<double>> counts(contexts, std::vector<double>(motifs, 0.0));
  for (std::size_t i = 0; i < b.size(); ++i) {
    const std::size_t k = trace.tissue[i];
    ASSERT_LT(k, contexts);
    windows[k] += 1.0;
    for (std::size_t t = 0; t < motifs; ++t) counts[k][t] += trace.motif_counts(i, t);
  }
  // Per-context mean counts match rate * scale within a few Poisson standard errors.
  for (std::size_t k = 0; k < contexts; ++k) {
    ASSERT_GT(windows[k], 50.0);
    for (std::size_t t = 0; t < motifs; ++t) {
      const double expected = info.motifs[t].rate * info.tissues[k].rate_scale[t];
      EXPECT_NEAR(counts[k][t] / windows[k], expected, 5.0 * std::sqrt(expected / windows[k]) + 1e-9)
          << "context " << k << " motif " << t;
    }
  }
  // Each context owns its background: contexts differ in at least one channel.
  for (std::size_t a = 0; a < contexts; ++a) {
    for (std::size_t z = a + 1; z < contexts; ++z) EXPECT_NE(info.tissues[a].background, info.tissues[z].background);
  }
}

}  // namespace
}  // namespace egn
