#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "egn/dataset.hpp"
#include "egn/error.hpp"
#include "egn/rng.hpp"

namespace egn {

namespace {

constexpr std::size_t kMotifTypes = 4;

// Stain-like palettes, one per motif type.
constexpr std::array<std::array<double, 3>, kMotifTypes> kMotifColors = {{
    {0.30, 0.12, 0.50},
    {0.15, 0.32, 0.78},
    {0.80, 0.14, 0.20},
    {0.42, 0.30, 0.08},
}};
constexpr std::array<const char*, kMotifTypes> kMotifShapes = {"disc", "square", "ring", "cross"};
constexpr std::array<double, kMotifTypes> kMotifRadius = {3.0, 2.5, 3.5, 3.0};
constexpr std::array<double, kMotifTypes> kMotifRates = {1.6, 1.3, 1.1, 0.8};

// Tissue contexts. Each window belongs to one; the context tints and textures
// the background and scales every motif's rate, so windows of one context
// share both appearance and expected expression across patients.
constexpr std::size_t kTissueTypes = 3;
constexpr std::array<std::array<double, 3>, kTissueTypes> kTissueBackground = {{
    {0.86, 0.64, 0.78},
    {0.74, 0.50, 0.72},
    {0.93, 0.82, 0.80},
}};
constexpr std::array<double, kTissueTypes> kTissueTexture = {0.03, 0.07, 0.012};
constexpr std::array<std::array<double, kMotifTypes>, kTissueTypes> kTissueRateScale = {{
    {1.0, 1.0, 1.0, 1.0},
    {2.2, 0.4, 1.7, 0.5},
    {0.3, 1.8, 0.4, 1.9},
}};

bool inside(const std::string& shape, double dx, double dy, double radius) {
  const double r2 = dx * dx + dy * dy;
  if (shape == "disc") return r2 <= radius * radius;
  if (shape == "square") return std::abs(dx) <= radius && std::abs(dy) <= radius;
  if (shape == "ring") {
    const double inner = radius - 1.4;
    return r2 <= radius * radius && r2 >= inner * inner;
  }
  // cross
  return (std::abs(dx) <= 0.9 && std::abs(dy) <= radius) || (std::abs(dy) <= 0.9 && std::abs(dx) <= radius);
}

void validate_config(const SynthConfig& c) {
  std::vector<std::string> errors;
  if (c.n_patients == 0) errors.push_back("n_patients must be positive");
  if (c.windows_per_patient == 0) errors.push_back("windows_per_patient must be positive");
  if (c.num_genes == 0) errors.push_back("num_genes must be positive");
  if (c.image_size < 8) errors.push_back("image_size must be at least 8");
  if (c.slides_per_patient == 0) errors.push_back("slides_per_patient must be positive");
  if (!(c.skew_fraction >= 0.0 && c.skew_fraction <= 1.0)) errors.push_back("skew_fraction must lie in [0,1]");
  if (!errors.empty()) {
    std::string msg = "invalid synthetic data config:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

}  // namespace

double planted_expression(const GenerationInfo& info, std::size_t gene, std::span<const double> motif_counts,
                          double noise) {
  double base = noise;
  for (std::size_t t = 0; t < info.motifs.size(); ++t) {
    const auto& m = info.motifs[t];
    for (std::size_t i = 0; i < m.genes.size(); ++i) {
      if (m.genes[i] == gene) base += motif_counts[t] * m.weights[i];
    }
  }
  const bool skewed = std::find(info.skewed_genes.begin(), info.skewed_genes.end(), gene) != info.skewed_genes.end();
  return skewed ? std::expm1(info.skew_gain * base * base) : base;
}

DatasetBundle generate(const SynthConfig& config) {
  validate_config(config);
  Rng rng(config.seed);
  const std::size_t m = config.num_genes;
  const std::size_t s = config.image_size;

  GenerationInfo info;
  info.seed = config.seed;
  info.skew_fraction = config.skew_fraction;
  info.noise_floor = 0.5;
  info.noise_sigma = 0.25;
  info.skew_gain = 0.1;
  info.motifs.resize(kMotifTypes);
  for (std::size_t t = 0; t < kMotifTypes; ++t) {
    auto& motif = info.motifs[t];
    motif.shape = kMotifShapes[t];
    motif.color = kMotifColors[t];
    motif.radius = kMotifRadius[t] * static_cast<double>(s) / 32.0;
    motif.rate = kMotifRates[t];
  }
  // Primary driver for every gene, plus an occasional weaker secondary one.
  for (std::size_t g = 0; g < m; ++g) {
    const std::size_t primary = g % kMotifTypes;
    info.motifs[primary].genes.push_back(g);
    info.motifs[primary].weights.push_back(rng.uniform(0.6, 1.4));
    if (rng.uniform() < 0.4) {
      const std::size_t secondary = (primary + 1 + rng.below(kMotifTypes - 1)) % kMotifTypes;
      info.motifs[secondary].genes.push_back(g);
      info.motifs[secondary].weights.push_back(rng.uniform(0.2, 0.6));
    }
  }
  for (std::size_t k = 0; k < kTissueTypes; ++k) {
    info.tissues.push_back(TissueSpec{kTissueBackground[k], kTissueTexture[k],
                                      std::vector<double>(kTissueRateScale[k].begin(), kTissueRateScale[k].end())});
  }
  for (std::size_t t = 0; t < kMotifTypes; ++t) {
    if (info.motifs[t].genes.empty()) {
      info.motifs[t].genes.push_back(t % m);
      info.motifs[t].weights.push_back(rng.uniform(0.6, 1.4));
    }
  }
  {
    std::vector<std::size_t> order(m);
    for (std::size_t g = 0; g < m; ++g) order[g] = g;
    rng.shuffle(std::span<std::size_t>(order));
    const auto n_skewed = static_cast<std::size_t>(std::lround(config.skew_fraction * static_cast<double>(m)));
    info.skewed_genes.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_skewed));
    std::sort(info.skewed_genes.begin(), info.skewed_genes.end());
  }

  const std::size_t n = config.n_patients * config.windows_per_patient;
  DatasetBundle bundle;
  bundle.image_size = s;
  for (std::size_t g = 0; g < m; ++g) bundle.gene_names.push_back("GENE" + std::to_string(g));
  bundle.windows.reserve(n);
  bundle.images.assign(n * 3 * s * s, 0.0);
  bundle.raw_expression = Matrix(n, m);
  GenerationTrace trace{Matrix(n, kMotifTypes), Matrix(n, m), std::vector<std::size_t>(n)};

  std::size_t index = 0;
  for (std::size_t p = 0; p < config.n_patients; ++p) {
    // Patient batch effect: a colour cast over the whole slide.
    std::array<double, 3> cast{};
    for (double& c : cast) c = rng.uniform(-0.05, 0.05);
    // Patient-specific mixture over tissue contexts.
    std::array<double, kTissueTypes> mixture{};
    double mixture_total = 0.0;
    for (double& v : mixture) mixture_total += v = rng.uniform(0.2, 1.0);
    for (std::size_t w = 0; w < config.windows_per_patient; ++w, ++index) {
      WindowRecord rec;
      rec.id = index;
      rec.patient_id = p;
      rec.slide_id = p * config.slides_per_patient + w % config.slides_per_patient;
      bundle.windows.push_back(rec);

      std::size_t tissue = 0;
      for (double u = rng.uniform() * mixture_total; tissue + 1 < kTissueTypes && u >= mixture[tissue]; ++tissue) {
        u -= mixture[tissue];
      }
      trace.tissue[index] = tissue;
      const TissueSpec& context = info.tissues[tissue];

      double* img = bundle.images.data() + index * 3 * s * s;
      const std::array<double, 3> base = {context.background[0] + cast[0], context.background[1] + cast[1],
                                          context.background[2] + cast[2]};
      std::array<double, 6> wave{};
      for (std::size_t k = 0; k < 3; ++k) {
        wave[2 * k] = rng.uniform(0.1, 0.5);
        wave[2 * k + 1] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const double fx = static_cast<double>(x), fy = static_cast<double>(y);
          const double texture = context.texture * (std::sin(wave[0] * fx + wave[1]) + std::sin(wave[2] * fy + wave[3]) +
                                                    0.7 * std::sin(wave[4] * (fx + fy) + wave[5]));
          for (std::size_t c = 0; c < 3; ++c) {
            img[(c * s + y) * s + x] = base[c] + texture + 0.02 * rng.normal();
          }
        }
      }
      // Motifs at uniform random positions.
      for (std::size_t t = 0; t < kMotifTypes; ++t) {
        const auto& motif = info.motifs[t];
        const std::uint64_t count = rng.poisson(motif.rate * context.rate_scale[t]);
        trace.motif_counts(index, t) = static_cast<double>(count);
        for (std::uint64_t k = 0; k < count; ++k) {
          const double cx = rng.uniform(0.0, static_cast<double>(s));
          const double cy = rng.uniform(0.0, static_cast<double>(s));
          const double shade = rng.uniform(0.9, 1.1);
          for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
              if (!inside(motif.shape, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy,
                          motif.radius)) {
                continue;
              }
              for (std::size_t c = 0; c < 3; ++c) {
                img[(c * s + y) * s + x] = motif.color[c] * shade + cast[c];
              }
            }
          }
        }
      }
      for (std::size_t px = 0; px < 3 * s * s; ++px) img[px] = std::clamp(img[px], 0.0, 1.0);

      for (std::size_t g = 0; g < m; ++g) {
        const double noise = info.noise_floor * std::exp(info.noise_sigma * rng.normal());
        trace.noise(index, g) = noise;
        bundle.raw_expression(index, g) = planted_expression(info, g, trace.motif_counts.row(index), noise);
      }
    }
  }
  bundle.generation = std::move(info);
  bundle.trace = std::move(trace);
  return bundle;
}

}  // namespace egn
