#include "egn/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "egn/checkpoint.hpp"
#include "egn/error.hpp"
#include "json.hpp"

namespace egn {

using nlohmann::ordered_json;

namespace {

constexpr std::uint32_t kBundleVersion = 1;
constexpr const char* kBlobName = "bundle.egnd";

ordered_json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot open " + path.string());
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

ordered_json motif_to_json(const MotifSpec& m) {
  return ordered_json{{"shape", m.shape},   {"color", m.color}, {"radius", m.radius},
                      {"rate", m.rate},     {"genes", m.genes}, {"weights", m.weights}};
}

MotifSpec motif_from_json(const ordered_json& j) {
  MotifSpec m;
  m.shape = j.at("shape").get<std::string>();
  m.color = j.at("color").get<std::array<double, 3>>();
  m.radius = j.at("radius").get<double>();
  m.rate = j.at("rate").get<double>();
  m.genes = j.at("genes").get<std::vector<std::size_t>>();
  m.weights = j.at("weights").get<std::vector<double>>();
  return m;
}

// Walks the patients -> slides -> windows hierarchy in manifest order.
template <typename Fn>
void for_each_window(const ordered_json& manifest, Fn&& fn) {
  for (const auto& patient : manifest.at("patients")) {
    const auto pid = patient.at("id").get<std::uint64_t>();
    for (const auto& slide : patient.at("slides")) {
      const auto sid = slide.at("id").get<std::uint64_t>();
      for (const auto& window : slide.at("windows")) fn(pid, sid, window);
    }
  }
}

ordered_json manifest_hierarchy(const DatasetBundle& bundle, bool blob_offsets) {
  // Patients and slides in first-appearance order.
  ordered_json patients = ordered_json::array();
  std::map<std::uint64_t, std::size_t> patient_pos;
  std::map<std::pair<std::uint64_t, std::uint64_t>, std::size_t> slide_pos;
  for (std::size_t i = 0; i < bundle.size(); ++i) {
    const auto& w = bundle.windows[i];
    if (!patient_pos.contains(w.patient_id)) {
      patient_pos[w.patient_id] = patients.size();
      patients.push_back(ordered_json{{"id", w.patient_id}, {"slides", ordered_json::array()}});
    }
    auto& slides = patients[patient_pos[w.patient_id]]["slides"];
    const auto key = std::make_pair(w.patient_id, w.slide_id);
    if (!slide_pos.contains(key)) {
      slide_pos[key] = slides.size();
      slides.push_back(ordered_json{{"id", w.slide_id}, {"windows", ordered_json::array()}});
    }
    ordered_json entry{{"id", w.id}};
    if (blob_offsets) entry["image"] = i;
    entry["expression_row"] = i;
    slides[slide_pos[key]]["windows"].push_back(std::move(entry));
  }
  return patients;
}

// Bilinear resample of an interleaved RGB byte image into planar [0,1] doubles.
void resample_rgb(const std::vector<unsigned char>& rgb, std::size_t width, std::size_t height, std::size_t size,
                  double* out) {
  for (std::size_t y = 0; y < size; ++y) {
    const double sy = std::clamp((static_cast<double>(y) + 0.5) * static_cast<double>(height) / size - 0.5, 0.0,
                                 static_cast<double>(height - 1));
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const double sx = std::clamp((static_cast<double>(x) + 0.5) * static_cast<double>(width) / size - 0.5, 0.0,
                                   static_cast<double>(width - 1));
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        auto px = [&](std::size_t yy, std::size_t xx) { return rgb[(yy * width + xx) * 3 + c] / 255.0; };
        const double top = px(y0, x0) * (1 - fx) + px(y0, x1) * fx;
        const double bottom = px(y1, x0) * (1 - fx) + px(y1, x1) * fx;
        out[(c * size + y) * size + x] = top * (1 - fy) + bottom * fy;
      }
    }
  }
}

std::vector<unsigned char> read_png_rgb(const std::filesystem::path& path, std::size_t& width,
                                        std::size_t& height) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw DataError("cannot read window image " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("cannot decode window image " + path.string() + ": " + image.message);
  }
  width = image.width;
  height = image.height;
  return buffer;
}

}  // namespace

std::span<const double> DatasetBundle::image(std::size_t index) const {
  if (index >= size()) throw DataError("window index " + std::to_string(index) + " out of range");
  return {images.data() + index * pixels_per_window(), pixels_per_window()};
}

std::vector<std::uint64_t> DatasetBundle::patients() const {
  std::set<std::uint64_t> ids;
  for (const auto& w : windows) ids.insert(w.patient_id);
  return {ids.begin(), ids.end()};
}

void DatasetBundle::validate() const {
  if (raw_expression.rows != windows.size()) {
    throw DataError("bundle has " + std::to_string(windows.size()) + " windows but " +
                    std::to_string(raw_expression.rows) + " expression rows");
  }
  if (images.size() != windows.size() * pixels_per_window()) throw DataError("bundle image buffer has wrong size");
  if (gene_names.size() != raw_expression.cols) throw DataError("gene name count does not match expression columns");
  std::map<std::uint64_t, std::uint64_t> slide_owner;
  std::set<std::uint64_t> ids;
  for (const auto& w : windows) {
    if (!ids.insert(w.id).second) throw DataError("duplicate window id " + std::to_string(w.id));
    auto [it, fresh] = slide_owner.emplace(w.slide_id, w.patient_id);
    if (!fresh && it->second != w.patient_id) {
      throw DataError("slide " + std::to_string(w.slide_id) + " belongs to more than one patient");
    }
  }
  for (std::size_t r = 0; r < raw_expression.rows; ++r) {
    for (std::size_t c = 0; c < raw_expression.cols; ++c) {
      const double v = raw_expression(r, c);
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw DataError("window " + std::to_string(windows[r].id) + " gene " + std::to_string(c) +
                        ": expression must be finite and nonnegative");
      }
    }
  }
}

std::filesystem::path save_bundle(const DatasetBundle& bundle, const std::filesystem::path& directory) {
  bundle.validate();
  std::filesystem::create_directories(directory);
  ordered_json manifest;
  manifest["format"] = "egn-bundle";
  manifest["blob"] = kBlobName;
  manifest["image_size"] = bundle.image_size;
  manifest["genes"] = bundle.gene_names;
  manifest["patients"] = manifest_hierarchy(bundle, true);
  if (bundle.generation) {
    const auto& g = *bundle.generation;
    ordered_json motifs = ordered_json::array();
    for (const auto& m : g.motifs) motifs.push_back(motif_to_json(m));
    manifest["generation"] = ordered_json{{"seed", g.seed},
                                          {"skew_fraction", g.skew_fraction},
                                          {"noise_floor", g.noise_floor},
                                          {"noise_sigma", g.noise_sigma},
                                          {"skew_gain", g.skew_gain},
                                          {"skewed_genes", g.skewed_genes},
                                          {"motifs", motifs}};
    ordered_json tissues = ordered_json::array();
    for (const auto& t : g.tissues) {
      tissues.push_back(ordered_json{{"background", t.background}, {"texture", t.texture}, {"rate_scale", t.rate_scale}});
    }
    manifest["generation"]["tissues"] = tissues;
  }
  const auto manifest_path = directory / "manifest.json";
  {
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + manifest_path.string());
    out << manifest.dump(2) << '\n';
  }
  std::ofstream blob(directory / kBlobName, std::ios::binary | std::ios::trunc);
  if (!blob) throw ArtifactError("cannot write " + (directory / kBlobName).string());
  BinaryWriter w(blob);
  w.magic("EGND");
  w.u32(kBundleVersion);
  w.u64(bundle.size());
  w.u64(bundle.num_genes());
  w.u64(bundle.image_size);
  w.u64(bundle.image_size);
  w.f64s(bundle.images);
  w.f64s(bundle.raw_expression.values);
  return manifest_path;
}

bool manifest_has_blob(const std::filesystem::path& manifest_path) {
  return read_json(manifest_path).contains("blob");
}

DatasetBundle load_bundle(const std::filesystem::path& manifest_path) {
  const ordered_json manifest = read_json(manifest_path);
  if (!manifest.contains("blob")) {
    throw DataError(manifest_path.string() + ": not an EGND-backed bundle (use external ingestion)");
  }
  const auto blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open bundle blob " + blob_path.string());
  BinaryReader r(in, blob_path.string());
  r.expect_magic("EGND");
  const auto version = r.u32();
  if (version != kBundleVersion) throw DataError(blob_path.string() + ": unsupported version");
  const auto n = r.u64(), m = r.u64(), h = r.u64(), w = r.u64();
  if (h != w) throw DataError(blob_path.string() + ": only square windows are supported");
  std::vector<double> images(n * 3 * h * w);
  r.f64s(images);
  Matrix expression(n, m);
  r.f64s(expression.values);

  DatasetBundle bundle;
  bundle.image_size = h;
  bundle.gene_names = manifest.at("genes").get<std::vector<std::string>>();
  bundle.images.assign(n * 3 * h * w, 0.0);
  bundle.raw_expression = Matrix(n, m);
  bundle.windows.resize(n);
  // A window's blob offset is its bundle index, so save/load keeps row order.
  std::vector<bool> seen(n, false);
  std::size_t listed = 0;
  const std::size_t ppw = 3 * h * w;
  for_each_window(manifest, [&](std::uint64_t pid, std::uint64_t sid, const ordered_json& win) {
    const auto i = win.at("image").get<std::size_t>();
    const auto row = win.at("expression_row").get<std::size_t>();
    if (i >= n || row >= n) {
      throw DataError(manifest_path.string() + ": window " + win.at("id").dump() + " references missing data");
    }
    if (seen[i]) throw DataError(manifest_path.string() + ": window " + win.at("id").dump() + " reuses a blob slot");
    seen[i] = true;
    ++listed;
    bundle.windows[i] = {win.at("id").get<std::uint64_t>(), pid, sid};
    std::copy_n(images.begin() + static_cast<std::ptrdiff_t>(i * ppw), ppw,
                bundle.images.begin() + static_cast<std::ptrdiff_t>(i * ppw));
    std::copy_n(expression.row(row).begin(), m, bundle.raw_expression.row(i).begin());
  });
  if (listed != n) {
    throw DataError(manifest_path.string() + ": manifest lists " + std::to_string(listed) + " windows, blob holds " +
                    std::to_string(n));
  }
  if (manifest.contains("generation")) {
    const auto& g = manifest.at("generation");
    GenerationInfo info;
    info.seed = g.at("seed").get<std::uint64_t>();
    info.skew_fraction = g.at("skew_fraction").get<double>();
    info.noise_floor = g.at("noise_floor").get<double>();
    info.noise_sigma = g.at("noise_sigma").get<double>();
    info.skew_gain = g.at("skew_gain").get<double>();
    info.skewed_genes = g.at("skewed_genes").get<std::vector<std::size_t>>();
    for (const auto& m : g.at("motifs")) info.motifs.push_back(motif_from_json(m));
    if (g.contains("tissues")) {
      for (const auto& t : g.at("tissues")) {
        info.tissues.push_back(TissueSpec{t.at("background").get<std::array<double, 3>>(), t.at("texture").get<double>(),
                                          t.at("rate_scale").get<std::vector<double>>()});
      }
    }
    bundle.generation = std::move(info);
  }
  bundle.validate();
  return bundle;
}

std::vector<std::size_t> select_top_genes(const Matrix& expression, std::size_t count) {
  if (count > expression.cols) {
    throw DataError("requested " + std::to_string(count) + " genes but the table has " +
                    std::to_string(expression.cols));
  }
  std::vector<double> means(expression.cols, 0.0);
  for (std::size_t r = 0; r < expression.rows; ++r) {
    for (std::size_t c = 0; c < expression.cols; ++c) means[c] += expression(r, c);
  }
  std::vector<std::size_t> order(expression.cols);
  for (std::size_t c = 0; c < order.size(); ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return means[a] > means[b]; });
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

DatasetBundle ingest_external(const std::filesystem::path& manifest_path, std::size_t num_genes,
                              std::size_t image_size) {
  const ordered_json manifest = read_json(manifest_path);
  const auto root = manifest_path.parent_path();
  const auto genes = manifest.at("genes").get<std::vector<std::string>>();
  const auto table_path = root / manifest.at("expression").get<std::string>();

  // Expression table: one CSV line per row, one value per gene, no header.
  std::ifstream table(table_path);
  if (!table) throw DataError("cannot open expression table " + table_path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(table, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> values;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw DataError(table_path.string() + ":" + std::to_string(line_no) + ": non-numeric value '" + cell + "'");
      }
    }
    if (values.size() != genes.size()) {
      throw DataError(table_path.string() + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(genes.size()) + " values, found " + std::to_string(values.size()));
    }
    for (double v : values) {
      if (!(v >= 0.0)) {
        throw DataError(table_path.string() + ":" + std::to_string(line_no) + ": negative expression value");
      }
    }
    rows.push_back(std::move(values));
  }

  DatasetBundle bundle;
  bundle.image_size = image_size;
  std::vector<std::size_t> row_of_window;
  for_each_window(manifest, [&](std::uint64_t pid, std::uint64_t sid, const ordered_json& win) {
    const auto id = win.at("id").get<std::uint64_t>();
    const auto row = win.at("expression_row").get<std::size_t>();
    if (row >= rows.size()) {
      throw DataError("window " + std::to_string(id) + ": expression_row " + std::to_string(row) +
                      " exceeds table row count " + std::to_string(rows.size()));
    }
    const auto image_path = root / win.at("image").get<std::string>();
    if (!std::filesystem::exists(image_path)) {
      throw DataError("window " + std::to_string(id) + ": missing image file " + image_path.string());
    }
    std::size_t w = 0, h = 0;
    const auto rgb = read_png_rgb(image_path, w, h);
    const std::size_t offset = bundle.images.size();
    bundle.images.resize(offset + 3 * image_size * image_size);
    resample_rgb(rgb, w, h, image_size, bundle.images.data() + offset);
    bundle.windows.push_back({id, pid, sid});
    row_of_window.push_back(row);
  });

  Matrix full(bundle.windows.size(), genes.size());
  for (std::size_t i = 0; i < row_of_window.size(); ++i) {
    std::copy(rows[row_of_window[i]].begin(), rows[row_of_window[i]].end(), full.row(i).begin());
  }
  const auto keep = select_top_genes(full, num_genes);
  bundle.raw_expression = Matrix(full.rows, keep.size());
  for (std::size_t r = 0; r < full.rows; ++r) {
    for (std::size_t c = 0; c < keep.size(); ++c) bundle.raw_expression(r, c) = full(r, keep[c]);
  }
  for (std::size_t c : keep) bundle.gene_names.push_back(genes[c]);
  bundle.validate();
  return bundle;
}

}  // namespace egn
