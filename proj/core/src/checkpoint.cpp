#include "egn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "egn/error.hpp"

namespace egn {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void BinaryWriter::magic(std::string_view tag) { out_.write(tag.data(), static_cast<std::streamsize>(tag.size())); }

void BinaryWriter::u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }

void BinaryWriter::u64(std::uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }

void BinaryWriter::f64(double v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }

void BinaryWriter::f64s(std::span<const double> values) {
  out_.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

void BinaryWriter::bytes(std::string_view s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

void BinaryReader::read(char* dst, std::size_t n) {
  in_.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) throw DataError(source_ + ": unexpected end of file");
}

void BinaryReader::expect_magic(std::string_view tag) {
  std::string got(tag.size(), '\0');
  read(got.data(), got.size());
  if (got != tag) throw DataError(source_ + ": bad magic (expected " + std::string(tag) + ")");
}

std::uint32_t BinaryReader::u32() {
  std::uint32_t v = 0;
  read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::uint64_t BinaryReader::u64() {
  std::uint64_t v = 0;
  read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

double BinaryReader::f64() {
  double v = 0;
  read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void BinaryReader::f64s(std::span<double> values) { read(reinterpret_cast<char*>(values.data()), values.size_bytes()); }

std::string BinaryReader::bytes(std::size_t n) {
  std::string s(n, '\0');
  read(s.data(), n);
  return s;
}

bool BinaryReader::at_end() { return in_.peek() == std::char_traits<char>::eof(); }

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot open " + path.string() + " for writing");
  BinaryWriter w(out);
  w.magic(checkpoint.magic);
  w.u32(checkpoint.version);
  w.u64(checkpoint.config_json.size());
  w.bytes(checkpoint.config_json);
  for (const auto& [name, tensor] : checkpoint.tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) w.u64(d);
    w.f64s(tensor.data());
  }
  if (!out) throw ArtifactError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path, std::string_view expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open checkpoint " + path.string());
  BinaryReader r(in, path.string());
  Checkpoint c;
  r.expect_magic(expected_magic);
  c.magic = std::string(expected_magic);
  c.version = r.u32();
  if (c.version != 1) throw DataError(path.string() + ": unsupported version " + std::to_string(c.version));
  c.config_json = r.bytes(r.u64());
  while (!r.at_end()) {
    NamedTensor t;
    t.name = r.bytes(r.u32());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    std::vector<double> values(shape_numel(shape));
    r.f64s(values);
    t.tensor = Tensor::from(std::move(shape), std::move(values));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void load_parameters(const Checkpoint& checkpoint, std::vector<NamedTensor>& params) {
  if (checkpoint.tensors.size() != params.size()) {
    throw DataError("checkpoint holds " + std::to_string(checkpoint.tensors.size()) + " tensors, model expects " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = checkpoint.tensors[i];
    auto& dst = params[i];
    if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
      throw DataError("checkpoint tensor " + src.name + " " + shape_string(src.tensor.shape()) +
                      " does not match parameter " + dst.name + " " + shape_string(dst.tensor.shape()));
    }
    auto out = dst.tensor.mutable_data();
    std::copy(src.tensor.data().begin(), src.tensor.data().end(), out.begin());
  }
}

}  // namespace egn
