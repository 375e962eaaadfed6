#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "egn/gradcheck.hpp"

namespace egn {

// Little-endian primitive IO shared by every binary artifact.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}
  void magic(std::string_view tag);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> values);
  void bytes(std::string_view s);

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  BinaryReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}
  void expect_magic(std::string_view tag);
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  void f64s(std::span<double> values);
  std::string bytes(std::size_t n);
  bool at_end();
  const std::string& source() const { return source_; }

 private:
  void read(char* dst, std::size_t n);
  std::istream& in_;
  std::string source_;
};

// Container shared by the extractor ("EGNX") and model ("EGNM") checkpoints:
//   magic[4] | version u32 | config length u64 | config JSON bytes |
//   repeated { name length u32 | name | rank u32 | dims u64... | f64 values }
// until end of file.
struct Checkpoint {
  std::string magic;
  std::uint32_t version = 1;
  std::string config_json;
  std::vector<NamedTensor> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path, std::string_view expected_magic);

/// Copies checkpoint tensors into same-named parameters, checking shapes.
void load_parameters(const Checkpoint& checkpoint, std::vector<NamedTensor>& params);

}  // namespace egn
