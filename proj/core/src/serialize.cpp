#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "fedser/params.hpp"

namespace fedser {

namespace {

constexpr char kMagic[4] = {'F', 'S', 'P', 'M'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<char*>(b), 8);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_params(const std::string& path, const ParamSet<float>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_params: cannot open " + path);

  out.write(kMagic, 4);
  write_u32(out, kVersion);
  write_u64(out, params.fingerprint());
  write_u32(out, static_cast<std::uint32_t>(params.num_classes()));
  write_u32(out, static_cast<std::uint32_t>(params.size()));

  for (const auto& e : params.entries()) {
    write_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    out.put(e.decay ? 1 : 0);
    write_u32(out, static_cast<std::uint32_t>(e.value.rank()));
    for (int d : e.value.dims()) write_u32(out, static_cast<std::uint32_t>(d));
  }
  static_assert(sizeof(float) == 4);
  for (const auto& e : params.entries())
    out.write(reinterpret_cast<const char*>(e.value.data()),
              static_cast<std::streamsize>(e.value.numel() * 4));
  if (!out) throw std::runtime_error("save_params: write failed: " + path);
}

ParamSet<float> load_params(const std::string& path, std::uint64_t expected_fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_params: cannot open " + path);

  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_params: not a ParamSet file: " + path);
  const std::uint32_t version = read_u32(in);
  if (version != kVersion)
    throw std::runtime_error("load_params: unsupported version " + std::to_string(version));
  const std::uint64_t header_fp = read_u64(in);
  const auto num_classes = static_cast<int>(read_u32(in));
  const auto layer_count = read_u32(in);
  if (!in || layer_count > 100000) throw std::runtime_error("load_params: corrupt header in " + path);

  if (expected_fingerprint != 0 && header_fp != expected_fingerprint)
    throw std::runtime_error("load_params: architecture fingerprint mismatch in " + path);

  ParamSet<float> params(num_classes);
  std::vector<std::int64_t> sizes;
  for (std::uint32_t l = 0; l < layer_count; ++l) {
    const std::uint32_t name_len = read_u32(in);
    if (!in || name_len > 4096) throw std::runtime_error("load_params: corrupt layer table in " + path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const bool decay = in.get() == 1;
    const std::uint32_t rank = read_u32(in);
    if (!in || rank < 1 || rank > 4)
      throw std::runtime_error("load_params: corrupt layer rank in " + path);
    std::vector<int> dims(rank);
    for (auto& d : dims) d = static_cast<int>(read_u32(in));
    Tensor<float> t(dims);
    sizes.push_back(t.numel());
    params.add(std::move(name), std::move(t), decay);
  }
  for (std::size_t l = 0; l < params.size(); ++l) {
    auto& t = params.entries()[l].value;
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(sizes[l] * 4));
  }
  if (!in) throw std::runtime_error("load_params: truncated payload in " + path);

  if (params.fingerprint() != header_fp)
    throw std::runtime_error("load_params: fingerprint does not match layer table in " + path);
  return params;
}

}  // namespace fedser
