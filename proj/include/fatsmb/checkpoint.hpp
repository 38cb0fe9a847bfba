#pragma once

// Checkpoint = directory holding `manifest.txt` (key=value metadata) and
// `params.bin`. Blob layout, all integers little-endian:
//
//   char[8]  magic "FATSMBCK"
//   u32      format version (1)
//   u32      tensor count
//   per tensor:
//     u32    name length, then the name bytes (no terminator)
//     u32    rows
//     u32    cols
//     f64    rows*cols values, row-major, IEEE-754 little-endian

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fatsmb/config.hpp"
#include "fatsmb/nn.hpp"

namespace fatsmb::ckpt {

inline constexpr char kMagic[8] = {'F', 'A', 'T', 'S', 'M', 'B', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Tensor {
  std::string name;
  Matrix value;
};

namespace detail {
inline void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw LoadError("checkpoint blob truncated");
  return v;
}
}  // namespace detail

inline void write_blob(std::ostream& out, const nn::ParamList& params) {
  out.write(kMagic, 8);
  detail::put_u32(out, kVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Matrix& m = p.var.value();
    detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
}

inline std::vector<Tensor> read_blob(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw LoadError("not a checkpoint blob (bad magic)");
  const auto version = detail::get_u32(in);
  if (version != kVersion) throw LoadError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_u32(in);
  std::vector<Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    t.name.resize(detail::get_u32(in));
    if (!in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()))) throw LoadError("checkpoint blob truncated");
    const auto rows = detail::get_u32(in), cols = detail::get_u32(in);
    t.value.resize(rows, cols);
    if (!in.read(reinterpret_cast<char*>(t.value.data()), static_cast<std::streamsize>(t.value.size() * sizeof(double))))
      throw LoadError("checkpoint blob truncated in tensor " + t.name);
    out.push_back(std::move(t));
  }
  return out;
}

// Copies stored tensors into `params`, verifying that every parameter is
// present with the expected shape.
inline void assign(const std::vector<Tensor>& tensors, const nn::ParamList& params) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw LoadError("checkpoint is missing tensor " + p.name);
    const Matrix& src = it->second->value;
    Matrix& dst = p.var.ptr()->value;
    if (src.rows() != dst.rows() || src.cols() != dst.cols())
      throw LoadError("shape mismatch for " + p.name + ": stored " + std::to_string(src.rows()) + "x" +
                      std::to_string(src.cols()) + ", expected " + std::to_string(dst.rows()) + "x" +
                      std::to_string(dst.cols()));
    dst = src;
  }
}

inline std::string manifest_path(const std::string& dir) { return (std::filesystem::path(dir) / "manifest.txt").string(); }
inline std::string blob_path(const std::string& dir) { return (std::filesystem::path(dir) / "params.bin").string(); }

inline void save(const std::string& dir, const KeyValues& manifest, const nn::ParamList& params) {
  std::filesystem::create_directories(dir);
  manifest.save(manifest_path(dir));
  std::ofstream out(blob_path(dir), std::ios::binary);
  if (!out) throw Error("cannot write " + blob_path(dir));
  write_blob(out, params);
}

inline KeyValues load_manifest(const std::string& dir) {
  if (!std::filesystem::exists(manifest_path(dir))) throw LoadError("no checkpoint manifest in " + dir);
  return KeyValues::load(manifest_path(dir));
}

inline std::vector<Tensor> load_tensors(const std::string& dir) {
  std::ifstream in(blob_path(dir), std::ios::binary);
  if (!in) throw LoadError("cannot open " + blob_path(dir));
  return read_blob(in);
}

}  // namespace fatsmb::ckpt
