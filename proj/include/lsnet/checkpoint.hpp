#pragma once

// Binary checkpoint, little-endian throughout:
//
//   "LSNT"  u32 version  u32 config_len  config text  u64 step  u32 count
//   count × { u32 name_len  name  u32 dims[4]  f32 data[numel] }
//
// Entry names carry a prefix: "param/", "buffer/" (batch-norm statistics),
// "adam.m/" and "adam.v/" (optional optimizer moments).

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include "lsnet/adam.hpp"
#include "lsnet/config.hpp"
#include "lsnet/image_io.hpp"
#include "lsnet/model.hpp"

namespace lsnet {

inline constexpr char kCheckpointMagic[4] = {'L', 'S', 'N', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  LSNetParams<float> params;
  std::uint64_t step = 0;
  std::optional<AdamState<float>> adam;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    if (!(a.params == b.params) || a.step != b.step || a.adam.has_value() != b.adam.has_value()) return false;
    return !a.adam || (a.adam->step == b.adam->step && a.adam->m == b.adam->m && a.adam->v == b.adam->v);
  }
};

namespace ckpt_detail {

template <class U>
void put(std::ostream& os, U v) {
  std::array<char, sizeof(U)> b;
  std::memcpy(b.data(), &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  os.write(b.data(), sizeof(U));
}

template <class U>
U get(std::istream& is) {
  std::array<char, sizeof(U)> b;
  if (!is.read(b.data(), sizeof(U))) throw DataError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  U v;
  std::memcpy(&v, b.data(), sizeof(U));
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::uint32_t limit) {
  const auto n = get<std::uint32_t>(is);
  if (n > limit) throw DataError("checkpoint string length " + std::to_string(n) + " is implausible");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw DataError("checkpoint truncated");
  return s;
}

inline void put_tensor(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  put_string(os, name);
  for (std::size_t d = 0; d < 4; ++d) put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape()[d]));
  for (float v : t.data()) put<float>(os, v);
}

}  // namespace ckpt_detail

inline void save_checkpoint(std::ostream& os, const Checkpoint& ck) {
  using namespace ckpt_detail;
  const auto& p = ck.params;
  os.write(kCheckpointMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put_string(os, model_config_text(p.config));
  put<std::uint64_t>(os, ck.step);
  std::size_t count = p.tensors.size() + p.buffers.size();
  if (ck.adam) count += 2 * p.tensors.size();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(count));
  for (std::size_t i = 0; i < p.tensors.size(); ++i) put_tensor(os, "param/" + p.names[i], p.tensors[i]);
  for (std::size_t i = 0; i < p.buffers.size(); ++i) put_tensor(os, "buffer/" + p.buffer_names[i], p.buffers[i]);
  if (ck.adam) {
    require_shape(ck.adam->m.size() == p.tensors.size(), "checkpoint: optimizer state does not match parameters");
    for (std::size_t i = 0; i < p.tensors.size(); ++i) put_tensor(os, "adam.m/" + p.names[i], ck.adam->m[i]);
    for (std::size_t i = 0; i < p.tensors.size(); ++i) put_tensor(os, "adam.v/" + p.names[i], ck.adam->v[i]);
  }
  if (!os) throw DataError("checkpoint write failed");
}

/// Reads a checkpoint and checks every entry against the layout its config
/// implies: same names, same order, same shapes.
inline Checkpoint load_checkpoint(std::istream& is, AdamHyper hyper = {}) {
  using namespace ckpt_detail;
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError("not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  LSNetConfig cfg;
  try {
    cfg = parse_model_config(get_string(is, 1u << 16));
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
  Checkpoint ck;
  ck.params = init_params<float>(cfg, 0);
  ck.step = get<std::uint64_t>(is);
  const auto count = get<std::uint32_t>(is);
  auto& p = ck.params;
  const std::size_t base = p.tensors.size() + p.buffers.size();
  if (count != base && count != base + 2 * p.tensors.size())
    throw DataError("checkpoint holds " + std::to_string(count) + " tensors, config implies " + std::to_string(base));

  auto read_into = [&](const std::string& expect, Tensor<float>& t) {
    const std::string name = get_string(is, 1u << 12);
    if (name != expect) throw DataError("checkpoint entry '" + name + "' where '" + expect + "' was expected");
    std::array<std::size_t, 4> dims{};
    for (auto& d : dims) d = get<std::uint32_t>(is);
    const Shape s(dims[0], dims[1], dims[2], dims[3]);
    if (!(s == t.shape())) throw DataError("checkpoint entry '" + name + "' has shape " + s.str() + ", expected " + t.shape().str());
    for (auto& v : t.data()) v = get<float>(is);
  };
  for (std::size_t i = 0; i < p.tensors.size(); ++i) read_into("param/" + p.names[i], p.tensors[i]);
  for (std::size_t i = 0; i < p.buffers.size(); ++i) read_into("buffer/" + p.buffer_names[i], p.buffers[i]);
  if (count > base) {
    AdamState<float> st(hyper, std::span<const Tensor<float>>(p.tensors));
    st.step = ck.step;
    for (std::size_t i = 0; i < p.tensors.size(); ++i) read_into("adam.m/" + p.names[i], st.m[i]);
    for (std::size_t i = 0; i < p.tensors.size(); ++i) read_into("adam.v/" + p.names[i], st.v[i]);
    ck.adam = std::move(st);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("checkpoint has trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  save_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, AdamHyper hyper = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  try {
    return load_checkpoint(is, hyper);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace lsnet
