#include <algorithm>
#include <fstream>
#include <iterator>

#include "bytes.hpp"
#include "dmq/errors.hpp"
#include "dmq/toydiff.hpp"

namespace dmq {

namespace detail {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error while reading '" + path + "'");
  return data;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error while writing '" + path + "'");
}

}  // namespace detail

namespace toydiff {

namespace {
constexpr char kMagic[4] = {'D', 'M', 'Q', 'C'};
}

std::vector<std::uint8_t> encode_checkpoint(const ToyDenoiser& model) {
  detail::ByteWriter w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kCheckpointVersion);
  const auto& tensors = model.tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  std::vector<std::size_t> offset_slots;
  for (const auto& [name, t] : tensors) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.str(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    offset_slots.push_back(w.size());
    w.u64(0);
  }
  std::size_t i = 0;
  for (const auto& [name, t] : tensors) {
    w.patch_u64(offset_slots[i++], w.size());
    for (double v : t.data()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

ToyDenoiser decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.set_context("checkpoint header");
  const auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) r.fail("bad magic, expected DMQC", 0);
  const auto version = r.u16();
  if (version != kCheckpointVersion)
    throw UnsupportedVersionError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto count = r.u32();

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  for (std::uint32_t e = 0; e < count; ++e) {
    r.set_context("checkpoint table entry " + std::to_string(e));
    Entry en;
    en.name = r.str(r.u16());
    const auto rank = r.u8();
    for (int d = 0; d < rank; ++d) en.shape.push_back(r.u32());
    en.offset = r.u64();
    entries.push_back(std::move(en));
  }
  std::map<std::string, Tensor> tensors;
  for (const auto& en : entries) {
    r.set_context("checkpoint tensor '" + en.name + "'");
    r.seek(static_cast<std::size_t>(en.offset));
    std::vector<double> data(shape_size(en.shape));
    for (double& v : data) v = static_cast<double>(r.f32());
    if (!tensors.emplace(en.name, Tensor(en.shape, std::move(data))).second) r.fail("duplicate tensor name");
  }
  return ToyDenoiser(std::move(tensors));
}

void save_checkpoint(const ToyDenoiser& model, const std::filesystem::path& path) {
  detail::write_file(path.string(), encode_checkpoint(model));
}

ToyDenoiser load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path.string()));
}

}  // namespace toydiff
}  // namespace dmq
