#include <cmath>
#include <set>

#include "bytes.hpp"
#include "dmq/errors.hpp"
#include "dmq/pipeline.hpp"

namespace dmq::pipeline {

namespace {

constexpr char kMagic[4] = {'D', 'M', 'Q', '1'};
constexpr std::uint8_t kFlagActSigned = 1;

bool valid_bits(int b) {
  return b == kPassthroughBits || (b >= quant::kMinBits && b <= quant::kMaxBits);
}

// Bytes used by one layer's weight payload.
std::size_t weight_bytes(int bits_w, std::size_t count) {
  if (bits_w == kPassthroughBits) return 4 * count;
  if (bits_w <= 4) return (count + 1) / 2;
  if (bits_w <= 8) return count;
  return 2 * count;
}

void check_layer(const ModelLayer& l, const QuantizedModel& m) {
  const auto fail = [&](const std::string& what) { throw DimensionError("layer '" + l.name + "': " + what); };
  if (l.name.empty() || l.name.size() > 0xFFFF) fail("name must be 1..65535 bytes");
  if (l.in_channels == 0 || l.out_channels == 0) fail("empty layer");
  if (l.act_divisors.size() != l.in_channels || l.delta.size() != l.in_channels) fail("per-channel vectors must match C_in");
  const Shape shape{l.in_channels, l.out_channels};
  if (m.bits_w == kPassthroughBits) {
    if (l.weight.shape() != shape) fail("pass-through weight has the wrong shape");
  } else {
    if (l.weight_codes.shape() != shape) fail("weight codes have the wrong shape");
    if (l.weight_scales.size() != l.out_channels) fail("one weight scale per output channel required");
  }
  for (int d : l.delta)
    if (d < 0 || d > 255) fail("exponent out of range");
}

}  // namespace

const ModelLayer& QuantizedModel::layer(std::string_view name) const {
  for (const auto& l : layers)
    if (l.name == name) return l;
  throw InputError("model has no layer '" + std::string(name) + "'");
}

std::vector<std::uint8_t> pack_int4(std::span<const std::int64_t> codes) {
  std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto c = codes[i];
    if (c < -8 || c > 7) throw IntegrityError("pack_int4: code " + std::to_string(c) + " does not fit in 4 bits");
    const auto nib = static_cast<std::uint8_t>(c & 0xF);
    out[i / 2] |= static_cast<std::uint8_t>(i % 2 == 0 ? nib : nib << 4);
  }
  return out;
}

std::vector<std::int64_t> unpack_int4(std::span<const std::uint8_t> bytes, std::size_t count) {
  if (bytes.size() < (count + 1) / 2) throw DimensionError("unpack_int4: not enough bytes");
  std::vector<std::int64_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int nib = (i % 2 == 0 ? bytes[i / 2] : bytes[i / 2] >> 4) & 0xF;
    out[i] = nib >= 8 ? nib - 16 : nib;
  }
  return out;
}

std::vector<std::uint8_t> export_model(const QuantizedModel& m) {
  if (!valid_bits(m.bits_w) || !valid_bits(m.bits_a)) throw DomainError("export_model: unsupported bit widths");
  detail::ByteWriter w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kModelVersion);
  w.u8(static_cast<std::uint8_t>(m.bits_w));
  w.u8(static_cast<std::uint8_t>(m.bits_a));
  w.u8(m.act_signed ? kFlagActSigned : 0);
  w.u32(static_cast<std::uint32_t>(m.layers.size()));
  for (const auto& l : m.layers) {
    check_layer(l, m);
    w.u16(static_cast<std::uint16_t>(l.name.size()));
    w.str(l.name);
    w.u32(static_cast<std::uint32_t>(l.in_channels));
    w.u32(static_cast<std::uint32_t>(l.out_channels));
    w.f64(l.act_scale);
    if (m.bits_w != kPassthroughBits)
      for (double s : l.weight_scales) w.f64(s);
    for (double d : l.act_divisors) w.f64(d);
    for (int d : l.delta) w.u8(static_cast<std::uint8_t>(d));
    if (m.bits_w == kPassthroughBits) {
      for (double v : l.weight.data()) w.f32(static_cast<float>(v));
    } else if (m.bits_w <= 4) {
      w.bytes(pack_int4(l.weight_codes.data()));
    } else if (m.bits_w <= 8) {
      for (auto c : l.weight_codes.data()) w.i8(static_cast<std::int8_t>(c));
    } else {
      for (auto c : l.weight_codes.data()) w.i16(static_cast<std::int16_t>(c));
    }
  }
  return w.take();
}

QuantizedModel import_model(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.set_context("model header");
  const auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) r.fail("bad magic, expected DMQ1", 0);
  const auto version = r.u16();
  if (version != kModelVersion)
    throw UnsupportedVersionError("unsupported model file version " + std::to_string(version) + " (expected " +
                                      std::to_string(kModelVersion) + ")",
                                  4);
  QuantizedModel m;
  m.bits_w = r.u8();
  m.bits_a = r.u8();
  if (!valid_bits(m.bits_w) || !valid_bits(m.bits_a)) r.fail("unsupported bit widths", 6);
  const auto flags = r.u8();
  if (flags & ~kFlagActSigned) r.fail("unknown flag bits", 8);
  m.act_signed = (flags & kFlagActSigned) != 0;
  const auto count = r.u32();

  std::set<std::string> seen;
  for (std::uint32_t li = 0; li < count; ++li) {
    r.set_context("layer record " + std::to_string(li));
    ModelLayer l;
    const auto name_at = r.pos();
    l.name = r.str(r.u16());
    if (l.name.empty()) r.fail("empty layer name", name_at);
    if (!seen.insert(l.name).second) r.fail("duplicate layer name '" + l.name + "'", name_at);
    r.set_context("layer '" + l.name + "'");
    l.in_channels = r.u32();
    l.out_channels = r.u32();
    if (l.in_channels == 0 || l.out_channels == 0) r.fail("empty layer");
    const std::size_t cells = l.in_channels * l.out_channels;
    const std::size_t need = 8 + (m.bits_w == kPassthroughBits ? 0 : 8 * l.out_channels) + 9 * l.in_channels +
                             weight_bytes(m.bits_w, cells);
    if (need > r.remaining())
      r.fail("truncated: layer needs " + std::to_string(need) + " bytes, " + std::to_string(r.remaining()) + " left");

    auto positive = [&](double v, const char* what) {
      if (!(v > 0.0) || !std::isfinite(v)) r.fail(std::string(what) + " must be positive and finite", r.pos() - 8);
      return v;
    };
    l.act_scale = positive(r.f64(), "activation scale");
    if (m.bits_w != kPassthroughBits)
      for (std::size_t j = 0; j < l.out_channels; ++j) l.weight_scales.push_back(positive(r.f64(), "weight scale"));
    for (std::size_t k = 0; k < l.in_channels; ++k) l.act_divisors.push_back(positive(r.f64(), "activation divisor"));
    for (std::size_t k = 0; k < l.in_channels; ++k) {
      const int d = r.u8();
      if (m.bits_w != kPassthroughBits && m.bits_w + d > igemm::kShiftedWeightBits)
        r.fail("exponent " + std::to_string(d) + " overflows the shifted weight width", r.pos() - 1);
      l.delta.push_back(d);
    }
    const Shape shape{l.in_channels, l.out_channels};
    if (m.bits_w == kPassthroughBits) {
      std::vector<double> v(cells);
      for (auto& x : v) {
        x = r.f32();
        if (!std::isfinite(x)) r.fail("non-finite weight", r.pos() - 4);
      }
      l.weight = Tensor(shape, std::move(v));
    } else {
      std::vector<std::int64_t> codes;
      const auto payload_at = r.pos();
      if (m.bits_w <= 4) {
        codes = unpack_int4(r.bytes((cells + 1) / 2), cells);
      } else {
        codes.resize(cells);
        for (auto& c : codes) c = m.bits_w <= 8 ? r.i8() : r.i16();
      }
      const auto lo = signed_min(m.bits_w), hi = signed_max(m.bits_w);
      for (std::size_t i = 0; i < cells; ++i)
        if (codes[i] < lo || codes[i] > hi)
          r.fail("weight code " + std::to_string(codes[i]) + " outside the " + std::to_string(m.bits_w) + "-bit range",
                 payload_at + weight_bytes(m.bits_w, i + 1) - 1);
      l.weight_codes = IntTensor(shape, std::move(codes), m.bits_w);
    }
    m.layers.push_back(std::move(l));
  }
  r.set_context("model trailer");
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " unexpected trailing bytes");
  return m;
}

void save_model(const QuantizedModel& model, const std::filesystem::path& path) {
  detail::write_file(path.string(), export_model(model));
}

QuantizedModel load_model(const std::filesystem::path& path) {
  return import_model(detail::read_file(path.string()));
}

}  // namespace dmq::pipeline
