// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include "stq/table_file.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <system_error>
#include <unistd.h>

#include "stq/error.hpp"

namespace stq {
namespace {

constexpr char kMagic[8] = {'S', 'T', 'Q', 'T', 'A', 'B', 'L', 'E'};
constexpr std::uint32_t kPackingWords = 0;

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void count(std::size_t n) {
    if (n > std::numeric_limits<std::uint32_t>::max()) throw Error(ErrorCode::FormatError, "count exceeds u32");
    u32(static_cast<std::uint32_t>(n));
  }
  void str(std::string_view s) {
    count(s.size());
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void params(const QuantParams& p) {
    u8(static_cast<std::uint8_t>(p.granularity));
    u8(static_cast<std::uint8_t>(p.bits.bits()));
    count(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      f64(p.delta[i]);
      i32(p.zero[i]);
    }
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }
  std::span<const std::uint8_t> bytes() const { return out_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t count(std::size_t element_bytes) {
    const std::size_t n = u32();
    // Reject counts that could not fit in the remaining bytes before allocating.
    if (element_bytes > 0 && n > remaining() / element_bytes) fail("count exceeds remaining data");
    return n;
  }
  std::string str() {
    const std::size_t n = count(1);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  QuantParams params() {
    QuantParams p;
    const std::uint8_t g = u8();
    if (g > 1) fail("bad granularity");
    p.granularity = static_cast<Granularity>(g);
    p.bits = bit_width(u8());
    const std::size_t n = count(12);
    p.delta.resize(n);
    p.zero.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      p.delta[i] = f64();
      p.zero[i] = i32();
    }
    return p;
  }
  BitWidth bit_width(int bits) {
    if (bits < 2 || bits > 16) fail("bit width " + std::to_string(bits));
    return BitWidth(bits);
  }
  std::size_t remaining() const { return in_.size() - pos_; }
  [[noreturn]] static void fail(const std::string& what) { throw Error(ErrorCode::FormatError, what); }

 private:
  std::uint64_t get(int n) {
    if (remaining() < static_cast<std::size_t>(n)) fail("truncated table file");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - pos, std::numeric_limits<uInt>::max());
    crc = crc32(crc, bytes.data() + pos, static_cast<uInt>(chunk));
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_table(const TimeStepTable& table) {
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kTableFormatVersion);
  w.u32(kPackingWords);

  const QuantConfig& c = table.config();
  w.u8(static_cast<std::uint8_t>(c.w_bits.bits()));
  w.u8(static_cast<std::uint8_t>(c.a_bits.bits()));
  w.u8(static_cast<std::uint8_t>(c.smoothing));
  w.u32(static_cast<std::uint32_t>(c.ranges));
  w.f64(c.alpha);
  w.f64(c.momentum);

  w.u64(table.model().config_hash);
  w.str(table.model().description);

  const TimeRangePartition& part = table.partition();
  w.u32(static_cast<std::uint32_t>(part.total_steps()));
  w.count(part.size());
  for (const StepRange& r : part.ranges()) {
    w.u32(static_cast<std::uint32_t>(r.begin));
    w.u32(static_cast<std::uint32_t>(r.end));
  }

  w.count(table.layers().size());
  for (const LayerTable& l : table.layers()) {
    w.str(l.id);
    w.count(l.in_channels);
    w.count(l.out_channels);
    w.f64(l.scales.alpha());
    for (std::size_t r = 0; r < part.size(); ++r) {
      w.params(l.activation[r]);
      w.params(l.weight[r]);
      for (double s : l.scales.column(r)) w.f64(s);
      for (std::uint16_t v : l.weight_levels[r]) w.u16(v);
    }
  }
  const std::uint32_t crc = crc32_of(w.bytes());
  w.u32(crc);
  return w.take();
}

TimeStepTable decode_table(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kMagic + 12) throw Error(ErrorCode::FormatError, "table file too short");
  const auto body = bytes.first(bytes.size() - 4);
  Reader trailer(bytes.last(4));
  if (crc32_of(body) != trailer.u32()) throw Error(ErrorCode::ChecksumMismatch, "table checksum does not match");

  Reader in(body);
  for (char c : kMagic) {
    if (in.u8() != static_cast<std::uint8_t>(c)) Reader::fail("not a table file");
  }
  const std::uint32_t version = in.u32();
  if (version != kTableFormatVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "table format version " + std::to_string(version));
  }
  if (const std::uint32_t packing = in.u32(); packing != kPackingWords) {
    throw Error(ErrorCode::UnsupportedVersion, "weight packing " + std::to_string(packing));
  }

  QuantConfig config;
  config.w_bits = in.bit_width(in.u8());
  config.a_bits = in.bit_width(in.u8());
  const std::uint8_t smoothing = in.u8();
  if (smoothing > 2) Reader::fail("bad smoothing mode");
  config.smoothing = static_cast<Smoothing>(smoothing);
  config.ranges = static_cast<int>(in.u32());
  config.alpha = in.f64();
  config.momentum = in.f64();

  ModelSignature model;
  model.config_hash = in.u64();
  model.description = in.str();

  const int total_steps = static_cast<int>(in.u32());
  std::vector<StepRange> ranges(in.count(8));
  for (StepRange& r : ranges) {
    r.begin = static_cast<int>(in.u32());
    r.end = static_cast<int>(in.u32());
  }
  TimeRangePartition partition(total_steps, std::move(ranges));

  std::vector<LayerTable> layers(in.count(1));
  for (LayerTable& l : layers) {
    l.id = in.str();
    l.in_channels = in.u32();
    l.out_channels = in.u32();
    const double alpha = in.f64();
    if (l.in_channels == 0 || l.out_channels == 0) Reader::fail("empty layer shape");
    std::vector<std::vector<double>> columns;
    for (std::size_t r = 0; r < partition.size(); ++r) {
      l.activation.push_back(in.params());
      l.weight.push_back(in.params());
      std::vector<double> s(l.in_channels);
      if (in.remaining() / 8 < s.size()) Reader::fail("truncated scales");
      for (double& v : s) v = in.f64();
      columns.push_back(std::move(s));
      const std::size_t n = l.in_channels * l.out_channels;
      if (in.remaining() / 2 < n) Reader::fail("truncated weight payload");
      std::vector<std::uint16_t> levels(n);
      for (std::uint16_t& v : levels) v = in.u16();
      l.weight_levels.push_back(std::move(levels));
    }
    l.scales = SmoothScale(alpha, std::move(columns));
  }
  if (in.remaining() != 0) Reader::fail("trailing bytes after layer records");
  return TimeStepTable(config, std::move(partition), std::move(model), std::move(layers));
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ignored;
      std::filesystem::remove(tmp, ignored);
      throw Error(ErrorCode::IoError, "cannot write " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorCode::IoError, "cannot move " + tmp.string() + " to " + path.string());
  }
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void save_table(const TimeStepTable& table, const std::filesystem::path& path) {
  write_file_atomic(path, encode_table(table));
}

TimeStepTable load_table(const std::filesystem::path& path) { return decode_table(read_file(path)); }

}  // namespace stq
