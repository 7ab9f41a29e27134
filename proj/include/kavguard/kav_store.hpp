/*
 * Copyright 2026 The kavguard Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// KAV datasets and their on-disk forms.
//
// Binary layout (little-endian):
//
//   offset  size  field
//   0       4     magic "KAVF"
//   4       2     version (u16, = 1)
//   6       2     flags (u16, bit 0 = has_logits)
//   8       4     dim (u32)
//   12      4     num_classes (u32)
//   16      8     count (u64)
//   24      ...   count records: label i32, [num_classes x f32 logits], dim x f32 kav
//
// The text helpers at the bottom (format_real, parse_real, CSV splitting)
// are shared by every other file writer in the library.

#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "kavguard/error.hpp"

namespace kavguard {

using ClassId = std::int32_t;
inline constexpr ClassId kUnlabeled = -1;

inline constexpr std::array<char, 4> kKavMagic = {'K', 'A', 'V', 'F'};
inline constexpr std::uint16_t kKavVersion = 1;
inline constexpr std::uint16_t kFlagHasLogits = 0x1;
inline constexpr std::size_t kKavHeaderBytes = 24;

struct KavHeader {
  std::uint32_t dim = 0;
  std::uint32_t num_classes = 0;
  bool has_logits = false;
  std::uint64_t count = 0;

  std::uint64_t record_bytes() const {
    return 4 + (has_logits ? 4ull * num_classes : 0) + 4ull * dim;
  }
  bool operator==(const KavHeader&) const = default;
};

/// Exact size of a binary KAV file for the given header.
inline std::uint64_t kav_file_size(const KavHeader& h) {
  return kKavHeaderBytes + h.count * h.record_bytes();
}

struct KavRecord {
  std::uint64_t record_index = 0;
  ClassId label = kUnlabeled;
  std::optional<std::vector<float>> logits;
  std::vector<float> kav;

  bool operator==(const KavRecord&) const = default;
};

namespace detail {

inline void check_record(const KavRecord& r, std::uint32_t dim, std::uint32_t num_classes,
                         bool has_logits) {
  const auto where = " (record " + std::to_string(r.record_index) + ")";
  if (r.kav.size() != dim) {
    throw FormatError("kav length " + std::to_string(r.kav.size()) + " != dim " +
                      std::to_string(dim) + where);
  }
  if (r.logits.has_value() != has_logits) {
    throw FormatError(std::string(has_logits ? "missing logits" : "unexpected logits") + where);
  }
  if (r.logits && r.logits->size() != num_classes) {
    throw FormatError("logits length " + std::to_string(r.logits->size()) +
                      " != num_classes " + std::to_string(num_classes) + where);
  }
  if (r.label != kUnlabeled &&
      (r.label < 0 || static_cast<std::uint32_t>(r.label) >= num_classes)) {
    throw FormatError("label " + std::to_string(r.label) + " outside [0, " +
                      std::to_string(num_classes) + ")" + where);
  }
}

}  // namespace detail

/// In-memory dataset. dim, num_classes and has_logits are fixed at
/// construction; record indices are assigned in insertion order.
class KavDataset {
 public:
  KavDataset(std::uint32_t dim, std::uint32_t num_classes, bool has_logits)
      : dim_(dim), num_classes_(num_classes), has_logits_(has_logits) {
    if (dim == 0) throw FormatError("dim must be positive");
    if (num_classes == 0) throw FormatError("num_classes must be positive");
  }

  std::uint32_t dim() const { return dim_; }
  std::uint32_t num_classes() const { return num_classes_; }
  bool has_logits() const { return has_logits_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::span<const KavRecord> records() const { return records_; }
  const KavRecord& operator[](std::size_t i) const { return records_[i]; }

  KavHeader header() const { return {dim_, num_classes_, has_logits_, records_.size()}; }

  /// Appends a record, overwriting its record_index with its position.
  const KavRecord& push_back(KavRecord record) {
    record.record_index = records_.size();
    detail::check_record(record, dim_, num_classes_, has_logits_);
    records_.push_back(std::move(record));
    return records_.back();
  }

  const KavRecord& push_back(ClassId label, std::vector<float> kav,
                             std::optional<std::vector<float>> logits = std::nullopt) {
    return push_back(KavRecord{0, label, std::move(logits), std::move(kav)});
  }

  void reserve(std::size_t n) { records_.reserve(n); }

  bool operator==(const KavDataset&) const = default;

 private:
  std::uint32_t dim_;
  std::uint32_t num_classes_;
  bool has_logits_;
  std::vector<KavRecord> records_;
};

// ---------------------------------------------------------------------------
// Binary encoding

namespace detail {

template <typename T>
void put_le(std::string& buf, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
}

inline void put_f32(std::string& buf, float f) { put_le(buf, std::bit_cast<std::uint32_t>(f)); }

template <typename T>
T get_le(const unsigned char* p) {
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(p[i]) << (8 * i);
  return static_cast<T>(u);
}

inline float get_f32(const unsigned char* p) {
  return std::bit_cast<float>(get_le<std::uint32_t>(p));
}

inline std::string encode_header(const KavHeader& h) {
  std::string buf(kKavMagic.begin(), kKavMagic.end());
  put_le<std::uint16_t>(buf, kKavVersion);
  put_le<std::uint16_t>(buf, h.has_logits ? kFlagHasLogits : 0);
  put_le<std::uint32_t>(buf, h.dim);
  put_le<std::uint32_t>(buf, h.num_classes);
  put_le<std::uint64_t>(buf, h.count);
  return buf;
}

inline void encode_record(std::string& buf, const KavRecord& r) {
  put_le<std::int32_t>(buf, r.label);
  if (r.logits) {
    for (float v : *r.logits) put_f32(buf, v);
  }
  for (float v : r.kav) put_f32(buf, v);
}

}  // namespace detail

/// Writes the binary form of `dataset`. Returns the number of bytes written.
inline std::uint64_t write_kav(const KavDataset& dataset, std::ostream& out) {
  const KavHeader h = dataset.header();
  std::string buf = detail::encode_header(h);
  std::uint64_t written = 0;
  for (const auto& r : dataset.records()) {
    detail::check_record(r, h.dim, h.num_classes, h.has_logits);
    detail::encode_record(buf, r);
    if (buf.size() >= (1u << 20)) {
      out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      written += buf.size();
      buf.clear();
    }
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  written += buf.size();
  out.flush();
  if (!out) throw IoError("failed writing KAV stream");
  return written;
}

/// Streaming reader. The header is parsed and validated on construction;
/// records are decoded one at a time by next().
class KavReader {
 public:
  explicit KavReader(std::istream& in) : in_(&in) {
    std::array<unsigned char, kKavHeaderBytes> raw{};
    const auto got = read_some(raw.data(), raw.size());
    if (got < 4 || std::memcmp(raw.data(), kKavMagic.data(), 4) != 0) {
      throw FormatError("bad magic at byte offset 0");
    }
    if (got < raw.size()) {
      throw FormatError("truncated header at byte offset " + std::to_string(got));
    }
    const auto version = detail::get_le<std::uint16_t>(raw.data() + 4);
    if (version != kKavVersion) {
      throw FormatError("unsupported version " + std::to_string(version) + " at byte offset 4");
    }
    const auto flags = detail::get_le<std::uint16_t>(raw.data() + 6);
    if ((flags & ~kFlagHasLogits) != 0) {
      throw FormatError("unknown flag bits at byte offset 6");
    }
    header_.has_logits = (flags & kFlagHasLogits) != 0;
    header_.dim = detail::get_le<std::uint32_t>(raw.data() + 8);
    header_.num_classes = detail::get_le<std::uint32_t>(raw.data() + 12);
    header_.count = detail::get_le<std::uint64_t>(raw.data() + 16);
    if (header_.dim == 0) throw FormatError("dim = 0 at byte offset 8");
    if (header_.num_classes == 0) throw FormatError("num_classes = 0 at byte offset 12");
    offset_ = kKavHeaderBytes;
    scratch_.resize(header_.record_bytes());
  }

  const KavHeader& header() const { return header_; }

  /// Byte offset of the next unread record.
  std::uint64_t offset() const { return offset_; }

  /// Decodes the next record, or returns nullopt after the last one.
  std::optional<KavRecord> next() {
    if (index_ == header_.count) {
      if (!trailing_checked_) {
        trailing_checked_ = true;
        if (in_->peek() != std::char_traits<char>::eof()) {
          throw FormatError("trailing data at byte offset " + std::to_string(offset_));
        }
      }
      return std::nullopt;
    }
    const auto got = read_some(scratch_.data(), scratch_.size());
    if (got != scratch_.size()) {
      throw FormatError("truncated record " + std::to_string(index_) + " at byte offset " +
                        std::to_string(offset_));
    }
    KavRecord r;
    r.record_index = index_;
    const unsigned char* p = scratch_.data();
    r.label = detail::get_le<std::int32_t>(p);
    p += 4;
    if (header_.has_logits) {
      std::vector<float> logits(header_.num_classes);
      for (auto& v : logits) {
        v = detail::get_f32(p);
        p += 4;
      }
      r.logits = std::move(logits);
    }
    r.kav.resize(header_.dim);
    for (auto& v : r.kav) {
      v = detail::get_f32(p);
      p += 4;
    }
    if (r.label != kUnlabeled &&
        (r.label < 0 || static_cast<std::uint32_t>(r.label) >= header_.num_classes)) {
      throw FormatError("label " + std::to_string(r.label) + " out of range in record " +
                        std::to_string(index_) + " at byte offset " + std::to_string(offset_));
    }
    offset_ += scratch_.size();
    ++index_;
    return r;
  }

 private:
  std::size_t read_some(unsigned char* dst, std::size_t n) {
    in_->read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_->gcount());
    if (in_->bad()) throw IoError("read failure at byte offset " + std::to_string(offset_));
    return got;
  }

  std::istream* in_;
  KavHeader header_;
  std::uint64_t offset_ = 0;
  std::uint64_t index_ = 0;
  bool trailing_checked_ = false;
  std::vector<unsigned char> scratch_;
};

inline KavDataset read_kav(std::istream& in) {
  KavReader reader(in);
  const auto& h = reader.header();
  KavDataset ds(h.dim, h.num_classes, h.has_logits);
  while (auto r = reader.next()) ds.push_back(std::move(*r));
  return ds;
}

// ---------------------------------------------------------------------------
// Files

inline std::ifstream open_input(const std::string& path, bool binary = true) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return in;
}

inline std::ofstream open_output(const std::string& path, bool binary = true) {
  std::ofstream out(path, binary ? (std::ios::binary | std::ios::trunc) : std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  return out;
}

inline KavDataset read_kav_file(const std::string& path) {
  auto in = open_input(path);
  return read_kav(in);
}

inline std::uint64_t write_kav_file(const KavDataset& dataset, const std::string& path) {
  auto out = open_output(path);
  return write_kav(dataset, out);
}

// ---------------------------------------------------------------------------
// Text helpers

/// Shortest "%.{digits}g" rendering. 17 digits round-trips any double.
inline std::string format_real(double v, int digits = 17) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v,
                                 std::chars_format::general, digits);
  if (ec != std::errc{}) throw UsageError("cannot format real");
  return std::string(buf.data(), end);
}

inline std::optional<double> parse_real(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

template <std::integral T>
std::optional<T> parse_int(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

// ---------------------------------------------------------------------------
// CSV form (no logits)

/// Reads `label,v0,v1,...` CSV. Blank lines are skipped.
inline KavDataset read_kav_csv(std::istream& in, std::uint32_t num_classes) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw FormatError("missing CSV header at line 1");
  ++line_no;
  const auto header = split_csv_line(line);
  if (header.empty() || header[0] != "label") {
    throw FormatError("CSV header must start with 'label' at line 1");
  }
  if (header.size() < 2) throw FormatError("CSV header has no value columns at line 1");
  for (std::size_t i = 1; i < header.size(); ++i) {
    if (header[i] != "v" + std::to_string(i - 1)) {
      throw FormatError("CSV header column " + std::to_string(i) + " must be 'v" +
                        std::to_string(i - 1) + "' at line 1");
    }
  }
  const auto dim = static_cast<std::uint32_t>(header.size() - 1);
  KavDataset ds(dim, num_classes, false);
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    const auto at = " at line " + std::to_string(line_no);
    if (fields.size() != header.size()) {
      throw FormatError("expected " + std::to_string(header.size()) + " fields, got " +
                        std::to_string(fields.size()) + at);
    }
    const auto label = parse_int<ClassId>(fields[0]);
    if (!label) throw FormatError("bad label '" + std::string(fields[0]) + "'" + at);
    std::vector<float> kav(dim);
    for (std::uint32_t i = 0; i < dim; ++i) {
      const auto v = parse_real(fields[i + 1]);
      if (!v) throw FormatError("bad real '" + std::string(fields[i + 1]) + "'" + at);
      kav[i] = static_cast<float>(*v);
    }
    try {
      ds.push_back(*label, std::move(kav));
    } catch (const FormatError& e) {
      throw FormatError(std::string(e.what()) + at);
    }
  }
  if (in.bad()) throw IoError("read failure at line " + std::to_string(line_no));
  return ds;
}

/// Writes the CSV form; values are printed to 17 significant digits.
/// Logits, if any, are dropped.
inline void write_kav_csv(const KavDataset& dataset, std::ostream& out) {
  std::string buf = "label";
  for (std::uint32_t i = 0; i < dataset.dim(); ++i) buf += ",v" + std::to_string(i);
  buf += '\n';
  for (const auto& r : dataset.records()) {
    buf += std::to_string(r.label);
    for (float v : r.kav) {
      buf += ',';
      buf += format_real(static_cast<double>(v));
    }
    buf += '\n';
  }
  out << buf;
  if (!out) throw IoError("failed writing CSV stream");
}

}  // namespace kavguard
