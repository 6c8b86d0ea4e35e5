#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "srctrace/errors.hpp"
#include "srctrace/matrix.hpp"

namespace srctrace {

// Norms below this are treated as zero; catches denormal garbage as well as
// true zero vectors.
inline constexpr double kZeroNormThreshold = 1e-30;

// Returns v / ||v||. Throws ZeroNormError when the norm is below threshold.
inline std::vector<double> l2_normalize(std::span<const double> v) {
  if (v.empty()) throw ShapeMismatchError("l2_normalize: empty vector");
  const double n = l2_norm(v);
  if (n < kZeroNormThreshold) throw ZeroNormError("l2_normalize: zero-norm vector");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

// A set of row embeddings with aligned integer labels and a class-name table.
// Immutable after construction; concurrent reads are safe. Storage scalar is
// f32 (matching the file format); arithmetic upcasts to f64 at access time.
class EmbeddingSet {
 public:
  EmbeddingSet() = default;

  EmbeddingSet(std::size_t count, std::size_t dim, std::vector<float> data,
               std::vector<std::int32_t> labels, std::vector<std::string> class_names)
      : count_(count),
        dim_(dim),
        data_(std::move(data)),
        labels_(std::move(labels)),
        class_names_(std::move(class_names)) {
    if (dim_ < 1) throw ShapeMismatchError("EmbeddingSet: dim must be >= 1");
    if (data_.size() != count_ * dim_)
      throw ShapeMismatchError("EmbeddingSet: data size does not match count*dim");
    if (labels_.size() != count_)
      throw ShapeMismatchError("EmbeddingSet: label count does not match row count");
    for (std::int32_t y : labels_)
      if (y < 0 || static_cast<std::size_t>(y) >= class_names_.size())
        throw ShapeMismatchError("EmbeddingSet: label outside class-name table");
  }

  // Convenience constructor from a double matrix (values truncated to f32,
  // exactly as file storage would).
  EmbeddingSet(const Matrix& m, std::vector<std::int32_t> labels,
               std::vector<std::string> class_names)
      : EmbeddingSet(m.rows(), m.cols(), to_f32(m), std::move(labels),
                     std::move(class_names)) {}

  std::size_t count() const { return count_; }
  std::size_t dim() const { return dim_; }
  std::size_t num_classes() const { return class_names_.size(); }

  std::span<const float> row(std::size_t i) const {
    return {data_.data() + i * dim_, dim_};
  }

  std::vector<double> row_f64(std::size_t i) const {
    std::vector<double> out(dim_);
    const float* p = data_.data() + i * dim_;
    for (std::size_t c = 0; c < dim_; ++c) out[c] = static_cast<double>(p[c]);
    return out;
  }

  // Unit-norm copy of a row; throws ZeroNormError on degenerate rows.
  std::vector<double> normalized_row(std::size_t i) const {
    const std::vector<double> r = row_f64(i);
    return l2_normalize(r);
  }

  Matrix to_matrix() const {
    Matrix m(count_, dim_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      m.data()[i] = static_cast<double>(data_[i]);
    return m;
  }

  const std::vector<float>& raw() const { return data_; }
  const std::vector<std::int32_t>& labels() const { return labels_; }
  const std::vector<std::string>& class_names() const { return class_names_; }

  const std::string& class_name(std::size_t i) const { return class_names_[labels_[i]]; }

  friend bool operator==(const EmbeddingSet& a, const EmbeddingSet& b) = default;

 private:
  static std::vector<float> to_f32(const Matrix& m) {
    std::vector<float> out(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = static_cast<float>(m.data()[i]);
    return out;
  }

  std::size_t count_ = 0;
  std::size_t dim_ = 1;
  std::vector<float> data_;
  std::vector<std::int32_t> labels_;
  std::vector<std::string> class_names_;
};

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline void put_f32_le(std::string& out, float f) {
  std::uint32_t bits;
  static_assert(sizeof(bits) == sizeof(f));
  std::memcpy(&bits, &f, sizeof(bits));
  put_u32_le(out, bits);
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline float get_f32_le(const unsigned char* p) {
  const std::uint32_t bits = get_u32_le(p);
  float f;
  std::memcpy(&f, &bits, sizeof(f));
  return f;
}

}  // namespace detail

inline constexpr char kEmbeddingMagic[4] = {'E', 'M', 'B', 'F'};
inline constexpr unsigned char kEmbeddingVersion = 0x01;

// Serializes the binary block: "EMBF", version byte, count u32 LE, dim u32 LE,
// then count*dim f32 LE row-major.
inline std::string encode_embeddings(const EmbeddingSet& set) {
  std::string out;
  out.reserve(13 + 4 * set.count() * set.dim());
  out.append(kEmbeddingMagic, 4);
  out.push_back(static_cast<char>(kEmbeddingVersion));
  detail::put_u32_le(out, static_cast<std::uint32_t>(set.count()));
  detail::put_u32_le(out, static_cast<std::uint32_t>(set.dim()));
  for (float f : set.raw()) detail::put_f32_le(out, f);
  return out;
}

// Writes the binary embedding file plus the ".labels" sidecar (one class name
// per row). Returns the embedding file's byte count.
inline std::size_t write_embeddings(const EmbeddingSet& set, const std::string& path) {
  const std::string blob = encode_embeddings(set);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_embeddings: cannot open " + path);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("write_embeddings: short write to " + path);
  }
  {
    std::ofstream f(path + ".labels", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_embeddings: cannot open " + path + ".labels");
    for (std::size_t i = 0; i < set.count(); ++i) f << set.class_name(i) << '\n';
    if (!f) throw IoError("write_embeddings: short write to " + path + ".labels");
  }
  return blob.size();
}

inline EmbeddingSet read_embeddings(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_embeddings: cannot open " + path);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (blob.size() < 13) throw ParseError("read_embeddings: truncated header in " + path);
  if (std::memcmp(blob.data(), kEmbeddingMagic, 4) != 0)
    throw ParseError("read_embeddings: bad magic in " + path);
  if (static_cast<unsigned char>(blob[4]) != kEmbeddingVersion)
    throw ParseError("read_embeddings: unsupported version in " + path);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint32_t count = detail::get_u32_le(p + 5);
  const std::uint32_t dim = detail::get_u32_le(p + 9);
  const std::size_t expected = 13 + 4ull * count * dim;
  if (blob.size() != expected)
    throw ParseError("read_embeddings: payload size mismatch in " + path);
  std::vector<float> data(static_cast<std::size_t>(count) * dim);
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = detail::get_f32_le(p + 13 + 4 * i);

  std::ifstream lf(path + ".labels", std::ios::binary);
  if (!lf) throw IoError("read_embeddings: cannot open " + path + ".labels");
  std::vector<std::int32_t> labels;
  std::vector<std::string> class_names;
  std::unordered_map<std::string, std::int32_t> ids;
  std::string line;
  while (std::getline(lf, line)) {
    auto [it, inserted] = ids.emplace(line, static_cast<std::int32_t>(class_names.size()));
    if (inserted) class_names.push_back(line);
    labels.push_back(it->second);
  }
  if (labels.size() != count)
    throw ParseError("read_embeddings: label sidecar has " + std::to_string(labels.size()) +
                     " lines, expected " + std::to_string(count));
  return EmbeddingSet(count, dim, std::move(data), std::move(labels), std::move(class_names));
}

enum class Split { kTrain, kDev, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    default: return "test";
  }
}

// One dataset record: sample id, source-system label and optional
// seen/unseen condition flags.
struct ManifestEntry {
  std::string sample_id;
  std::string label;
  std::optional<std::string> language;
  std::optional<bool> model_seen;
  std::optional<bool> language_seen;
  Split split = Split::kTrain;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline std::vector<ManifestEntry> read_manifest(std::istream& in) {
  std::vector<ManifestEntry> entries;
  std::unordered_map<std::string, std::size_t> seen_ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object())
      throw ParseError("manifest line " + std::to_string(line_no) + ": not a JSON object");
    ManifestEntry e;
    try {
      e.sample_id = j.at("sample_id").get<std::string>();
      e.label = j.at("label").get<std::string>();
      if (j.contains("language") && !j["language"].is_null())
        e.language = j["language"].get<std::string>();
      if (j.contains("model_seen") && !j["model_seen"].is_null())
        e.model_seen = j["model_seen"].get<bool>();
      if (j.contains("language_seen") && !j["language_seen"].is_null())
        e.language_seen = j["language_seen"].get<bool>();
      const std::string split = j.at("split").get<std::string>();
      if (split == "train")
        e.split = Split::kTrain;
      else if (split == "dev")
        e.split = Split::kDev;
      else if (split == "test")
        e.split = Split::kTest;
      else
        throw ParseError("manifest line " + std::to_string(line_no) +
                         ": split must be train|dev|test, got \"" + split + "\"");
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + ex.what());
    }
    if (!seen_ids.emplace(e.sample_id, line_no).second)
      throw DuplicateIdError("manifest: duplicate sample_id \"" + e.sample_id + "\" at line " +
                             std::to_string(line_no));
    entries.push_back(std::move(e));
  }
  return entries;
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_manifest: cannot open " + path);
  return read_manifest(f);
}

inline void write_manifest(const std::vector<ManifestEntry>& entries, std::ostream& out) {
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["sample_id"] = e.sample_id;
    j["label"] = e.label;
    if (e.language) j["language"] = *e.language;
    if (e.model_seen) j["model_seen"] = *e.model_seen;
    if (e.language_seen) j["language_seen"] = *e.language_seen;
    j["split"] = to_string(e.split);
    out << j.dump() << '\n';
  }
}

inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("write_manifest: cannot open " + path);
  write_manifest(entries, f);
  if (!f) throw IoError("write_manifest: short write to " + path);
}

}  // namespace srctrace
