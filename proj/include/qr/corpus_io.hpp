#pragma once

// Binary embedding files (.qemb) and their line-delimited JSON sidecar
// (.qemb.meta.jsonl).
//
// Header, 24 bytes, little-endian:
//   0  char[4]  magic "QEMB"
//   4  u16      version (1)
//   6  u16      reserved (0)
//   8  u32      dimension
//  12  u32      CRC-32 of header bytes [0,12) and [16,24)
//  16  u64      count
// Payload: count * dimension float32 values, row-major.
// Sidecar: exactly `count` JSON objects, one per line, in row order.

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "qr/error.hpp"
#include "qr/hierarchy.hpp"
#include "qr/linalg.hpp"
#include "qr/types.hpp"

namespace qr {

inline constexpr std::array<char, 4> kQembMagic = {'Q', 'E', 'M', 'B'};
inline constexpr std::uint16_t kQembVersion = 1;
inline constexpr std::size_t kQembHeaderSize = 24;

enum class RecordKind { image_view, text, owk, label, param };

inline const char* to_string(RecordKind k) {
  switch (k) {
    case RecordKind::image_view: return "image_view";
    case RecordKind::text: return "text";
    case RecordKind::owk: return "owk";
    case RecordKind::label: return "label";
    case RecordKind::param: return "param";
  }
  return "?";
}

inline RecordKind parse_record_kind(const std::string& s) {
  if (s == "image_view") return RecordKind::image_view;
  if (s == "text") return RecordKind::text;
  if (s == "owk") return RecordKind::owk;
  if (s == "label") return RecordKind::label;
  if (s == "param") return RecordKind::param;
  throw DataError("unknown record kind '" + s + "'");
}

// One sidecar line. Fields the engine does not interpret survive in `extra`.
struct SidecarRecord {
  std::string id;
  RecordKind kind = RecordKind::owk;
  std::optional<std::string> label_text;
  std::optional<int> view_index;
  std::optional<std::string> text_ref;
  std::optional<std::string> split;
  nlohmann::json extra = nlohmann::json::object();

  bool operator==(const SidecarRecord&) const = default;
};

// A raw file: vectors plus per-row metadata, before kind-specific typing.
struct EmbeddingTable {
  FloatMatrix vectors;
  std::vector<SidecarRecord> records;

  std::size_t dim() const { return vectors.cols(); }
  std::size_t count() const { return vectors.rows(); }
};

struct LoadOptions {
  // L2-normalize every row at ingestion. Parameter files are never normalized.
  bool normalize = true;
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta.jsonl");
}

namespace detail {

template <class T>
void put_le(std::vector<unsigned char>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>((value >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p[i]) << (8 * i));
  return v;
}

inline std::uint32_t header_crc(const unsigned char* header) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, header, 12);
  crc = crc32(crc, header + 16, 8);
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<unsigned char> encode_header(std::uint32_t dim, std::uint64_t count) {
  std::vector<unsigned char> h;
  h.reserve(kQembHeaderSize);
  for (char c : kQembMagic) h.push_back(static_cast<unsigned char>(c));
  put_le<std::uint16_t>(h, kQembVersion);
  put_le<std::uint16_t>(h, 0);
  put_le<std::uint32_t>(h, dim);
  put_le<std::uint32_t>(h, 0);
  put_le<std::uint64_t>(h, count);
  const std::uint32_t crc = header_crc(h.data());
  for (std::size_t i = 0; i < 4; ++i) h[12 + i] = static_cast<unsigned char>((crc >> (8 * i)) & 0xFF);
  return h;
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline nlohmann::json record_to_json(const SidecarRecord& r, std::size_t dim) {
  nlohmann::json j = r.extra;
  j["id"] = r.id;
  j["kind"] = to_string(r.kind);
  j["dim"] = dim;
  if (r.label_text) j["label_text"] = *r.label_text;
  if (r.view_index) j["view_index"] = *r.view_index;
  if (r.text_ref) j["text_ref"] = *r.text_ref;
  if (r.split) j["split"] = *r.split;
  return j;
}

inline SidecarRecord record_from_json(const nlohmann::json& j, std::size_t dim, std::size_t line) {
  const std::string where = "sidecar line " + std::to_string(line + 1);
  if (!j.is_object()) throw DataError(where + ": not a JSON object");
  if (!j.contains("id") || !j["id"].is_string()) throw DataError(where + ": missing string 'id'");
  if (!j.contains("kind") || !j["kind"].is_string()) throw DataError(where + ": missing string 'kind'");
  SidecarRecord r;
  r.id = j["id"].get<std::string>();
  r.kind = parse_record_kind(j["kind"].get<std::string>());
  if (j.contains("dim")) {
    if (!j["dim"].is_number_unsigned() || j["dim"].get<std::size_t>() != dim) {
      throw DataError(where + ": dimension disagrees with header");
    }
  }
  auto opt_string = [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key)) return std::nullopt;
    if (!j[key].is_string()) throw DataError(where + ": '" + key + "' must be a string");
    return j[key].get<std::string>();
  };
  r.label_text = opt_string("label_text");
  r.text_ref = opt_string("text_ref");
  r.split = opt_string("split");
  if (j.contains("view_index")) {
    if (!j["view_index"].is_number_integer()) throw DataError(where + ": 'view_index' must be an integer");
    r.view_index = j["view_index"].get<int>();
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const std::array<std::string, 7> known = {"id", "kind", "dim", "label_text", "view_index", "text_ref", "split"};
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) r.extra[it.key()] = it.value();
  }
  return r;
}

// Writes to a sibling temporary file and renames over the target.
inline void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename into " + path.string() + ": " + ec.message());
}

}  // namespace detail

// Reads and validates a .qemb file and its sidecar. Every header field is
// checked; a single corrupted header byte is always rejected.
inline EmbeddingTable read_table(const std::filesystem::path& path) {
  const auto bytes = detail::read_bytes(path);
  const std::string name = path.string();
  if (bytes.size() < kQembHeaderSize) throw DataError(name + ": truncated header");
  const unsigned char* h = bytes.data();
  if (std::memcmp(h, kQembMagic.data(), 4) != 0) throw DataError(name + ": bad magic");
  if (detail::get_le<std::uint16_t>(h + 4) != kQembVersion) throw DataError(name + ": unsupported version");
  if (detail::get_le<std::uint16_t>(h + 6) != 0) throw DataError(name + ": reserved field is not zero");
  if (detail::get_le<std::uint32_t>(h + 12) != detail::header_crc(h)) throw DataError(name + ": header checksum mismatch");
  const std::uint32_t dim = detail::get_le<std::uint32_t>(h + 8);
  const std::uint64_t count = detail::get_le<std::uint64_t>(h + 16);
  if (dim == 0) throw DataError(name + ": dimension is zero");
  const std::uint64_t max_values = (std::numeric_limits<std::uint64_t>::max() - kQembHeaderSize) / 4;
  if (count > max_values / dim) throw DataError(name + ": count overflows");
  const std::uint64_t payload = count * dim * 4;
  if (bytes.size() != kQembHeaderSize + payload) throw DataError(name + ": payload length does not match header");

  EmbeddingTable table;
  table.vectors = FloatMatrix(static_cast<std::size_t>(count), dim);
  auto data = table.vectors.data();
  const unsigned char* p = h + kQembHeaderSize;
  for (std::size_t i = 0; i < data.size(); ++i, p += 4) {
    const auto bits = detail::get_le<std::uint32_t>(p);
    data[i] = std::bit_cast<float>(bits);
    if (!std::isfinite(data[i])) throw DataError(name + ": non-finite value at row " + std::to_string(i / dim));
  }

  std::ifstream side(sidecar_path(path));
  if (!side) throw DataError(name + ": missing sidecar " + sidecar_path(path).string());
  std::string line;
  while (std::getline(side, line)) {
    if (line.empty()) continue;
    if (table.records.size() == count) throw DataError(name + ": sidecar has more records than header count");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(name + ": sidecar line " + std::to_string(table.records.size() + 1) + ": " + e.what());
    }
    table.records.push_back(detail::record_from_json(j, dim, table.records.size()));
  }
  if (table.records.size() != count) throw DataError(name + ": sidecar has fewer records than header count");
  return table;
}

inline void write_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  if (table.records.size() != table.vectors.rows()) throw DataError("write_table: record count mismatch");
  if (table.dim() == 0) throw DataError("write_table: dimension is zero");
  if (!all_finite(table.vectors.data())) throw DataError("write_table: non-finite value");

  auto bytes = detail::encode_header(static_cast<std::uint32_t>(table.dim()), table.count());
  bytes.reserve(kQembHeaderSize + table.vectors.data().size() * 4);
  for (float v : table.vectors.data()) detail::put_le<std::uint32_t>(bytes, std::bit_cast<std::uint32_t>(v));

  std::string sidecar;
  for (const auto& r : table.records) {
    sidecar += detail::record_to_json(r, table.dim()).dump();
    sidecar += '\n';
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_atomically(path, std::string(bytes.begin(), bytes.end()));
  detail::write_atomically(sidecar_path(path), sidecar);
}

namespace detail {

inline void normalize_rows(FloatMatrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const auto unit = l2_normalize(row);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<float>(unit[c]);
  }
}

inline void require_kind(const EmbeddingTable& t, std::initializer_list<RecordKind> allowed, const std::string& what) {
  for (const auto& r : t.records) {
    if (std::find(allowed.begin(), allowed.end(), r.kind) == allowed.end()) {
      throw DataError(what + ": unexpected record kind '" + to_string(r.kind) + "' for '" + r.id + "'");
    }
  }
}

}  // namespace detail

inline KnowledgeCorpus to_knowledge_corpus(EmbeddingTable table, const LoadOptions& opts = {}) {
  detail::require_kind(table, {RecordKind::owk, RecordKind::text}, "knowledge corpus");
  if (opts.normalize) detail::normalize_rows(table.vectors);
  KnowledgeCorpus c;
  for (const auto& r : table.records) {
    c.ids.push_back(r.id);
    c.text_refs.push_back(r.text_ref.value_or(""));
  }
  c.embeddings = std::move(table.vectors);
  c.validate();
  return c;
}

inline LabelSpace to_label_space(EmbeddingTable table, const LoadOptions& opts = {}) {
  detail::require_kind(table, {RecordKind::label, RecordKind::text}, "label space");
  if (opts.normalize) detail::normalize_rows(table.vectors);
  LabelSpace s;
  for (const auto& r : table.records) {
    const std::string text = r.label_text.value_or(r.id);
    s.ids.push_back(r.id);
    s.texts.push_back(text);
    s.hierarchies.push_back(parse_hierarchy(text));
  }
  s.embeddings = std::move(table.vectors);
  s.validate();
  return s;
}

inline ImageSet to_image_set(EmbeddingTable table, const LoadOptions& opts = {}) {
  detail::require_kind(table, {RecordKind::image_view}, "image set");
  if (opts.normalize) detail::normalize_rows(table.vectors);
  ImageSet s;
  for (const auto& r : table.records) {
    s.ids.push_back(r.id);
    s.labels.push_back(r.label_text.value_or(""));
    s.splits.push_back(r.split.value_or("train"));
  }
  s.embeddings = std::move(table.vectors);
  s.validate();
  return s;
}

inline KnowledgeCorpus load_knowledge(const std::filesystem::path& path, const LoadOptions& opts = {}) {
  return to_knowledge_corpus(read_table(path), opts);
}
inline LabelSpace load_labels(const std::filesystem::path& path, const LoadOptions& opts = {}) {
  return to_label_space(read_table(path), opts);
}
inline ImageSet load_images(const std::filesystem::path& path, const LoadOptions& opts = {}) {
  return to_image_set(read_table(path), opts);
}

using LoadedCorpus = std::variant<KnowledgeCorpus, ImageSet, LabelSpace>;

// Dispatches on the declared record kind. An empty file loads as an empty
// knowledge corpus.
inline LoadedCorpus load_corpus(const std::filesystem::path& path, const LoadOptions& opts = {}) {
  auto table = read_table(path);
  if (table.records.empty()) return to_knowledge_corpus(std::move(table), opts);
  switch (table.records.front().kind) {
    case RecordKind::image_view: return to_image_set(std::move(table), opts);
    case RecordKind::label: return to_label_space(std::move(table), opts);
    case RecordKind::owk:
    case RecordKind::text: return to_knowledge_corpus(std::move(table), opts);
    case RecordKind::param: break;
  }
  throw DataError(path.string() + ": parameter files are loaded with read_params");
}

inline EmbeddingTable to_table(const KnowledgeCorpus& c) {
  EmbeddingTable t{c.embeddings, {}};
  for (std::size_t i = 0; i < c.size(); ++i) {
    SidecarRecord r{.id = c.ids[i], .kind = RecordKind::owk};
    if (!c.text_refs[i].empty()) r.text_ref = c.text_refs[i];
    t.records.push_back(std::move(r));
  }
  return t;
}

inline EmbeddingTable to_table(const LabelSpace& s) {
  EmbeddingTable t{s.embeddings, {}};
  for (std::size_t i = 0; i < s.size(); ++i) {
    t.records.push_back({.id = s.ids[i], .kind = RecordKind::label, .label_text = s.texts[i]});
  }
  return t;
}

inline EmbeddingTable to_table(const ImageSet& s) {
  EmbeddingTable t{s.embeddings, {}};
  for (std::size_t i = 0; i < s.size(); ++i) {
    t.records.push_back({.id = s.ids[i], .kind = RecordKind::image_view, .label_text = s.labels[i], .split = s.splits[i]});
  }
  return t;
}

// An empty corpus has no intrinsic width; it is written with dimension 1
// unless the matrix already carries one.
template <class Corpus>
void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  corpus.validate();
  auto table = to_table(corpus);
  if (table.vectors.cols() == 0) table.vectors.set_cols(1);
  write_table(table, path);
}

// Named parameter tensors, flattened and chunked into rows of `width` floats.
// Each row's sidecar record carries the tensor name, full length and chunk.
using ParamTensors = std::map<std::string, Vector>;

inline void write_params(const ParamTensors& tensors, std::size_t width, const std::filesystem::path& path,
                         const nlohmann::json& meta = nlohmann::json::object()) {
  if (width == 0) throw DataError("write_params: zero width");
  EmbeddingTable t;
  t.vectors.set_cols(width);
  for (const auto& [name, values] : tensors) {
    const std::size_t chunks = values.empty() ? 1 : (values.size() + width - 1) / width;
    for (std::size_t c = 0; c < chunks; ++c) {
      Vector row(width, 0.0);
      for (std::size_t k = 0; k < width && c * width + k < values.size(); ++k) row[k] = values[c * width + k];
      t.vectors.append_row(row);
      SidecarRecord r{.id = name + "#" + std::to_string(c), .kind = RecordKind::param};
      r.extra = meta;
      r.extra["tensor"] = name;
      r.extra["length"] = values.size();
      r.extra["chunk"] = c;
      t.records.push_back(std::move(r));
    }
  }
  write_table(t, path);
}

inline ParamTensors read_params(const std::filesystem::path& path, nlohmann::json* meta = nullptr) {
  const auto t = read_table(path);
  detail::require_kind(t, {RecordKind::param}, "parameter file");
  ParamTensors out;
  for (std::size_t i = 0; i < t.count(); ++i) {
    const auto& r = t.records[i];
    if (!r.extra.contains("tensor") || !r.extra.contains("length") || !r.extra.contains("chunk")) {
      throw DataError(path.string() + ": parameter record '" + r.id + "' lacks tensor/length/chunk");
    }
    const auto name = r.extra["tensor"].get<std::string>();
    const auto length = r.extra["length"].get<std::size_t>();
    const auto chunk = r.extra["chunk"].get<std::size_t>();
    auto& v = out[name];
    if (chunk * t.dim() != v.size() && !(v.size() == length && length == 0)) {
      throw DataError(path.string() + ": parameter chunks out of order for '" + name + "'");
    }
    const auto row = t.vectors.row(i);
    for (std::size_t k = 0; k < t.dim() && v.size() < length; ++k) v.push_back(row[k]);
    if (meta && i == 0) {
      *meta = r.extra;
      meta->erase("tensor");
      meta->erase("length");
      meta->erase("chunk");
    }
  }
  for (std::size_t i = 0; i < t.count(); ++i) {
    const auto& r = t.records[i];
    if (out[r.extra["tensor"].get<std::string>()].size() != r.extra["length"].get<std::size_t>()) {
      throw DataError(path.string() + ": truncated parameter tensor '" + r.extra["tensor"].get<std::string>() + "'");
    }
  }
  return out;
}

}  // namespace qr
