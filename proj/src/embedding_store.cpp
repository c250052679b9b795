#include "debiaslens/embedding_store.hpp"

#include <cmath>
#include <json.hpp>
#include <set>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "byte_io.hpp"
#include "debiaslens/checksum.hpp"
#include "debiaslens/errors.hpp"
#include "file_util.hpp"

namespace debiaslens {

namespace {

constexpr char kMagic[8] = {'D', 'B', 'L', 'E', 'N', 'S', '0', '1'};
constexpr std::size_t kHeaderSize = 16;

using json = nlohmann::json;

}  // namespace

EmbeddingDataset::EmbeddingDataset(RowMatrixF rows, std::vector<std::string> ids)
    : rows_(std::move(rows)), ids_(std::move(ids)) {
  if (rows_.rows() < 1) throw ValidationError("embedding dataset must have at least one row");
  if (rows_.cols() < 1) throw ValidationError("embedding dataset must have dimension >= 1");
  if (ids_.size() != n()) {
    throw ValidationError("embedding dataset has " + std::to_string(n()) + " rows but " +
                          std::to_string(ids_.size()) + " ids");
  }
  for (Eigen::Index i = 0; i < rows_.rows(); ++i) {
    if (!rows_.row(i).allFinite()) {
      throw ValidationError("non-finite value in embedding row " + std::to_string(i));
    }
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : ids_) {
    if (id.find('\n') != std::string::npos) throw ValidationError("sample id contains a newline: '" + id + "'");
    if (!seen.insert(id).second) throw ValidationError("duplicate sample id '" + id + "'");
  }
}

std::optional<std::size_t> EmbeddingDataset::find(const std::string& id) const {
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i] == id) return i;
  }
  return std::nullopt;
}

std::string EmbeddingDataset::payload_bytes() const {
  std::string out;
  out.reserve(4 * n() * d());
  const float* data = rows_.data();
  for (Eigen::Index i = 0; i < rows_.size(); ++i) detail::put_f32(out, data[i]);
  return out;
}

std::string EmbeddingDataset::payload_sha256() const { return sha256_hex(payload_bytes()); }

std::size_t AttributeTable::group_index(const std::string& name) const {
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g] == name) return g;
  }
  throw LookupError("attribute '" + attribute + "' has no group '" + name + "'");
}

std::size_t AttributeTable::group_size(std::size_t g) const {
  std::size_t count = 0;
  for (int label : labels) count += (label == static_cast<int>(g));
  return count;
}

std::vector<std::size_t> AttributeTable::members(std::size_t g) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == static_cast<int>(g)) rows.push_back(i);
  }
  return rows;
}

std::string encode_embeddings(const EmbeddingDataset& ds) {
  std::string out(kMagic, sizeof kMagic);
  detail::put_u32(out, static_cast<std::uint32_t>(ds.n()));
  detail::put_u32(out, static_cast<std::uint32_t>(ds.d()));
  out += ds.payload_bytes();
  for (const auto& id : ds.ids()) {
    out += id;
    out.push_back('\n');
  }
  return out;
}

EmbeddingDataset decode_embeddings(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || bytes.compare(0, sizeof kMagic, kMagic, sizeof kMagic) != 0) {
    throw FormatError("embedding file does not start with magic DBLENS01");
  }
  if (bytes.size() < kHeaderSize) throw CorruptionError("embedding file truncated inside header");
  const std::uint64_t n = detail::get_u32(bytes.data() + 8);
  const std::uint64_t d = detail::get_u32(bytes.data() + 12);
  if (n == 0 || d == 0) throw ValidationError("embedding file declares n=" + std::to_string(n) + ", d=" + std::to_string(d));
  const std::uint64_t payload = 4 * n * d;
  if (bytes.size() < kHeaderSize + payload) throw CorruptionError("embedding payload truncated");

  RowMatrixF rows(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const char* p = bytes.data() + kHeaderSize;
  for (std::uint64_t i = 0; i < n * d; ++i, p += 4) {
    const float v = detail::get_f32(p);
    if (!std::isfinite(v)) throw ValidationError("non-finite value in embedding row " + std::to_string(i / d));
    rows.data()[i] = v;
  }

  std::vector<std::string> ids;
  ids.reserve(n);
  std::size_t pos = kHeaderSize + payload;
  while (ids.size() < n) {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw CorruptionError("id block truncated: expected " + std::to_string(n) + " ids");
    ids.emplace_back(bytes, pos, nl - pos);
    pos = nl + 1;
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes after id block");
  return EmbeddingDataset(std::move(rows), std::move(ids));
}

EmbeddingDataset load_embeddings(const std::filesystem::path& path) { return decode_embeddings(detail::read_file(path)); }

void save_embeddings(const EmbeddingDataset& ds, const std::filesystem::path& path) {
  detail::write_file(path, encode_embeddings(ds));
}

AttributeTable parse_labels(const std::string& json_text, const EmbeddingDataset& ds) {
  // nlohmann keeps the last of duplicate keys silently; track keys per object.
  std::vector<std::set<std::string>> open_objects;
  std::string duplicate;
  json::parser_callback_t cb = [&](int, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start:
        open_objects.emplace_back();
        break;
      case json::parse_event_t::object_end:
        open_objects.pop_back();
        break;
      case json::parse_event_t::key:
        if (!open_objects.back().insert(parsed.get<std::string>()).second && duplicate.empty()) {
          duplicate = parsed.get<std::string>();
        }
        break;
      default:
        break;
    }
    return true;
  };

  json doc;
  try {
    doc = json::parse(json_text, cb);
  } catch (const json::exception& e) {
    throw FormatError(std::string("label sidecar is not valid JSON: ") + e.what());
  }
  if (!duplicate.empty()) throw ValidationError("duplicate id '" + duplicate + "' in label sidecar");
  if (!doc.is_object() || !doc.contains("groups") || !doc.contains("labels") || !doc.contains("attribute")) {
    throw FormatError("label sidecar needs 'attribute', 'groups' and 'labels'");
  }

  AttributeTable table;
  try {
    table.attribute = doc.at("attribute").get<std::string>();
    table.groups = doc.at("groups").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("label sidecar: ") + e.what());
  }
  if (table.groups.empty()) throw ValidationError("label sidecar declares no groups");
  {
    std::set<std::string> unique(table.groups.begin(), table.groups.end());
    if (unique.size() != table.groups.size()) throw ValidationError("label sidecar declares a group twice");
  }
  const auto& labels = doc.at("labels");
  if (!labels.is_object()) throw FormatError("label sidecar 'labels' must be an object");
  if (labels.size() > ds.n()) {
    throw ValidationError("label sidecar has " + std::to_string(labels.size()) + " entries for " +
                          std::to_string(ds.n()) + " samples");
  }

  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < ds.n(); ++i) row_of.emplace(ds.ids()[i], i);

  table.labels.assign(ds.n(), kUnlabeled);
  for (const auto& [id, value] : labels.items()) {
    const auto row = row_of.find(id);
    if (row == row_of.end()) throw ValidationError("label sidecar references unknown id '" + id + "'");
    if (value.is_null()) continue;
    if (!value.is_number_integer()) throw ValidationError("label for id '" + id + "' is not an integer");
    const auto g = value.get<long long>();
    if (g == kUnlabeled) continue;
    if (g < 0 || g >= static_cast<long long>(table.groups.size())) {
      throw ValidationError("label " + std::to_string(g) + " for id '" + id + "' is outside the " +
                            std::to_string(table.groups.size()) + " declared groups");
    }
    table.labels[row->second] = static_cast<int>(g);
  }
  return table;
}

AttributeTable load_labels(const std::filesystem::path& path, const EmbeddingDataset& ds) {
  return parse_labels(detail::read_file(path), ds);
}

void save_labels(const AttributeTable& table, const EmbeddingDataset& ds, const std::filesystem::path& path) {
  if (table.labels.size() != ds.n()) throw ShapeError("label table does not match dataset row count");
  json labels = json::object();
  for (std::size_t i = 0; i < ds.n(); ++i) {
    if (table.labels[i] != kUnlabeled) labels[ds.ids()[i]] = table.labels[i];
  }
  json doc = {{"attribute", table.attribute}, {"groups", table.groups}, {"labels", labels}};
  detail::write_file(path, doc.dump(2) + "\n");
}

EmbeddingDataset subset_by_group(const EmbeddingDataset& ds, const AttributeTable& table, const std::string& group) {
  if (table.labels.size() != ds.n()) throw ShapeError("label table does not match dataset row count");
  const auto rows = table.members(table.group_index(group));
  if (rows.empty()) throw ValidationError("group '" + group + "' has no labeled samples");
  RowMatrixF out(static_cast<Eigen::Index>(rows.size()), ds.rows().cols());
  std::vector<std::string> ids;
  ids.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = ds.rows().row(static_cast<Eigen::Index>(rows[r]));
    ids.push_back(ds.ids()[rows[r]]);
  }
  return EmbeddingDataset(std::move(out), std::move(ids));
}

DatasetManifest make_manifest(const EmbeddingDataset& ds, const std::string& embeddings_path,
                              std::vector<std::string> labels, std::string note) {
  return DatasetManifest{embeddings_path, std::move(labels), std::move(note), ds.payload_sha256()};
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  try {
    const auto doc = json::parse(detail::read_file(path));
    DatasetManifest m;
    m.embeddings = doc.at("embeddings").get<std::string>();
    m.labels = doc.value("labels", std::vector<std::string>{});
    m.checksum = doc.at("checksum").get<std::string>();
    m.note = doc.value("note", std::string{});
    return m;
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + path.string() + "': " + e.what());
  }
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  json doc = {{"embeddings", manifest.embeddings},
              {"labels", manifest.labels},
              {"checksum", manifest.checksum},
              {"note", manifest.note}};
  detail::write_file(path, doc.dump(2) + "\n");
}

EmbeddingDataset load_verified(const std::filesystem::path& manifest_path) {
  const auto manifest = load_manifest(manifest_path);
  auto ds = load_embeddings(manifest_path.parent_path() / manifest.embeddings);
  const auto actual = ds.payload_sha256();
  if (actual != manifest.checksum) {
    throw CorruptionError("embedding payload checksum mismatch: manifest " + manifest.checksum + ", file " + actual);
  }
  return ds;
}

}  // namespace debiaslens
