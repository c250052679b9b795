#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace debiaslens {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// N x d feature matrix with one opaque id per row. Stored at the
/// interchange precision (32-bit); compute paths widen rows to double.
class EmbeddingDataset {
 public:
  /// Validates every invariant: n >= 1, d >= 1, finite entries, unique ids.
  EmbeddingDataset(RowMatrixF rows, std::vector<std::string> ids);

  std::size_t n() const { return static_cast<std::size_t>(rows_.rows()); }
  std::size_t d() const { return static_cast<std::size_t>(rows_.cols()); }
  const RowMatrixF& rows() const { return rows_; }
  const std::vector<std::string>& ids() const { return ids_; }

  Eigen::VectorXd row(std::size_t i) const { return rows_.row(static_cast<Eigen::Index>(i)).cast<double>().transpose(); }

  /// Index of the row carrying `id`, if any.
  std::optional<std::size_t> find(const std::string& id) const;

  /// Raw little-endian float payload, as written in the file.
  std::string payload_bytes() const;
  std::string payload_sha256() const;

 private:
  RowMatrixF rows_;
  std::vector<std::string> ids_;
};

inline constexpr int kUnlabeled = -1;

/// Group labels for one attribute, aligned to a dataset's row order.
struct AttributeTable {
  std::string attribute;
  std::vector<std::string> groups;
  std::vector<int> labels;  // group index or kUnlabeled, one per row

  std::size_t group_count() const { return groups.size(); }
  /// Throws LookupError when the group name is not declared.
  std::size_t group_index(const std::string& name) const;
  /// S_g: number of rows labeled with group `g`.
  std::size_t group_size(std::size_t g) const;
  std::vector<std::size_t> members(std::size_t g) const;
};

struct DatasetManifest {
  std::string embeddings;
  std::vector<std::string> labels;
  std::string note;
  std::string checksum;  // hex SHA-256 of the float payload
};

EmbeddingDataset load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingDataset& ds, const std::filesystem::path& path);

/// Serialized EMB1 bytes; save_embeddings writes exactly these.
std::string encode_embeddings(const EmbeddingDataset& ds);
EmbeddingDataset decode_embeddings(const std::string& bytes);

AttributeTable load_labels(const std::filesystem::path& path, const EmbeddingDataset& ds);
AttributeTable parse_labels(const std::string& json_text, const EmbeddingDataset& ds);
void save_labels(const AttributeTable& table, const EmbeddingDataset& ds, const std::filesystem::path& path);

/// Rows of `group`, in original relative order. Throws LookupError for an
/// unknown group and ValidationError when the group is empty.
EmbeddingDataset subset_by_group(const EmbeddingDataset& ds, const AttributeTable& table, const std::string& group);

DatasetManifest make_manifest(const EmbeddingDataset& ds, const std::string& embeddings_path,
                              std::vector<std::string> labels, std::string note);
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
/// Loads the embeddings named by the manifest (relative to the manifest's
/// directory) and throws CorruptionError when the payload checksum differs.
EmbeddingDataset load_verified(const std::filesystem::path& manifest_path);

}  // namespace debiaslens
