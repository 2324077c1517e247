#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace topo::rewards {

enum class LabelSource { Human, Oracle };

/// One binary judgment. y = 1 means the criterion is satisfied (supports and
/// loads attached, no floating material); y = 0 flags a violation.
struct LabelRecord {
  std::string sample_id;
  std::string scenario_id;
  LabelSource source = LabelSource::Oracle;
  std::optional<int> y_bc;
  std::optional<int> y_fm;
  std::string annotator;
  std::string timestamp;  // ISO 8601 UTC

  void validate() const;
  nlohmann::json to_json() const;
  static LabelRecord from_json(const nlohmann::json& j);
};

std::string utc_timestamp();

/// Append-only JSONL file. Re-labeling a sample appends a new line; readers
/// take the last line per sample id.
class LabelStore {
 public:
  explicit LabelStore(std::filesystem::path path);

  void append(const LabelRecord& record);
  void append(const std::vector<LabelRecord>& records);
  /// Every line in file order.
  std::vector<LabelRecord> all() const;
  /// Last record per sample id, keyed by sample id.
  std::map<std::string, LabelRecord> latest() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
};

}  // namespace topo::rewards
