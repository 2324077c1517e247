#include "topo/rewards/labels.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <stdexcept>

namespace topo::rewards {

namespace {

void check_label(const std::optional<int>& y, const char* name) {
  if (y && *y != 0 && *y != 1) throw std::invalid_argument(std::string(name) + " must be 0 or 1");
}

}  // namespace

void LabelRecord::validate() const {
  if (sample_id.empty()) throw std::invalid_argument("label record needs a sample id");
  if (!y_bc && !y_fm) throw std::invalid_argument("label record needs y_bc or y_fm");
  check_label(y_bc, "y_bc");
  check_label(y_fm, "y_fm");
}

nlohmann::json LabelRecord::to_json() const {
  nlohmann::json j = {{"sample_id", sample_id},
                      {"scenario_id", scenario_id},
                      {"source", source == LabelSource::Human ? "human" : "oracle"},
                      {"annotator", annotator},
                      {"timestamp", timestamp}};
  j["y_bc"] = y_bc ? nlohmann::json(*y_bc) : nlohmann::json(nullptr);
  j["y_fm"] = y_fm ? nlohmann::json(*y_fm) : nlohmann::json(nullptr);
  return j;
}

LabelRecord LabelRecord::from_json(const nlohmann::json& j) {
  LabelRecord r;
  try {
    r.sample_id = j.at("sample_id").get<std::string>();
    r.scenario_id = j.value("scenario_id", "");
    const std::string src = j.value("source", "human");
    if (src == "human") r.source = LabelSource::Human;
    else if (src == "oracle") r.source = LabelSource::Oracle;
    else throw std::invalid_argument("label source must be 'human' or 'oracle'");
    if (j.contains("y_bc") && !j["y_bc"].is_null()) r.y_bc = j["y_bc"].get<int>();
    if (j.contains("y_fm") && !j["y_fm"].is_null()) r.y_fm = j["y_fm"].get<int>();
    r.annotator = j.value("annotator", "");
    r.timestamp = j.value("timestamp", "");
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed label record: ") + e.what());
  }
  r.validate();
  return r;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

LabelStore::LabelStore(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void LabelStore::append(const LabelRecord& record) { append(std::vector<LabelRecord>{record}); }

void LabelStore::append(const std::vector<LabelRecord>& records) {
  for (const auto& r : records) r.validate();
  std::lock_guard lock(mu_);
  std::ofstream os(path_, std::ios::app);
  if (!os) throw std::runtime_error("cannot open label store " + path_.string());
  for (const auto& r : records) os << r.to_json().dump() << '\n';
  os.flush();
  if (!os) throw std::runtime_error("failed writing label store " + path_.string());
}

std::vector<LabelRecord> LabelStore::all() const {
  std::lock_guard lock(mu_);
  std::vector<LabelRecord> out;
  std::ifstream is(path_);
  if (!is) return out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(LabelRecord::from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path_.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::map<std::string, LabelRecord> LabelStore::latest() const {
  std::map<std::string, LabelRecord> out;
  for (auto& r : all()) out[r.sample_id] = std::move(r);
  return out;
}

}  // namespace topo::rewards
