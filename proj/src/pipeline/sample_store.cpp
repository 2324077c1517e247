#include "topo/pipeline/sample_store.hpp"

#include <algorithm>
#include <stdexcept>

#include "topo/io/png.hpp"
#include "topo/io/tensor_file.hpp"
#include "topo/pipeline/render.hpp"

namespace topo::pipeline {

namespace fs = std::filesystem;

namespace {

ad::Tensor field_tensor(const fea::Field2D& f) {
  ad::Tensor t({1, f.ny, f.nx});
  for (std::size_t i = 0; i < f.size(); ++i) t[i] = static_cast<float>(f[i]);
  return t;
}

fea::Field2D tensor_field(const ad::Tensor& t) {
  fea::Field2D f(t.dim(2), t.dim(1));
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = t[i];
  return f;
}

}  // namespace

bool valid_sample_id(const std::string& id) {
  return !id.empty() && id.size() <= 128 && std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_';
  });
}

SampleStore::SampleStore(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

fs::path SampleStore::topology_png(const std::string& id) const { return dir_ / (id + ".png"); }
fs::path SampleStore::conditions_png(const std::string& id) const { return dir_ / (id + "_cond.png"); }

void SampleStore::put(const StoredSample& s) const {
  if (!valid_sample_id(s.id)) throw std::invalid_argument("invalid sample id '" + s.id + "'");
  io::write_png(topology_png(s.id), render_topology(s.density));
  io::write_png(conditions_png(s.id), render_conditions(s.spec, s.cond));
  io::TensorFile f;
  f.tensors = {{"density", field_tensor(s.density)}, {"binary", field_tensor(s.binary)}, {"cond", s.cond}};
  f.metadata = {{"sample_id", s.id}, {"scenario_id", s.scenario_id}, {"stage", s.stage}, {"scenario", s.spec.to_json()}};
  io::write_tensor_file(dir_ / (s.id + ".tnsr"), f);
}

bool SampleStore::contains(const std::string& id) const {
  return valid_sample_id(id) && fs::exists(dir_ / (id + ".tnsr"));
}

StoredSample SampleStore::get(const std::string& id) const {
  if (!contains(id)) throw std::out_of_range("unknown sample id '" + id + "'");
  const auto f = io::read_tensor_file(dir_ / (id + ".tnsr"));
  StoredSample s;
  s.id = id;
  s.scenario_id = f.metadata.at("scenario_id").get<std::string>();
  s.stage = f.metadata.at("stage").get<int>();
  s.spec = fea::ScenarioSpec::from_json(f.metadata.at("scenario"));
  s.cond = f.get("cond");
  s.density = tensor_field(f.get("density"));
  s.binary = tensor_field(f.get("binary"));
  return s;
}

std::vector<std::string> SampleStore::ids() const {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir_)) {
    if (e.path().extension() == ".tnsr") out.push_back(e.path().stem().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<rewards::LabeledSample> labeled_samples(const rewards::LabelStore& labels, const SampleStore& samples,
                                                    rewards::RewardKind kind, std::optional<int> stage) {
  std::vector<rewards::LabeledSample> out;
  for (const auto& [id, rec] : labels.latest()) {
    const auto& y = kind == rewards::RewardKind::BC ? rec.y_bc : rec.y_fm;
    if (!y) continue;
    const StoredSample s = samples.get(id);
    if (stage && s.stage != *stage - 1) continue;
    out.push_back({s.binary, s.cond, *y});
  }
  return out;
}

}  // namespace topo::pipeline
