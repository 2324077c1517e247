#include "topo/simp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "topo/io/tensor_file.hpp"
#include "topo/rewards/oracle.hpp"
#include "topo/util/seed.hpp"

namespace topo::simp {

std::string to_string(SupportTemplate t) {
  switch (t) {
    case SupportTemplate::LeftEdge: return "left_edge";
    case SupportTemplate::BottomCorners: return "bottom_corners";
    case SupportTemplate::LeftEdgeBottomRight: return "left_edge_bottom_right";
  }
  return "unknown";
}

SupportTemplate support_template_from_string(const std::string& s) {
  for (auto t : {SupportTemplate::LeftEdge, SupportTemplate::BottomCorners, SupportTemplate::LeftEdgeBottomRight}) {
    if (to_string(t) == s) return t;
  }
  throw std::invalid_argument("unknown support template '" + s + "'");
}

std::vector<SupportTemplate> training_templates(SupportTemplate holdout) {
  std::vector<SupportTemplate> out;
  for (auto t : {SupportTemplate::LeftEdge, SupportTemplate::BottomCorners, SupportTemplate::LeftEdgeBottomRight}) {
    if (t != holdout) out.push_back(t);
  }
  return out;
}

std::vector<fea::Support> template_supports(SupportTemplate t, int nel_x, int nel_y) {
  const auto node = [&](int ix, int iy) { return iy * (nel_x + 1) + ix; };
  std::vector<fea::Support> s;
  switch (t) {
    case SupportTemplate::LeftEdge:
      for (int iy = 0; iy <= nel_y; ++iy) s.push_back({node(0, iy), true, true});
      break;
    case SupportTemplate::BottomCorners:
      s.push_back({node(0, nel_y), true, true});
      s.push_back({node(nel_x, nel_y), true, true});
      break;
    case SupportTemplate::LeftEdgeBottomRight:
      for (int iy = 0; iy <= nel_y; ++iy) s.push_back({node(0, iy), true, true});
      s.push_back({node(nel_x, nel_y), true, true});
      break;
  }
  return s;
}

std::vector<int> free_boundary_nodes(int nel_x, int nel_y, const std::vector<fea::Support>& supports) {
  std::set<int> fixed;
  for (const auto& s : supports) fixed.insert(s.node);
  std::vector<int> out;
  for (int iy = 0; iy <= nel_y; ++iy) {
    for (int ix = 0; ix <= nel_x; ++ix) {
      const bool boundary = ix == 0 || iy == 0 || ix == nel_x || iy == nel_y;
      const int n = iy * (nel_x + 1) + ix;
      if (boundary && !fixed.count(n)) out.push_back(n);
    }
  }
  return out;
}

ScenarioDraw random_scenario(std::mt19937_64& rng, const ScenarioOptions& options) {
  if (options.templates.empty()) throw std::invalid_argument("scenario randomizer needs at least one template");
  if (!(options.vf_min > 0.0 && options.vf_min <= options.vf_max && options.vf_max < 1.0)) {
    throw std::invalid_argument("scenario volume-fraction range must satisfy 0 < min <= max < 1");
  }
  ScenarioDraw d;
  d.support = options.templates[std::uniform_int_distribution<std::size_t>(0, options.templates.size() - 1)(rng)];
  d.spec.nel_x = options.nel_x;
  d.spec.nel_y = options.nel_y;
  d.spec.supports = template_supports(d.support, options.nel_x, options.nel_y);
  std::vector<int> candidates = free_boundary_nodes(options.nel_x, options.nel_y, d.spec.supports);
  const int loads = std::uniform_int_distribution<int>(1, 2)(rng);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  for (int k = 0; k < loads && !candidates.empty(); ++k) {
    const auto idx = std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng);
    const double a = angle(rng);
    d.spec.loads.push_back({candidates[idx], std::cos(a), std::sin(a)});
    candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(idx));
  }
  d.spec.volume_fraction = std::uniform_real_distribution<double>(options.vf_min, options.vf_max)(rng);
  d.spec.validate();
  return d;
}

std::vector<DatasetRecord> generate_dataset(int n, std::uint64_t seed, const DatasetOptions& options,
                                            DatasetStats* stats) {
  if (n < 1) throw std::invalid_argument("dataset size must be at least 1");
  options.simp.validate();
  options.material.validate();
  DatasetStats local;
  DatasetStats& st = stats ? *stats : local;
  st = {};
  std::vector<DatasetRecord> out;
  const int cap = n * std::max(1, options.max_attempts_factor);
  while (static_cast<int>(out.size()) < n) {
    if (st.attempts >= cap) {
      throw DatasetError("only " + std::to_string(out.size()) + " of " + std::to_string(n) +
                         " valid scenarios after " + std::to_string(cap) + " attempts");
    }
    const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(st.attempts++));
    std::mt19937_64 rng(s);
    const ScenarioDraw draw = random_scenario(rng, options.scenario);
    SimpResult r;
    fea::ConditioningStack cond;
    try {
      r = optimize(draw.spec, options.simp, options.material);
      cond = fea::build_conditioning(draw.spec, options.material);
    } catch (const fea::IllConditionedError&) {
      ++st.rejected_fea;
      continue;
    } catch (const OcBracketError&) {
      ++st.rejected_fea;
      continue;
    }
    if (!r.converged) {
      ++st.rejected_unconverged;
      continue;
    }
    if (std::fabs(r.density.mean() - draw.spec.volume_fraction) > options.volume_tolerance) {
      ++st.rejected_volume;
      continue;
    }
    const auto verdict = rewards::oracle_verdict(r.binary, draw.spec);
    if (!verdict.bc_valid || !verdict.fm_valid) {
      ++st.rejected_oracle;
      continue;
    }
    DatasetRecord rec;
    rec.spec = draw.spec;
    rec.support = draw.support;
    rec.conditioning = std::move(cond);
    rec.density = std::move(r.density);
    rec.binary = std::move(r.binary);
    rec.compliance = r.compliance;
    rec.binary_compliance = r.binary_compliance;
    rec.iterations = r.iterations;
    rec.seed = s;
    rec.split = draw.support == options.holdout ? "ood" : "train";
    out.push_back(std::move(rec));
  }
  return out;
}

namespace {

ad::Tensor field_tensor(const fea::Field2D& f) {
  ad::Tensor t({1, f.ny, f.nx});
  for (std::size_t i = 0; i < f.size(); ++i) t[i] = static_cast<float>(f[i]);
  return t;
}

fea::Field2D tensor_field(const ad::Tensor& t, int channel = 0) {
  if (t.rank() != 3) throw std::runtime_error("dataset tensor must have rank 3");
  const int h = t.dim(1), w = t.dim(2);
  fea::Field2D f(w, h);
  const std::size_t off = static_cast<std::size_t>(channel) * f.size();
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = t[off + i];
  return f;
}

std::string record_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "record_%05zu.tnsr", i);
  return buf;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const std::vector<DatasetRecord>& records,
                   const nlohmann::json& provenance) {
  std::filesystem::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const DatasetRecord& r = records[i];
    io::TensorFile f;
    f.tensors.push_back({"density", field_tensor(r.density)});
    f.tensors.push_back({"binary", field_tensor(r.binary)});
    const int h = r.conditioning.height(), w = r.conditioning.width();
    ad::Tensor c({fea::kConditioningChannels, h, w}, r.conditioning.to_floats());
    f.tensors.push_back({"conditioning", std::move(c)});
    nlohmann::json meta = {{"scenario", r.spec.to_json()},
                           {"support_template", to_string(r.support)},
                           {"compliance", r.compliance},
                           {"binary_compliance", r.binary_compliance},
                           {"iterations", r.iterations},
                           {"seed", r.seed},
                           {"split", r.split}};
    f.metadata = meta;
    const std::string name = record_name(i);
    io::write_tensor_file(dir / name, f);
    meta["file"] = name;
    entries.push_back(meta);
  }
  nlohmann::json manifest = {{"format", "topo-dataset"}, {"version", 1}, {"count", records.size()},
                             {"records", entries}, {"provenance", provenance}};
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << manifest.dump(2) << '\n';
    if (!os) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

std::vector<DatasetRecord> read_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("missing dataset manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed dataset manifest: ") + e.what());
  }
  std::vector<DatasetRecord> out;
  for (const auto& e : manifest.at("records")) {
    const io::TensorFile f = io::read_tensor_file(dir / e.at("file").get<std::string>());
    DatasetRecord r;
    r.spec = fea::ScenarioSpec::from_json(e.at("scenario"));
    r.support = support_template_from_string(e.at("support_template").get<std::string>());
    r.density = tensor_field(f.get("density"));
    r.binary = tensor_field(f.get("binary"));
    const ad::Tensor& c = f.get("conditioning");
    if (c.rank() != 3 || c.dim(0) != fea::kConditioningChannels) {
      throw std::runtime_error("dataset conditioning must have shape [6, H, W]");
    }
    for (int k = 0; k < fea::kConditioningChannels; ++k) r.conditioning.channels[k] = tensor_field(c, k);
    r.compliance = e.at("compliance").get<double>();
    r.binary_compliance = e.value("binary_compliance", 0.0);
    r.iterations = e.at("iterations").get<int>();
    r.seed = e.at("seed").get<std::uint64_t>();
    r.split = e.value("split", "train");
    if (r.density.nx != r.spec.nel_x || r.density.ny != r.spec.nel_y) {
      throw std::runtime_error("dataset record shape does not match its scenario");
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace topo::simp
