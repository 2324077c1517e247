#include "topo/rewards/reward_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "topo/autodiff/checkpoint.hpp"
#include "topo/autodiff/layers.hpp"

namespace topo::rewards {

namespace {

void check_grid(int h, int w, const std::vector<int>& widths) {
  if (widths.size() != 3) throw std::invalid_argument("conv head needs exactly three widths");
  for (int c : widths)
    if (c < 1) throw std::invalid_argument("conv head widths must be positive");
  if (h < 4 || w < 4 || h % 4 || w % 4) throw std::invalid_argument("conv head grid must be a multiple of 4");
}

// conv block x3 (second and third at stride 2) -> global average pool -> dense.
ad::NodeId conv_head(ad::NetBuilder& nb, ad::NodeId in, int cin, const std::vector<int>& widths, int groups) {
  ad::Graph& g = nb.graph();
  ad::NodeId h = in;
  for (int l = 0; l < 3; ++l) {
    const std::string p = "block" + std::to_string(l);
    h = nb.conv(h, p + ".conv", cin, widths[l], 3, l == 0 ? 1 : 2, 1.0f, false);
    h = nb.group_norm(h, p + ".norm", widths[l], groups);
    h = g.silu(h);
    cin = widths[l];
  }
  return nb.dense(g.global_avg_pool(h), "head", cin, 1, 0.5f);
}

void check_batch(const ad::Tensor& x, int h, int w) {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != h || x.dim(3) != w) {
    throw std::invalid_argument("expected x of shape [N,1," + std::to_string(h) + "," + std::to_string(w) +
                                "], got " + ad::shape_string(x.shape()));
  }
}

void check_cond(const ad::Tensor& c, const ad::Tensor& x) {
  if (c.rank() != 4 || c.dim(0) != x.dim(0) || c.dim(1) != 6 || c.dim(2) != x.dim(2) || c.dim(3) != x.dim(3)) {
    throw std::invalid_argument("expected cond of shape [N,6,H,W], got " + ad::shape_string(c.shape()));
  }
}

}  // namespace

std::string to_string(RewardKind k) { return k == RewardKind::BC ? "bc" : "fm"; }

RewardKind reward_kind_from_string(const std::string& s) {
  if (s == "bc" || s == "BC") return RewardKind::BC;
  if (s == "fm" || s == "FM") return RewardKind::FM;
  throw std::invalid_argument("unknown reward kind '" + s + "'");
}

void RewardConfig::validate() const {
  check_grid(height, width, widths);
  if (T < 1) throw std::invalid_argument("reward T must be positive");
  if (mln < 1 || mln > T) throw std::invalid_argument("reward MLN must lie in [1, T]");
  if (stage < 1) throw std::invalid_argument("reward stage must be positive");
}

nlohmann::json RewardConfig::to_json() const {
  return {{"kind", to_string(kind)}, {"height", height}, {"width", width}, {"widths", widths}, {"groups", groups},
          {"T", T}, {"mln", mln}, {"stage", stage}};
}

RewardConfig RewardConfig::from_json(const nlohmann::json& j) {
  RewardConfig c;
  c.kind = reward_kind_from_string(j.at("kind").get<std::string>());
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.groups = j.value("groups", 8);
  c.T = j.at("T").get<int>();
  c.mln = j.at("mln").get<int>();
  c.stage = j.value("stage", 1);
  c.validate();
  return c;
}

RewardModel RewardModel::create(const RewardConfig& config, std::uint64_t seed) {
  config.validate();
  RewardModel m;
  m.config_ = config;
  ad::Graph& g = m.graph_;
  ad::NetBuilder nb(g, m.params_, seed);
  ad::NodeId in = g.input("x");
  if (config.uses_cond()) in = g.concat(in, g.input("cond"));
  in = g.concat(in, g.input("tmap"));
  g.set_output("logit", conv_head(nb, in, config.in_channels(), config.widths, config.groups));
  return m;
}

ad::TensorMap RewardModel::bind(const ad::Tensor& x, const ad::Tensor& cond, const std::vector<int>& t) const {
  check_batch(x, config_.height, config_.width);
  if (static_cast<int>(t.size()) != x.dim(0)) throw std::invalid_argument("reward needs one timestep per item");
  ad::Tensor tmap(x.shape());
  const std::size_t per = x.size() / t.size();
  for (std::size_t n = 0; n < t.size(); ++n) {
    if (t[n] < 0 || t[n] > config_.T) throw std::out_of_range("reward timestep " + std::to_string(t[n]) + " out of range");
    std::fill_n(tmap.values().begin() + static_cast<std::ptrdiff_t>(n * per), per,
                static_cast<float>(t[n]) / static_cast<float>(config_.T));
  }
  ad::TensorMap in{{"x", x}, {"tmap", std::move(tmap)}};
  if (config_.uses_cond()) {
    check_cond(cond, x);
    in.emplace("cond", cond);
  }
  return in;
}

std::vector<double> RewardModel::probability(const ad::Tensor& x, const ad::Tensor& cond,
                                             const std::vector<int>& t) const {
  const auto ev = ad::evaluate(graph_, params_, bind(x, cond, t));
  const ad::Tensor& z = ev.output("logit");
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(z[i])));
  return p;
}

LogRewardGrad RewardModel::log_grad(const ad::Tensor& x, const ad::Tensor& cond, const std::vector<int>& t,
                                    double delta) const {
  const auto ev = ad::evaluate(graph_, params_, bind(x, cond, t));
  const ad::NodeId out = graph_.output("logit");
  const ad::Tensor& z = ev.value(out);
  LogRewardGrad r;
  ad::Tensor seed(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(z[i])));
    r.probability.push_back(p);
    // d log sigmoid(z) / dz = 1 - sigmoid(z); the floor makes the log flat below delta.
    seed[i] = p > delta ? static_cast<float>(1.0 - p) : 0.0f;
  }
  auto g = ad::backward(ev, out, seed, {false, {"x"}});
  r.grad = std::move(g.inputs.at("x"));
  return r;
}

void RewardModel::save(const std::filesystem::path& path, const nlohmann::json& metadata) const {
  nlohmann::json meta = metadata;
  meta["kind"] = "reward";
  meta["config"] = config_.to_json();
  ad::write_checkpoint(path, graph_, params_, meta);
}

RewardModel RewardModel::load(const std::filesystem::path& path) {
  ad::Checkpoint ck = ad::read_checkpoint(path);
  if (ck.metadata.value("kind", "") != "reward") throw ad::FormatError(path.string() + ": checkpoint is not a reward model");
  RewardModel m;
  m.config_ = RewardConfig::from_json(ck.metadata.at("config"));
  m.graph_ = std::move(ck.graph);
  m.params_ = std::move(ck.params);
  return m;
}

void RegressorConfig::validate() const { check_grid(height, width, widths); }

nlohmann::json RegressorConfig::to_json() const {
  return {{"height", height}, {"width", width}, {"widths", widths}, {"groups", groups}};
}

RegressorConfig RegressorConfig::from_json(const nlohmann::json& j) {
  RegressorConfig c;
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.groups = j.value("groups", 8);
  c.validate();
  return c;
}

ComplianceRegressor ComplianceRegressor::create(const RegressorConfig& config, std::uint64_t seed) {
  config.validate();
  ComplianceRegressor m;
  m.config_ = config;
  ad::Graph& g = m.graph_;
  ad::NetBuilder nb(g, m.params_, seed);
  const ad::NodeId in = g.concat(g.input("x"), g.input("cond"));
  g.set_output("log_compliance", conv_head(nb, in, 7, config.widths, config.groups));
  return m;
}

ad::TensorMap ComplianceRegressor::bind(const ad::Tensor& x, const ad::Tensor& cond) const {
  check_batch(x, config_.height, config_.width);
  check_cond(cond, x);
  return {{"x", x}, {"cond", cond}};
}

std::vector<double> ComplianceRegressor::predict_log(const ad::Tensor& x, const ad::Tensor& cond) const {
  const auto ev = ad::evaluate(graph_, params_, bind(x, cond));
  const ad::Tensor& z = ev.output("log_compliance");
  return {z.values().begin(), z.values().end()};
}

ad::Tensor ComplianceRegressor::grad(const ad::Tensor& x, const ad::Tensor& cond) const {
  const auto ev = ad::evaluate(graph_, params_, bind(x, cond));
  const ad::NodeId out = graph_.output("log_compliance");
  auto g = ad::backward(ev, out, ad::Tensor(ev.value(out).shape(), 1.0f), {false, {"x"}});
  return std::move(g.inputs.at("x"));
}

void ComplianceRegressor::save(const std::filesystem::path& path, const nlohmann::json& metadata) const {
  nlohmann::json meta = metadata;
  meta["kind"] = "compliance_regressor";
  meta["config"] = config_.to_json();
  ad::write_checkpoint(path, graph_, params_, meta);
}

ComplianceRegressor ComplianceRegressor::load(const std::filesystem::path& path) {
  ad::Checkpoint ck = ad::read_checkpoint(path);
  if (ck.metadata.value("kind", "") != "compliance_regressor") {
    throw ad::FormatError(path.string() + ": checkpoint is not a compliance regressor");
  }
  ComplianceRegressor m;
  m.config_ = RegressorConfig::from_json(ck.metadata.at("config"));
  m.graph_ = std::move(ck.graph);
  m.params_ = std::move(ck.params);
  return m;
}

}  // namespace topo::rewards
