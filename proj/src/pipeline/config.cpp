#include "topo/pipeline/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace topo::pipeline {

namespace {

nlohmann::json reward_train_json(const rewards::RewardTrainOptions& o) { return o.to_json(); }

rewards::RewardTrainOptions reward_train_from(const nlohmann::json& j) {
  rewards::RewardTrainOptions o;
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.learning_rate = j.value("learning_rate", o.learning_rate);
  o.holdout_fraction = j.value("holdout_fraction", o.holdout_fraction);
  o.seed = j.value("seed", o.seed);
  if (j.contains("set")) {
    const auto& s = j.at("set");
    o.set.K = s.value("K", o.set.K);
    o.set.flip = s.value("flip", o.set.flip);
    o.set.jitter = s.value("jitter", o.set.jitter);
    o.set.jitter_sigma = s.value("jitter_sigma", o.set.jitter_sigma);
    o.set.seed = s.value("seed", o.set.seed);
  }
  return o;
}

nlohmann::json regressor_train_json(const rewards::RegressorTrainOptions& o) {
  return {{"epochs", o.epochs}, {"batch_size", o.batch_size}, {"learning_rate", o.learning_rate},
          {"holdout_fraction", o.holdout_fraction}, {"seed", o.seed}};
}

rewards::RegressorTrainOptions regressor_train_from(const nlohmann::json& j) {
  rewards::RegressorTrainOptions o;
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.learning_rate = j.value("learning_rate", o.learning_rate);
  o.holdout_fraction = j.value("holdout_fraction", o.holdout_fraction);
  o.seed = j.value("seed", o.seed);
  return o;
}

diffusion::DenoiserTrainOptions denoiser_train_from(const nlohmann::json& j) {
  diffusion::DenoiserTrainOptions o;
  o.steps = j.value("steps", o.steps);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.learning_rate = j.value("learning_rate", o.learning_rate);
  o.cosine_decay = j.value("cosine_decay", o.cosine_decay);
  o.seed = j.value("seed", o.seed);
  return o;
}

}  // namespace

RunConfig::RunConfig() {
  denoiser.width = regressor.config.width = nel_x;
  denoiser.height = regressor.config.height = nel_y;
}

void RunConfig::validate() const {
  if (nel_x < 4 || nel_y < 4) throw ConfigError("grid must be at least 4 x 4");
  if (denoiser.width != nel_x || denoiser.height != nel_y) throw ConfigError("denoiser size must match the grid");
  if (regressor.config.width != nel_x || regressor.config.height != nel_y) {
    throw ConfigError("regressor size must match the grid");
  }
  if (dataset.n < 1) throw ConfigError("dataset.n must be positive");
  if (!(0.0 < dataset.vf_min && dataset.vf_min <= dataset.vf_max && dataset.vf_max < 1.0)) {
    throw ConfigError("volume fraction range must satisfy 0 < vf_min <= vf_max < 1");
  }
  if (reward.labels_per_stage < 10) throw ConfigError("reward.labels_per_stage must be at least 10");
  if (reward.label_pool < 0 || reward.pool_size() < reward.labels_per_stage) {
    throw ConfigError("reward.label_pool must be 0 or at least labels_per_stage");
  }
  if (evaluation.scenarios < 1 || evaluation.per_condition < 1 || evaluation.chunk < 1) {
    throw ConfigError("evaluation counts must be positive");
  }
  if (denoiser_train.steps < 1 || denoiser_train.batch_size < 1) throw ConfigError("denoiser training needs steps");
  try {
    dataset.simp.validate();
    denoiser.validate();
    regressor.config.validate();
    reward_config(rewards::RewardKind::BC, 1).validate();
    reward_config(rewards::RewardKind::FM, 1).validate();
    make_schedule();
    guidance.validate(schedule.T);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

diffusion::NoiseSchedule RunConfig::make_schedule() const { return diffusion::make_schedule(schedule.T, schedule.kind); }

rewards::RewardConfig RunConfig::reward_config(rewards::RewardKind kind, int stage) const {
  rewards::RewardConfig c;
  c.kind = kind;
  c.height = nel_y;
  c.width = nel_x;
  c.widths = reward.widths;
  c.groups = reward.groups;
  c.T = schedule.T;
  const auto g = guidance.resolved(schedule.T);
  c.mln = kind == rewards::RewardKind::BC ? g.mln_bc : g.mln_fm;
  c.stage = stage;
  return c;
}

nlohmann::json RunConfig::to_json() const {
  return {
      {"seed", seed},
      {"data_dir", data_dir.string()},
      {"grid", {{"nel_x", nel_x}, {"nel_y", nel_y}}},
      {"dataset", {{"n", dataset.n}, {"vf_min", dataset.vf_min}, {"vf_max", dataset.vf_max}, {"simp", dataset.simp.to_json()}}},
      {"schedule", {{"T", schedule.T}, {"kind", diffusion::to_string(schedule.kind)}}},
      {"denoiser", {{"model", denoiser.to_json()}, {"train", denoiser_train.to_json()}}},
      {"regressor",
       {{"enabled", regressor.enabled}, {"model", regressor.config.to_json()}, {"train", regressor_train_json(regressor.train)}}},
      {"reward",
       {{"widths", reward.widths},
        {"groups", reward.groups},
        {"labels_per_stage", reward.labels_per_stage},
        {"label_pool", reward.label_pool},
        {"train", reward_train_json(reward.train)}}},
      {"guidance", guidance.to_json()},
      {"evaluation",
       {{"scenarios", evaluation.scenarios}, {"per_condition", evaluation.per_condition}, {"chunk", evaluation.chunk}}},
  };
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"seed",      "data_dir", "grid",   "dataset",  "schedule", "denoiser",
                                           "regressor", "reward",   "guidance", "evaluation"};
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.data_dir = j.value("data_dir", c.data_dir.string());
    if (j.contains("grid")) {
      c.nel_x = j["grid"].value("nel_x", c.nel_x);
      c.nel_y = j["grid"].value("nel_y", c.nel_y);
    }
    c.denoiser.width = c.regressor.config.width = c.nel_x;
    c.denoiser.height = c.regressor.config.height = c.nel_y;
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      c.dataset.n = d.value("n", c.dataset.n);
      c.dataset.vf_min = d.value("vf_min", c.dataset.vf_min);
      c.dataset.vf_max = d.value("vf_max", c.dataset.vf_max);
      if (d.contains("simp")) c.dataset.simp = simp::SimpOptions::from_json(d["simp"]);
    }
    if (j.contains("schedule")) {
      c.schedule.T = j["schedule"].value("T", c.schedule.T);
      c.schedule.kind = diffusion::schedule_kind_from_string(j["schedule"].value("kind", std::string("linear")));
    }
    if (j.contains("denoiser")) {
      const auto& d = j["denoiser"];
      if (d.contains("model")) {
        nlohmann::json m = c.denoiser.to_json();
        m.update(d["model"]);
        c.denoiser = diffusion::DenoiserConfig::from_json(m);
      }
      if (d.contains("train")) c.denoiser_train = denoiser_train_from(d["train"]);
    }
    if (j.contains("regressor")) {
      const auto& r = j["regressor"];
      c.regressor.enabled = r.value("enabled", c.regressor.enabled);
      if (r.contains("model")) {
        nlohmann::json m = c.regressor.config.to_json();
        m.update(r["model"]);
        c.regressor.config = rewards::RegressorConfig::from_json(m);
      }
      if (r.contains("train")) c.regressor.train = regressor_train_from(r["train"]);
    }
    if (j.contains("reward")) {
      const auto& r = j["reward"];
      c.reward.widths = r.value("widths", c.reward.widths);
      c.reward.groups = r.value("groups", c.reward.groups);
      c.reward.labels_per_stage = r.value("labels_per_stage", c.reward.labels_per_stage);
      c.reward.label_pool = r.value("label_pool", c.reward.label_pool);
      if (r.contains("train")) c.reward.train = reward_train_from(r["train"]);
    }
    if (j.contains("guidance")) c.guidance = guidance::GuidanceConfig::from_json(j["guidance"]);
    if (j.contains("evaluation")) {
      const auto& e = j["evaluation"];
      c.evaluation.scenarios = e.value("scenarios", c.evaluation.scenarios);
      c.evaluation.per_condition = e.value("per_condition", c.evaluation.per_condition);
      c.evaluation.chunk = e.value("chunk", c.evaluation.chunk);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string config_hash(const nlohmann::json& j) { return content_hash(j.dump()); }

std::string content_hash(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace topo::pipeline
