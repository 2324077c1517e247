#include "topo/pipeline/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "topo/rewards/labels.hpp"
#include "topo/rewards/oracle.hpp"
#include "topo/rewards/training.hpp"
#include "topo/util/seed.hpp"

namespace topo::pipeline {

namespace fs = std::filesystem;
using rewards::RewardKind;

namespace {

// Seed streams of the stages that draw randomness.
enum Stream : std::uint64_t {
  kDataset = 1,
  kDenoiserInit = 2,
  kDenoiserTrain = 3,
  kRegressor = 4,
  kLabelScenarios = 10,
  kLabelSampling = 20,
  kRewardTrain = 40,
  kEvalScenarios = 30,
  kEvalSampling = 31,
};

std::uint64_t sub_seed(std::uint64_t base, Stream stream, std::uint64_t extra = 0) {
  return derive_seed(derive_seed(base, stream), extra);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << j.dump(2) << '\n';
    if (!out) throw StageError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

ad::Tensor cond_tensor(const fea::ConditioningStack& c) {
  return ad::Tensor({fea::kConditioningChannels, c.height(), c.width()}, c.to_floats());
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
  to = std::min(to, v.size());
  if (from >= to) return 0.0;
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(from), v.begin() + static_cast<std::ptrdiff_t>(to), 0.0) /
         static_cast<double>(to - from);
}

std::string kind_name(RewardKind k) { return rewards::to_string(k); }

}  // namespace

std::vector<Scenario> draw_scenarios(int n, int nel_x, int nel_y, double vf_min, double vf_max, std::uint64_t seed,
                                     const std::string& prefix) {
  std::mt19937_64 rng(seed);
  simp::ScenarioOptions opts;
  opts.nel_x = nel_x;
  opts.nel_y = nel_y;
  opts.vf_min = vf_min;
  opts.vf_max = vf_max;
  std::vector<Scenario> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto draw = simp::random_scenario(rng, opts);
    char id[32];
    std::snprintf(id, sizeof id, "%s%05d", prefix.c_str(), i);
    out.push_back({id, draw.support, draw.spec, cond_tensor(fea::build_conditioning(draw.spec, {}))});
  }
  return out;
}

ad::Tensor stack_conditions(const std::vector<Scenario>& scenarios, int k) {
  std::vector<ad::Tensor> parts;
  for (const auto& s : scenarios) {
    const ad::Tensor one = s.cond.reshaped({1, s.cond.dim(0), s.cond.dim(1), s.cond.dim(2)});
    for (int j = 0; j < k; ++j) parts.push_back(one);
  }
  return ad::Tensor::stack_batch(parts);
}

guidance::GuidanceModels StageModels::view() const {
  guidance::GuidanceModels m;
  for (const auto& r : bc) m.bc.push_back(&r);
  for (const auto& r : fm) m.fm.push_back(&r);
  if (regressor) m.compliance = &*regressor;
  return m;
}

guidance::GuidanceConfig stage_guidance(const guidance::GuidanceConfig& base, int stage) {
  guidance::GuidanceConfig g = base;
  if (stage == 0) g.lambda_bc = g.lambda_fm = 0.0;
  return g;
}

Pipeline::Pipeline(RunConfig config, std::ostream* log)
    : config_(std::move(config)), schedule_(config_.make_schedule()), log_(log) {
  config_.validate();
}

std::string Pipeline::rel(const fs::path& p) const {
  return p.empty() ? std::string() : p.lexically_relative(config_.data_dir).generic_string();
}

void Pipeline::say(const std::string& line) const {
  if (log_) *log_ << line << std::endl;
}

// Upstream outputs named in `inputs` contribute the contents of their
// stage.json, so rebuilding an upstream stage re-keys everything below it.
void Pipeline::collect_upstream(const nlohmann::json& j, nlohmann::json& stamps) const {
  if (j.is_structured()) {
    for (const auto& v : j) collect_upstream(v, stamps);
    return;
  }
  if (!j.is_string() || j.get<std::string>().empty()) return;
  fs::path q = config_.data_dir / j.get<std::string>();
  std::error_code ec;
  if (!fs::exists(q, ec)) return;
  for (; q.has_relative_path() && q != config_.data_dir; q = q.parent_path()) {
    if (fs::exists(q / "stage.json")) {
      std::ifstream in(q / "stage.json", std::ios::binary);
      std::ostringstream text;
      text << in.rdbuf();
      stamps[j.get<std::string>()] = content_hash(text.str());
      return;
    }
  }
}

Pipeline::Stage Pipeline::open_stage(const std::string& name, const nlohmann::json& inputs) {
  Stage s;
  nlohmann::json stamps = nlohmann::json::object();
  collect_upstream(inputs, stamps);
  s.dir = config_.data_dir / (name + "-" + config_hash({{"inputs", inputs}, {"upstream", stamps}}));
  const auto f = std::find(force_.begin(), force_.end(), name);
  if (f != force_.end()) {
    force_.erase(f);
    fs::remove_all(s.dir);
  }
  s.done = fs::exists(s.dir / "stage.json");
  if (s.done) {
    if (std::find(announced_.begin(), announced_.end(), s.dir) == announced_.end()) {
      announced_.push_back(s.dir);
      say("[" + name + "] reusing " + s.dir.string());
    }
  } else {
    fs::remove_all(s.dir);  // partial output of an interrupted run
    fs::create_directories(s.dir);
    say("[" + name + "] building " + s.dir.string());
  }
  return s;
}

void Pipeline::finish_stage(const Stage& s, const nlohmann::json& inputs, const nlohmann::json& summary) {
  write_json(s.dir / "stage.json", {{"inputs", inputs}, {"summary", summary}});
}

nlohmann::json Pipeline::dataset_inputs() const {
  const auto j = config_.to_json();
  return {{"grid", j["grid"]}, {"dataset", j["dataset"]}, {"seed", config_.seed}};
}

fs::path Pipeline::dataset_dir() {
  const auto inputs = dataset_inputs();
  const Stage s = open_stage("dataset", inputs);
  if (!s.done) {
    simp::DatasetOptions opts;
    opts.scenario.nel_x = config_.nel_x;
    opts.scenario.nel_y = config_.nel_y;
    opts.scenario.vf_min = config_.dataset.vf_min;
    opts.scenario.vf_max = config_.dataset.vf_max;
    opts.scenario.templates = simp::training_templates(opts.holdout);
    opts.simp = config_.dataset.simp;
    simp::DatasetStats stats;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<simp::DatasetRecord> records;
    try {
      records = simp::generate_dataset(config_.dataset.n, sub_seed(config_.seed, kDataset), opts, &stats);
    } catch (const simp::DatasetError& e) {
      throw StageError(e.what());
    }
    simp::write_dataset(s.dir / "data", records, inputs);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    say("[dataset] " + std::to_string(records.size()) + " records from " + std::to_string(stats.attempts) +
        " attempts in " + std::to_string(static_cast<int>(secs)) + " s");
    finish_stage(s, inputs,
                 {{"records", records.size()},
                  {"attempts", stats.attempts},
                  {"rejected_unconverged", stats.rejected_unconverged},
                  {"rejected_oracle", stats.rejected_oracle},
                  {"rejected_volume", stats.rejected_volume},
                  {"rejected_fea", stats.rejected_fea},
                  {"seconds", secs}});
  }
  return s.dir / "data";
}

nlohmann::json Pipeline::denoiser_inputs() {
  const auto j = config_.to_json();
  return {{"dataset", rel(dataset_dir())}, {"schedule", j["schedule"]}, {"denoiser", j["denoiser"]},
          {"architecture", diffusion::kDenoiserArchitecture}, {"seed", config_.seed}};
}

fs::path Pipeline::denoiser_path() {
  const auto inputs = denoiser_inputs();
  const Stage s = open_stage("denoiser", inputs);
  const fs::path ckpt = s.dir / "denoiser.tnsr";
  if (s.done) return ckpt;
  const auto records = simp::read_dataset(config_.data_dir / inputs["dataset"].get<std::string>());
  std::vector<ad::Tensor> xs, cs;
  for (const auto& r : records) {
    xs.push_back(diffusion::from_density(r.density));
    cs.push_back(cond_tensor(r.conditioning).reshaped({1, fea::kConditioningChannels, config_.nel_y, config_.nel_x}));
  }
  diffusion::TrainingData data{ad::Tensor::stack_batch(xs), ad::Tensor::stack_batch(cs)};
  auto model = diffusion::Denoiser::create(config_.denoiser, sub_seed(config_.seed, kDenoiserInit));
  auto opts = config_.denoiser_train;
  opts.seed = sub_seed(config_.seed, kDenoiserTrain, config_.denoiser_train.seed);
  const auto t0 = std::chrono::steady_clock::now();
  opts.progress = [&](int step, double loss) {
    if ((step + 1) % 100 == 0 || step == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      char buf[128];
      std::snprintf(buf, sizeof buf, "[denoiser] step %d/%d loss %.4f (%.0f s)", step + 1, opts.steps, loss, secs);
      say(buf);
    }
  };
  diffusion::DenoiserTrainResult res;
  try {
    res = diffusion::train_denoiser(model, data, schedule_, opts);
  } catch (const diffusion::DivergenceError& e) {
    throw StageError(e.what());
  }
  {
    std::ofstream csv(s.dir / "loss.csv");
    csv << "step,loss\n";
    for (std::size_t i = 0; i < res.losses.size(); ++i) csv << i << ',' << res.losses[i] << '\n';
  }
  const std::size_t n = res.losses.size(), w = std::min<std::size_t>(100, n);
  const nlohmann::json summary{{"records", records.size()},
                               {"steps", n},
                               {"first_loss", mean_of(res.losses, 0, w)},
                               {"last_loss", mean_of(res.losses, n - w, n)},
                               {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
  model.save(ckpt, {{"schedule", schedule_.to_json()}, {"training", summary}});
  finish_stage(s, inputs, summary);
  return ckpt;
}

nlohmann::json Pipeline::regressor_inputs() {
  const auto j = config_.to_json();
  return {{"dataset", rel(dataset_dir())}, {"regressor", j["regressor"]}, {"seed", config_.seed}};
}

fs::path Pipeline::regressor_path() {
  if (!config_.regressor.enabled) return {};
  const auto inputs = regressor_inputs();
  const Stage s = open_stage("regressor", inputs);
  const fs::path ckpt = s.dir / "regressor.tnsr";
  if (s.done) return ckpt;
  const auto records = simp::read_dataset(config_.data_dir / inputs["dataset"].get<std::string>());
  std::vector<rewards::ComplianceSample> samples;
  for (const auto& r : records) samples.push_back({r.binary, cond_tensor(r.conditioning), r.binary_compliance});
  auto opts = config_.regressor.train;
  opts.seed = sub_seed(config_.seed, kRegressor, opts.seed);
  rewards::RegressorTrainResult res = [&] {
    try {
      return rewards::train_compliance_regressor(config_.regressor.config, samples, opts);
    } catch (const std::invalid_argument& e) {
      throw StageError(std::string("regressor: ") + e.what());
    }
  }();
  const auto metrics = res.metrics.to_json();
  say("[regressor] held-out median relative error " + std::to_string(res.metrics.heldout_median_rel_error));
  res.model.save(ckpt, {{"metrics", metrics}});
  finish_stage(s, inputs, metrics);
  return ckpt;
}

nlohmann::json Pipeline::labels_inputs(int stage) {
  const auto j = config_.to_json();
  nlohmann::json in{{"stage", stage},
                    {"denoiser", rel(denoiser_path())},
                    {"regressor", rel(regressor_path())},
                    {"labels_per_stage", config_.reward.labels_per_stage},
                    {"pool", config_.reward.pool_size()},
                    {"grid", j["grid"]},
                    {"vf", {config_.dataset.vf_min, config_.dataset.vf_max}},
                    {"schedule", j["schedule"]},
                    {"guidance", stage_guidance(config_.guidance, stage - 1).to_json()},
                    {"seed", config_.seed}};
  if (stage == 2) {
    in["rewards"] = {rel(reward_path(RewardKind::BC, 1)), rel(reward_path(RewardKind::FM, 1))};
  }
  return in;
}

fs::path Pipeline::labels_dir(int stage) {
  if (stage != 1 && stage != 2) throw std::invalid_argument("label stages are 1 and 2");
  const auto inputs = labels_inputs(stage);
  const Stage s = open_stage("labels" + std::to_string(stage), inputs);
  if (s.done) return s.dir;
  const StageModels m = models(stage - 1);
  const int n = config_.reward.labels_per_stage;
  const int pool = config_.reward.pool_size();
  const auto scenarios = draw_scenarios(pool, config_.nel_x, config_.nel_y, config_.dataset.vf_min,
                                        config_.dataset.vf_max, sub_seed(config_.seed, kLabelScenarios, stage),
                                        "L" + std::to_string(stage) + "-");
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = generate(m, stack_conditions(scenarios), sub_seed(config_.seed, kLabelSampling, stage));
  std::vector<rewards::ValidityVerdict> verdicts;
  for (int i = 0; i < pool; ++i) {
    verdicts.push_back(rewards::oracle_verdict(res.sample.binary[static_cast<std::size_t>(i)],
                                               scenarios[static_cast<std::size_t>(i)].spec));
  }
  int pool_bc = 0, pool_fm = 0;
  for (const auto& v : verdicts) {
    pool_bc += !v.bc_valid;
    pool_fm += !v.fm_valid;
  }
  SampleStore store(s.dir / "samples");
  rewards::LabelStore labels(s.dir / "labels.jsonl");
  int bc_ok = 0, fm_ok = 0;
  std::vector<rewards::LabelRecord> records;
  for (const std::size_t i : rewards::select_for_labeling(verdicts, n)) {
    const auto& sc = scenarios[i];
    const auto& binary = res.sample.binary[i];
    store.put({sc.id, sc.id, stage - 1, sc.spec, sc.cond, res.sample.density[i], binary});
    const auto& v = verdicts[i];
    bc_ok += v.bc_valid;
    fm_ok += v.fm_valid;
    records.push_back({sc.id, sc.id, rewards::LabelSource::Oracle, v.bc_valid ? 1 : 0, v.fm_valid ? 1 : 0, "oracle",
                       rewards::utc_timestamp()});
  }
  labels.append(records);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  say("[labels" + std::to_string(stage) + "] pool of " + std::to_string(pool) + " with " + std::to_string(pool_bc) +
      " bc and " + std::to_string(pool_fm) + " fm violations; labeled " + std::to_string(n) + ", bc valid " +
      std::to_string(bc_ok) + ", fm valid " + std::to_string(fm_ok) + " (" + std::to_string(static_cast<int>(secs)) +
      " s)");
  finish_stage(s, inputs,
               {{"samples", n},
                {"pool", pool},
                {"pool_bc_violations", pool_bc},
                {"pool_fm_violations", pool_fm},
                {"bc_valid", bc_ok},
                {"fm_valid", fm_ok},
                {"seconds", secs}});
  return s.dir;
}

nlohmann::json Pipeline::reward_inputs(RewardKind kind, int stage) {
  const auto j = config_.to_json();
  return {{"labels", rel(labels_dir(stage))},
          {"kind", kind_name(kind)},
          {"model", config_.reward_config(kind, stage).to_json()},
          {"train", j["reward"]["train"]},
          {"seed", config_.seed}};
}

fs::path Pipeline::reward_path(RewardKind kind, int stage) {
  const auto inputs = reward_inputs(kind, stage);
  const std::string name = "reward-" + kind_name(kind) + "-" + std::to_string(stage);
  const Stage s = open_stage(name, inputs);
  const fs::path ckpt = s.dir / "reward.tnsr";
  if (s.done) return fs::exists(ckpt) ? ckpt : fs::path{};
  const fs::path ldir = config_.data_dir / inputs["labels"].get<std::string>();
  const auto samples = labeled_samples(rewards::LabelStore(ldir / "labels.jsonl"), SampleStore(ldir / "samples"), kind);
  const int pos = static_cast<int>(std::count_if(samples.begin(), samples.end(), [](const auto& x) { return x.y == 1; }));
  const int neg = static_cast<int>(samples.size()) - pos;
  if (pos < 2 || neg < 2) {
    const std::string why = "only " + std::to_string(pos) + " valid and " + std::to_string(neg) +
                            " violating samples; no " + kind_name(kind) + " reward for stage " + std::to_string(stage);
    say("[" + name + "] " + why);
    finish_stage(s, inputs, {{"skipped", why}, {"valid", pos}, {"violating", neg}});
    return {};
  }
  auto opts = config_.reward.train;
  opts.seed = sub_seed(config_.seed, kRewardTrain, opts.seed * 16 + static_cast<std::uint64_t>(kind) * 4 +
                                                       static_cast<std::uint64_t>(stage));
  opts.set.seed = derive_seed(opts.seed, opts.set.seed);
  const auto res = rewards::train_reward(config_.reward_config(kind, stage), samples, schedule_, opts);
  auto metrics = res.metrics.to_json();
  metrics["valid"] = pos;
  metrics["violating"] = neg;
  say("[" + name + "] held-out accuracy " + std::to_string(res.metrics.heldout_accuracy) + " on " +
      std::to_string(res.metrics.heldout_samples) + " samples");
  res.model.save(ckpt, {{"metrics", metrics}});
  finish_stage(s, inputs, metrics);
  return ckpt;
}

StageModels Pipeline::models(int stage) {
  if (stage < 0 || stage > 2) throw std::invalid_argument("guidance stages are 0, 1 and 2");
  StageModels m{stage, diffusion::Denoiser::load(denoiser_path()), std::nullopt, {}, {}};
  if (const auto r = regressor_path(); !r.empty()) m.regressor = rewards::ComplianceRegressor::load(r);
  for (int s = 1; s <= stage; ++s) {
    if (const auto p = reward_path(RewardKind::BC, s); !p.empty()) m.bc.push_back(rewards::RewardModel::load(p));
    if (const auto p = reward_path(RewardKind::FM, s); !p.empty()) m.fm.push_back(rewards::RewardModel::load(p));
  }
  return m;
}

guidance::CensoredResult Pipeline::generate(const StageModels& models, const ad::Tensor& cond, std::uint64_t seed,
                                            int first_chain) const {
  diffusion::SampleOptions opt;
  opt.seed = seed;
  opt.chunk = config_.evaluation.chunk;
  opt.first_chain = first_chain;
  return guidance::censored_sample(models.denoiser, cond, schedule_, models.view(),
                                   stage_guidance(config_.guidance, models.stage), opt);
}

fs::path Pipeline::evaluate() {
  const auto j = config_.to_json();
  StageModels stages[3] = {models(0), models(1), models(2)};
  nlohmann::json members = nlohmann::json::array();
  for (int s = 1; s <= 2; ++s) {
    members.push_back({rel(reward_path(RewardKind::BC, s)), rel(reward_path(RewardKind::FM, s))});
  }
  const nlohmann::json inputs{{"denoiser", rel(denoiser_path())},
                              {"regressor", rel(regressor_path())},
                              {"rewards", members},
                              {"guidance", j["guidance"]},
                              {"schedule", j["schedule"]},
                              {"grid", j["grid"]},
                              {"vf", {config_.dataset.vf_min, config_.dataset.vf_max}},
                              {"evaluation", j["evaluation"]},
                              {"seed", config_.seed}};
  const Stage s = open_stage("eval", inputs);
  if (s.done) return s.dir;
  const auto scenarios =
      draw_scenarios(config_.evaluation.scenarios, config_.nel_x, config_.nel_y, config_.dataset.vf_min,
                     config_.dataset.vf_max, sub_seed(config_.seed, kEvalScenarios), "E-");
  std::vector<rewards::EvalScenario> eval;
  for (const auto& sc : scenarios) eval.push_back({sc.id + "-" + simp::to_string(sc.support), sc.spec, sc.cond});
  std::vector<rewards::NamedSampler> samplers;
  const char* names[3] = {"baseline", "stage-1", "stage-2"};
  for (int st = 0; st < 3; ++st) {
    samplers.push_back({names[st], [this, &stages, st, names](const ad::Tensor& cond, std::uint64_t seed) {
                          const auto t0 = std::chrono::steady_clock::now();
                          auto out = generate(stages[st], cond, seed).sample.binary;
                          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                          say(std::string("[eval] ") + names[st] + ": " + std::to_string(out.size()) + " samples in " +
                              std::to_string(static_cast<int>(secs)) + " s");
                          return out;
                        }});
  }
  const auto report =
      rewards::evaluate_failure_rates(samplers, eval, config_.evaluation.per_condition, sub_seed(config_.seed, kEvalSampling));
  nlohmann::json rj = report.to_json();
  rj["members"] = {{"stage-1", {{"bc", stages[1].bc.size()}, {"fm", stages[1].fm.size()}}},
                   {"stage-2", {{"bc", stages[2].bc.size()}, {"fm", stages[2].fm.size()}}}};
  write_json(s.dir / "report.json", rj);
  {
    std::ofstream md(s.dir / "report.md");
    md << report.to_markdown();
  }
  nlohmann::json summary = nlohmann::json::object();
  for (const auto& r : report.samplers) summary[r.name] = {{"bc_rate", r.bc.rate}, {"fm_rate", r.fm.rate}};
  finish_stage(s, inputs, summary);
  return s.dir;
}

}  // namespace topo::pipeline
