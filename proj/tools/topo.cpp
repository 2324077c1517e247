// Command-line entry point for the pipeline: gen-data, train, sample,
// evaluate, serve and report. Exit codes: 0 success, 1 usage or config
// error, 2 runtime failure, 3 acceptance assertion failure.

#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "topo/pipeline/criteria.hpp"
#include "topo/pipeline/pipeline.hpp"
#include "topo/service/service.hpp"
#include "topo/util/seed.hpp"

namespace fs = std::filesystem;
using namespace topo;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kRuntime = 2, kAssert = 3 };

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string data_dir;
  bool force = false;

  std::optional<int> n;
  std::string which;
  int stage = 1;
  int count = 8;
  bool guided = false;
  std::optional<int> scenarios;
  std::optional<int> per_condition;
  bool assert_thresholds = false;
  std::string host = "127.0.0.1";
  int port = 8080;
  int queue_depth = 2;
};

pipeline::RunConfig load_config(const Options& o) {
  json j = json::object();
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw pipeline::ConfigError("cannot open config " + o.config_path);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw pipeline::ConfigError(o.config_path + ": " + e.what());
    }
  }
  // Flags win over the file.
  if (o.seed) j["seed"] = *o.seed;
  if (!o.data_dir.empty()) j["data_dir"] = o.data_dir;
  if (o.n) j["dataset"]["n"] = *o.n;
  if (o.scenarios) j["evaluation"]["scenarios"] = *o.scenarios;
  if (o.per_condition) j["evaluation"]["per_condition"] = *o.per_condition;
  auto c = pipeline::RunConfig::from_json(j);
  c.validate();
  return c;
}

void persist_config(const pipeline::RunConfig& c) {
  fs::create_directories(c.data_dir);
  json j = c.to_json();
  j.erase("data_dir");
  std::ofstream(c.data_dir / ("run-" + pipeline::config_hash(j) + ".json")) << c.to_json().dump(2) << '\n';
}

std::string file_hash(const fs::path& path) {
  if (path.empty()) return "";
  std::ifstream in(path, std::ios::binary);
  std::ostringstream bytes;
  bytes << in.rdbuf();
  return pipeline::content_hash(bytes.str());
}

int cmd_gen_data(pipeline::Pipeline& p, const Options& o) {
  if (o.force) p.force("dataset");
  const auto dir = p.dataset_dir();
  std::cout << dir.string() << '\n';
  return kOk;
}

int cmd_train(pipeline::Pipeline& p, const Options& o) {
  fs::path out;
  if (o.which == "denoiser") {
    if (o.force) p.force("denoiser");
    out = p.denoiser_path();
  } else if (o.which == "regressor") {
    if (!p.config().regressor.enabled) throw pipeline::ConfigError("the regressor is disabled in this config");
    if (o.force) p.force("regressor");
    out = p.regressor_path();
  } else {
    const auto kind = o.which == "reward-bc" ? rewards::RewardKind::BC : rewards::RewardKind::FM;
    if (o.force) p.force("reward-" + rewards::to_string(kind) + "-" + std::to_string(o.stage));
    out = p.reward_path(kind, o.stage);
    if (out.empty()) {
      std::cerr << "labels hold a single class; no reward model was trained\n";
      return kRuntime;
    }
  }
  std::cout << out.string() << '\n';
  return kOk;
}

int cmd_sample(pipeline::Pipeline& p, const Options& o) {
  const auto& c = p.config();
  const int stage = o.guided ? o.stage : 0;
  const auto models = p.models(stage);
  // Checkpoint contents, not just the config, so retrained models get fresh samples.
  json checkpoints = json::array({file_hash(p.denoiser_path())});
  for (int s = 1; s <= stage; ++s)
    for (auto kind : {rewards::RewardKind::BC, rewards::RewardKind::FM}) checkpoints.push_back(file_hash(p.reward_path(kind, s)));
  json key{{"count", o.count}, {"stage", stage}, {"seed", c.seed}, {"config", c.to_json()}, {"checkpoints", checkpoints}};
  key["config"].erase("data_dir");
  key["config"].erase("evaluation");
  const fs::path out = c.data_dir / ("samples-" + pipeline::config_hash(key));
  if (fs::exists(out / "done.json") && !o.force) {
    std::cout << out.string() << " (exists; pass --force to regenerate)\n";
    return kOk;
  }
  fs::remove_all(out);
  const auto scenarios = pipeline::draw_scenarios(o.count, c.nel_x, c.nel_y, c.dataset.vf_min, c.dataset.vf_max,
                                                  derive_seed(c.seed, 50), "X-");
  const auto res = p.generate(models, pipeline::stack_conditions(scenarios), derive_seed(c.seed, 51));
  pipeline::SampleStore store(out / "samples");
  if (o.guided) fs::create_directories(out / "traces");
  json index = json::array();
  for (int i = 0; i < o.count; ++i) {
    const auto& sc = scenarios[static_cast<std::size_t>(i)];
    store.put({sc.id, sc.id, stage, sc.spec, sc.cond, res.sample.density[static_cast<std::size_t>(i)],
               res.sample.binary[static_cast<std::size_t>(i)]});
    if (o.guided) {
      std::ofstream csv(out / "traces" / (sc.id + ".csv"));
      res.traces[static_cast<std::size_t>(i)].write_csv(csv);
    }
    index.push_back({{"sample_id", sc.id}, {"support", simp::to_string(sc.support)}, {"scenario", sc.spec.to_json()}});
  }
  std::ofstream(out / "done.json") << json{{"key", key}, {"samples", index}}.dump(2) << '\n';
  std::cout << out.string() << '\n';
  return kOk;
}

int cmd_evaluate(pipeline::Pipeline& p, const Options& o) {
  if (o.force) p.force("eval");
  const auto dir = p.evaluate();
  std::ifstream md(dir / "report.md");
  std::cout << md.rdbuf() << '\n' << dir.string() << '\n';
  if (!o.assert_thresholds) return kOk;
  std::ifstream in(dir / "report.json");
  bool all = true;
  for (const auto& c : pipeline::failure_rate_checks(json::parse(in))) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
    all = all && c.pass;
  }
  return all ? kOk : kAssert;
}

int cmd_serve(pipeline::Pipeline& p, const Options& o) {
  const auto& c = p.config();
  const fs::path svc_dir = c.data_dir / "service";
  const auto base = std::make_shared<pipeline::StageModels>(p.models(0));
  const fs::path registry = svc_dir / "registry.json";
  const auto generator = [&p, base, registry, c](int n, std::uint64_t seed) {
    pipeline::StageModels m{0, base->denoiser, base->regressor, {}, {}};
    if (fs::exists(registry)) {
      std::ifstream in(registry);
      const json reg = json::parse(in);
      for (const auto& path : service::registry_members(reg, rewards::RewardKind::BC)) m.bc.push_back(rewards::RewardModel::load(path));
      for (const auto& path : service::registry_members(reg, rewards::RewardKind::FM)) m.fm.push_back(rewards::RewardModel::load(path));
      if (reg.contains("stage")) {
        for (const auto& [k, v] : reg["stage"].items()) m.stage = std::max(m.stage, v.get<int>());
      }
    }
    const auto sc = pipeline::draw_scenarios(1, c.nel_x, c.nel_y, c.dataset.vf_min, c.dataset.vf_max, seed, "S-").front();
    const auto res = p.generate(m, pipeline::stack_conditions({sc}, n), derive_seed(seed, 1));
    char scenario_id[40];
    std::snprintf(scenario_id, sizeof scenario_id, "S-%016llx", static_cast<unsigned long long>(seed));
    service::GeneratedBatch b{"stage-" + std::to_string(m.stage), {}};
    for (int i = 0; i < n; ++i) {
      b.samples.push_back({"", scenario_id, m.stage, sc.spec, sc.cond, res.sample.density[static_cast<std::size_t>(i)],
                           res.sample.binary[static_cast<std::size_t>(i)]});
    }
    return b;
  };
  service::ServiceOptions so;
  so.data_dir = svc_dir;
  so.queue_depth = o.queue_depth;
  so.seed = derive_seed(c.seed, 60);
  so.reports_dir = c.data_dir;
  service::FeedbackService svc(so, generator, service::default_trainer(c));
  service::HttpServer server(svc);
  const int port = server.bind(o.host, o.port);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.start();
  std::cout << "listening on http://" << o.host << ":" << port << std::endl;
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  svc.shutdown();
  std::cout << "stopped" << std::endl;
  return kOk;
}

int cmd_report(const pipeline::RunConfig& c) {
  if (!fs::exists(c.data_dir)) {
    std::cout << "no runs under " << c.data_dir.string() << '\n';
    return kOk;
  }
  std::vector<fs::path> stages;
  for (const auto& e : fs::directory_iterator(c.data_dir)) {
    if (fs::exists(e.path() / "stage.json")) stages.push_back(e.path());
  }
  std::sort(stages.begin(), stages.end());
  fs::path newest_eval;
  fs::file_time_type when{};
  for (const auto& s : stages) {
    std::ifstream in(s / "stage.json");
    const json j = json::parse(in);
    std::cout << s.filename().string() << ": " << j["summary"].dump() << '\n';
    if (s.filename().string().rfind("eval-", 0) == 0 && fs::last_write_time(s / "stage.json") >= when) {
      newest_eval = s;
      when = fs::last_write_time(s / "stage.json");
    }
  }
  if (!newest_eval.empty()) {
    std::ifstream md(newest_eval / "report.md");
    std::cout << '\n' << md.rdbuf();
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Topology diffusion with oracle or human feedback"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("-c,--config", o.config_path, "Run config (JSON); flags override it");
  app.add_option("--seed", o.seed, "Seed for every stochastic stage");
  app.add_option("--data-dir", o.data_dir, "Output root");
  app.add_flag("--force", o.force, "Rebuild the command's stage even if a complete copy exists");

  auto* gen = app.add_subcommand("gen-data", "Generate the SIMP dataset");
  gen->add_option("-n,--n", o.n, "Number of records");
  auto* train = app.add_subcommand("train", "Train a network");
  train->add_option("which", o.which, "denoiser, regressor, reward-bc or reward-fm")
      ->required()
      ->check(CLI::IsMember({"denoiser", "regressor", "reward-bc", "reward-fm"}));
  train->add_option("--stage", o.stage, "Reward stage")->check(CLI::Range(1, 2));
  auto* sample = app.add_subcommand("sample", "Draw designs and write PNGs and tensors");
  sample->add_option("--count", o.count, "Number of designs")->check(CLI::Range(1, 100000));
  sample->add_flag("--guided", o.guided, "Apply reward guidance");
  sample->add_option("--stage", o.stage, "Guidance stage when guided")->check(CLI::Range(1, 2));
  auto* eval = app.add_subcommand("evaluate", "Failure rates of baseline, stage-1 and stage-2 sampling");
  eval->add_option("--scenarios", o.scenarios, "Conditioning inputs");
  eval->add_option("--per-condition", o.per_condition, "Samples per conditioning input");
  eval->add_flag("--assert", o.assert_thresholds, "Exit 3 when the failure-rate thresholds are not met");
  auto* serve = app.add_subcommand("serve", "Run the feedback service");
  serve->add_option("--host", o.host, "Listen address");
  serve->add_option("--port", o.port, "Listen port (0 picks one)");
  serve->add_option("--queue-depth", o.queue_depth, "Pre-generated batches")->check(CLI::Range(0, 64));
  auto* report = app.add_subcommand("report", "Summaries of completed stages and the newest evaluation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    const auto config = load_config(o);
    if (report->parsed()) return cmd_report(config);
    persist_config(config);
    pipeline::Pipeline p(config, &std::cerr);
    if (gen->parsed()) return cmd_gen_data(p, o);
    if (train->parsed()) return cmd_train(p, o);
    if (sample->parsed()) return cmd_sample(p, o);
    if (eval->parsed()) return cmd_evaluate(p, o);
    if (serve->parsed()) return cmd_serve(p, o);
  } catch (const pipeline::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
