#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "topo/io/png.hpp"
#include "topo/rewards/evaluation.hpp"
#include "topo/rewards/oracle.hpp"
#include "topo/service/service.hpp"

// After Eigen (see src/service/http.cpp).
#include <httplib.h>

using namespace topo;
using namespace topo::service;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kNx = 16, kNy = 16;

fea::ScenarioSpec cantilever() {
  fea::ScenarioSpec s;
  s.nel_x = kNx;
  s.nel_y = kNy;
  for (int y = 0; y <= kNy; ++y) s.supports.push_back({s.node(0, y), true, true});
  s.loads.push_back({s.node(kNx, kNy / 2), 0.0, -1.0});
  s.volume_fraction = 0.3;
  return s;
}

// A beam from the clamped edge to the load, with a detached block on odd draws.
struct StubGenerator {
  std::atomic<int> stage{0};
  std::atomic<int> calls{0};

  GeneratedBatch operator()(int n, std::uint64_t seed) {
    ++calls;
    const auto spec = cantilever();
    const auto stack = fea::build_conditioning(spec, {});
    const ad::Tensor cond({6, kNy, kNx}, stack.to_floats());
    std::mt19937_64 rng(seed);
    GeneratedBatch b{"stub-stage-" + std::to_string(stage.load()), {}};
    for (int i = 0; i < n; ++i) {
      fea::Field2D f(kNx, kNy);
      for (int x = 0; x < kNx; ++x)
        for (int y = 7; y < 10; ++y) f(x, y) = 1.0;
      if (rng() % 2) {
        const int x0 = 2 + static_cast<int>(rng() % 10);
        for (int y = 1; y < 4; ++y)
          for (int x = x0; x < x0 + 3; ++x) f(x, y) = 1.0;
      }
      b.samples.push_back({"", "stub-" + std::to_string(seed % 1000), stage.load(), spec, cond, f, f});
    }
    return b;
  }
};

pipeline::RunConfig small_run() {
  pipeline::RunConfig c;
  c.nel_x = c.nel_y = kNx;
  c.denoiser.width = c.denoiser.height = kNx;
  c.regressor.config.width = c.regressor.config.height = kNx;
  c.reward.widths = {8, 16, 16};
  c.reward.groups = 4;
  c.reward.train.epochs = 3;
  c.reward.train.set.K = 2;
  c.schedule.T = 50;
  return c;
}

struct Fixture {
  fs::path dir;
  std::shared_ptr<StubGenerator> gen = std::make_shared<StubGenerator>();
  std::unique_ptr<FeedbackService> svc;

  explicit Fixture(const std::string& name, int queue_depth = 0) {
    dir = fs::temp_directory_path() / ("topo_service_" + name);
    fs::remove_all(dir);
    open(queue_depth);
  }
  ~Fixture() {
    svc.reset();
    fs::remove_all(dir);
  }
  void open(int queue_depth = 0) {
    svc.reset();
    ServiceOptions o;
    o.data_dir = dir / "svc";
    o.queue_depth = queue_depth;
    o.reports_dir = dir / "runs";
    auto g = gen;
    svc = std::make_unique<FeedbackService>(
        o, [g](int n, std::uint64_t seed) { return (*g)(n, seed); }, default_trainer(small_run()));
  }
  // Labels every sample of a fresh batch with the geometric oracle.
  json oracle_labels(const std::string& session, int n) {
    const json batch = svc->next_batch(session, n);
    json labels = json::array();
    for (const auto& e : batch["samples"]) {
      const auto s = svc->samples().get(e["sample_id"]);
      const auto v = rewards::oracle_verdict(s.binary, s.spec);
      labels.push_back({{"sample_id", e["sample_id"]}, {"bc_violation", !v.bc_valid}, {"fm_violation", !v.fm_valid}});
    }
    return svc->submit_labels(session, {{"labels", labels}});
  }
};

}  // namespace

TEST_CASE("sessions start empty, are distinct and survive a restart") {
  Fixture fx("sessions");
  const json a = fx.svc->create_session("ann");
  const json b = fx.svc->create_session("ann");
  CHECK(a["session_id"] != b["session_id"]);
  CHECK(a["served"] == 0);
  CHECK(a["labeled"] == 0);
  fx.open();
  const json back = fx.svc->get_session(a["session_id"]);
  CHECK(back["annotator"] == "ann");
  CHECK_THROWS_AS(fx.svc->get_session("nope"), ServiceError);
}

TEST_CASE("a batch shares one scenario and its images decode") {
  Fixture fx("batch");
  const std::string sid = fx.svc->create_session("ann")["session_id"];
  const json batch = fx.svc->next_batch(sid, 20);
  REQUIRE(batch["samples"].size() == 20);
  CHECK(batch["served"] == 20);
  std::set<std::string> ids, scenarios;
  for (const auto& e : batch["samples"]) {
    ids.insert(e["sample_id"].get<std::string>());
    scenarios.insert(e["scenario_id"].get<std::string>());
    const auto img = io::read_png(fx.svc->media(e["sample_id"]));
    CHECK(img.width == kNx);
    CHECK(img.height == kNy);
    CHECK(img.channels == 1);
    const auto cond = io::read_png(fx.svc->media(e["sample_id"].get<std::string>() + "_cond"));
    CHECK(cond.channels == 3);
  }
  CHECK(ids.size() == 20);
  CHECK(scenarios.size() == 1);
  CHECK(fx.svc->get_session(sid)["served"] == 20);

  try {
    fx.svc->next_batch(sid, 33);
    FAIL("expected an error");
  } catch (const ServiceError& e) {
    CHECK(e.status() == 400);
  }
  CHECK_THROWS_AS(fx.svc->next_batch("missing", 2), ServiceError);

  // Integrity sweep: every served id resolves to a tensor and both images.
  for (const auto& id : fx.svc->get_session(sid)["served_ids"]) {
    CHECK(fx.svc->samples().contains(id));
    CHECK(fs::exists(fx.svc->samples().topology_png(id)));
    CHECK(fs::exists(fx.svc->samples().conditions_png(id)));
  }
}

TEST_CASE("labels map violations to y = 0 and the last submission wins") {
  Fixture fx("labels");
  const std::string sid = fx.svc->create_session("ann")["session_id"];
  const json batch = fx.svc->next_batch(sid, 3);
  const std::string id = batch["samples"][0]["sample_id"];
  json ack = fx.svc->submit_labels(sid, {{"labels", {{{"sample_id", id}, {"bc_violation", true}, {"fm_violation", false}}}}});
  CHECK(ack["accepted"] == 1);
  CHECK(ack["labeled"] == 1);
  auto latest = fx.svc->labels().latest();
  CHECK(latest.at(id).y_bc == 0);
  CHECK(latest.at(id).y_fm == 1);
  CHECK(latest.at(id).source == rewards::LabelSource::Human);

  ack = fx.svc->submit_labels(sid, {{"labels", {{{"sample_id", id}, {"bc_violation", false}, {"fm_violation", true}}}}});
  CHECK(ack["labeled"] == 1);
  latest = fx.svc->labels().latest();
  CHECK(latest.size() == 1);
  CHECK(latest.at(id).y_bc == 1);
  CHECK(latest.at(id).y_fm == 0);
  CHECK(fx.svc->labels().all().size() == 2);

  const auto status = [&](const json& body, const std::string& session) {
    try {
      fx.svc->submit_labels(session, body);
    } catch (const ServiceError& e) {
      return e.status();
    }
    return 200;
  };
  CHECK(status({{"labels", {{{"sample_id", "other"}, {"bc_violation", true}, {"fm_violation", true}}}}}, sid) == 404);
  CHECK(status({{"labels", {{{"sample_id", id}, {"bc_violation", "yes"}, {"fm_violation", true}}}}}, sid) == 400);
  CHECK(status({{"nope", 1}}, sid) == 400);
  const std::string other = fx.svc->create_session("b")["session_id"];
  CHECK(status({{"labels", {{{"sample_id", id}, {"bc_violation", true}, {"fm_violation", true}}}}}, other) == 404);
  CHECK(fx.svc->labels().all().size() == 2);

  // Acknowledged labels survive a restart.
  fx.open();
  CHECK(fx.svc->labels().latest().at(id).y_fm == 0);
  CHECK(fx.svc->get_session(sid)["labeled"] == 1);
}

TEST_CASE("retraining fails fast without labels and registers ensembles") {
  Fixture fx("retrain");
  const json empty = fx.svc->trigger_retrain({{"kind", "fm"}, {"stage", 1}});
  CHECK(empty["status"] == "failed");
  CHECK(empty["error"].get<std::string>().find("need at least") != std::string::npos);
  CHECK_THROWS_AS(fx.svc->trigger_retrain({{"kind", "xx"}}), ServiceError);
  CHECK_THROWS_AS(fx.svc->trigger_retrain({{"kind", "bc"}, {"stage", 3}}), ServiceError);

  const std::string sid = fx.svc->create_session("oracle")["session_id"];
  fx.oracle_labels(sid, 30);
  const json j1 = fx.svc->trigger_retrain({{"kind", "fm"}, {"stage", 1}});
  CHECK(j1["samples"] == 30);
  fx.svc->wait_idle();
  const json done = fx.svc->job(j1["job_id"]);
  REQUIRE(done["status"] == "succeeded");
  CHECK(done["metrics"].contains("heldout_accuracy"));
  CHECK(fs::exists(done["checkpoint"].get<std::string>()));

  // Only stage-0 samples exist, so stage 2 has nothing to train on yet.
  CHECK(fx.svc->trigger_retrain({{"kind", "fm"}, {"stage", 2}})["status"] == "failed");
  fx.gen->stage = 1;
  fx.oracle_labels(sid, 30);
  const json j2 = fx.svc->trigger_retrain({{"kind", "fm"}, {"stage", 2}});
  fx.svc->wait_idle();
  CHECK(fx.svc->job(j2["job_id"])["status"] == "succeeded");
  const json stats = fx.svc->stats();
  CHECK(stats["registry"]["ensembles"]["fm"].size() == 2);
  CHECK(registry_members(stats["registry"], rewards::RewardKind::FM).size() == 2);
  CHECK(registry_members(stats["registry"], rewards::RewardKind::BC).empty());

  fx.open();
  CHECK(fx.svc->job(j2["job_id"])["status"] == "succeeded");
}

TEST_CASE("stats count labels and mirror the latest evaluation report") {
  Fixture fx("stats");
  json s = fx.svc->stats();
  CHECK(s["labels"]["bc"]["valid"] == 0);
  CHECK(s["labels"]["fm"]["violation"] == 0);
  CHECK(s["sessions"] == 0);
  CHECK(s["latest_evaluation"].is_null());

  const std::string sid = fx.svc->create_session("ann")["session_id"];
  fx.oracle_labels(sid, 5);
  s = fx.svc->stats();
  CHECK(s["labeled_samples"] == 5);
  CHECK(s["labels"]["bc"]["valid"].get<int>() + s["labels"]["bc"]["violation"].get<int>() == 5);
  CHECK(s["sessions"] == 1);

  const auto spec = cantilever();
  const ad::Tensor cond({6, kNy, kNx}, fea::build_conditioning(spec, {}).to_floats());
  const auto half = [](const ad::Tensor& c, std::uint64_t) {
    std::vector<fea::Field2D> out;
    for (int m = 0; m < c.dim(0); ++m) out.push_back(fea::Field2D(kNx, kNy, m % 2 ? 1.0 : 0.0));
    return out;
  };
  const auto report = rewards::evaluate_failure_rates({{"baseline", half}}, {{"a", spec, cond}}, 4, 1);
  fs::create_directories(fx.dir / "runs" / "eval-abc");
  std::ofstream(fx.dir / "runs" / "eval-abc" / "report.json") << report.to_json().dump();
  s = fx.svc->stats();
  REQUIRE(!s["latest_evaluation"].is_null());
  CHECK(s["latest_evaluation"]["samplers"][0]["bc_rate"].get<double>() == doctest::Approx(report.samplers[0].bc.rate));
  CHECK(s["latest_evaluation"]["samplers"][0]["fm_rate"].get<double>() == doctest::Approx(report.samplers[0].fm.rate));
}

TEST_CASE("pre-generated batches are served from the queue") {
  Fixture fx("prefetch", 1);
  for (int i = 0; i < 200 && fx.gen->calls.load() < 1; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  const std::string sid = fx.svc->create_session("ann")["session_id"];
  const int before = fx.gen->calls.load();
  CHECK(before >= 1);
  const json b = fx.svc->next_batch(sid, 12);
  CHECK(b["samples"].size() == 12);
  for (const auto& e : b["samples"]) CHECK(fx.svc->samples().contains(e["sample_id"]));
  // An oversize request bypasses the queue.
  CHECK(fx.svc->next_batch(sid, 25)["samples"].size() == 25);
}

TEST_CASE("HTTP endpoints round trip") {
  Fixture fx("http");
  HttpServer server(*fx.svc);
  const int port = server.bind("127.0.0.1", 0);
  server.start();
  httplib::Client cli("127.0.0.1", port);

  auto r = cli.Post("/sessions", R"({"annotator": "web"})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 201);
  const std::string sid = json::parse(r->body)["session_id"];

  r = cli.Get("/sessions/" + sid + "/batch?n=4");
  REQUIRE(r);
  REQUIRE(r->status == 200);
  const json batch = json::parse(r->body);
  REQUIRE(batch["samples"].size() == 4);
  const std::string id = batch["samples"][0]["sample_id"];

  r = cli.Get(batch["samples"][0]["topology_png"].get<std::string>());
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(r->get_header_value("Content-Type") == "image/png");
  CHECK(r->body.substr(1, 3) == "PNG");
  CHECK(cli.Get(batch["samples"][0]["conditions_png"].get<std::string>())->status == 200);
  CHECK(cli.Get("/media/unknown.png")->status == 404);

  const json body{{"labels", {{{"sample_id", id}, {"bc_violation", false}, {"fm_violation", true}}}}};
  r = cli.Post("/sessions/" + sid + "/labels", body.dump(), "application/json");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(json::parse(r->body)["labeled"] == 1);
  CHECK(cli.Post("/sessions/" + sid + "/labels", "{bad", "application/json")->status == 400);
  CHECK(cli.Get("/sessions/" + sid + "/batch?n=abc")->status == 400);
  CHECK(cli.Get("/sessions/" + sid + "/batch?n=40")->status == 400);
  CHECK(cli.Get("/sessions/none/batch?n=2")->status == 404);

  r = cli.Post("/retrain", R"({"kind": "bc", "stage": 1})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 202);
  const std::string job = json::parse(r->body)["job_id"];
  r = cli.Get("/jobs/" + job);
  CHECK(json::parse(r->body)["status"] == "failed");
  CHECK(cli.Get("/jobs/none")->status == 404);

  r = cli.Get("/stats");
  REQUIRE(r);
  CHECK(json::parse(r->body)["labels"]["fm"]["violation"] == 1);
  CHECK(cli.Get("/nowhere")->status == 404);
  server.stop();
}
