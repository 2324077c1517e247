#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "topo/io/png.hpp"
#include "topo/simp/dataset.hpp"
#include "topo/rewards/oracle.hpp"

#include <httplib.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "topo_cli_test";

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(TOPO_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p);
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Last non-empty output line, which the commands use for the output path.
std::string last_line(const std::string& out) {
  std::istringstream in(out);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return last;
}

fs::path tiny_config() {
  fs::create_directories(kRoot);
  const json c{{"seed", 3},
               {"data_dir", (kRoot / "runs").string()},
               {"grid", {{"nel_x", 16}, {"nel_y", 16}}},
               {"dataset", {{"n", 60}}},
               {"schedule", {{"T", 30}}},
               {"denoiser",
                {{"model", {{"widths", {8, 16}}, {"time_dim", 16}, {"groups", 4}}},
                 {"train", {{"steps", 60}, {"batch_size", 8}, {"learning_rate", 0.003}}}}},
               {"regressor", {{"model", {{"widths", {8, 16, 16}}, {"groups", 4}}}, {"train", {{"epochs", 3}}}}},
               {"reward", {{"widths", {8, 16, 16}}, {"groups", 4}, {"labels_per_stage", 30}, {"label_pool", 40}, {"train", {{"epochs", 3}}}}},
               {"evaluation", {{"scenarios", 4}, {"per_condition", 2}}}};
  const fs::path p = kRoot / "tiny.json";
  std::ofstream(p) << c.dump(2);
  return p;
}

}  // namespace

TEST_CASE("usage and config errors exit with 1") {
  CHECK(run("").code == 1);
  CHECK(run("frobnicate").code == 1);
  CHECK(run("train nonsense").code == 1);
  fs::create_directories(kRoot);
  std::ofstream(kRoot / "bad.json") << R"({"grid": {"nel_x": 16}, "typo": 1})";
  const auto r = run("--config " + (kRoot / "bad.json").string() + " gen-data");
  CHECK(r.code == 1);
  CHECK(r.out.find("unknown config key 'typo'") != std::string::npos);
  std::ofstream(kRoot / "broken.json") << "{";
  CHECK(run("--config " + (kRoot / "broken.json").string() + " gen-data").code == 1);
}

TEST_CASE("pipeline commands end to end") {
  fs::remove_all(kRoot);
  const std::string cfg = "--config " + tiny_config().string();

  // gen-data: manifest lists n records, all oracle-valid, and a rerun is byte-identical.
  auto r = run(cfg + " gen-data");
  REQUIRE_MESSAGE(r.code == 0, r.out);
  const fs::path data = last_line(r.out);
  const json manifest = json::parse(slurp(data / "manifest.json"));
  CHECK(manifest["records"].size() == 60);
  const auto records = topo::simp::read_dataset(data);
  for (const auto& rec : records) {
    const auto v = topo::rewards::oracle_verdict(rec.binary, rec.spec);
    CHECK((v.bc_valid && v.fm_valid));
  }
  const std::string first = slurp(data / "record_00007.tnsr");
  r = run(cfg + " gen-data");
  CHECK(r.out.find("reusing") != std::string::npos);
  r = run(cfg + " --force gen-data");
  REQUIRE(r.code == 0);
  CHECK(slurp(data / "record_00007.tnsr") == first);
  CHECK(slurp(data / "manifest.json") == manifest.dump(2) + "\n");

  // train: checkpoints carry the checkpoint magic, losses go to CSV.
  r = run(cfg + " train denoiser");
  REQUIRE_MESSAGE(r.code == 0, r.out);
  const fs::path ckpt = last_line(r.out);
  CHECK(slurp(ckpt).rfind("TOPOCKPT", 0) == 0);
  CHECK(fs::exists(ckpt.parent_path() / "loss.csv"));
  r = run(cfg + " train reward-fm");
  const bool fm_trained = r.code == 0;
  if (fm_trained) {
    CHECK(r.out.find("held-out accuracy") != std::string::npos);
  } else {
    CHECK(r.code == 2);
    CHECK(r.out.find("single class") != std::string::npos);
  }
  r = run(cfg + " train reward-bc --stage 3");
  CHECK(r.code == 1);

  // sample: count designs with images; unguided output reproduces exactly.
  r = run(cfg + " sample --count 3");
  REQUIRE_MESSAGE(r.code == 0, r.out);
  const fs::path plain = last_line(r.out);
  int pngs = 0;
  for (const auto& e : fs::directory_iterator(plain / "samples")) {
    const auto name = e.path().filename().string();
    if (e.path().extension() == ".png" && name.find("_cond") == std::string::npos) {
      ++pngs;
      CHECK(topo::io::read_png(e.path()).width == 16);
    }
  }
  CHECK(pngs == 3);
  const std::string x0 = slurp(plain / "samples" / "X-00000.tnsr");
  r = run(cfg + " sample --count 3");
  CHECK(r.out.find("exists") != std::string::npos);
  r = run(cfg + " --force sample --count 3");
  REQUIRE(r.code == 0);
  CHECK(slurp(plain / "samples" / "X-00000.tnsr") == x0);

  // Retraining the denoiser re-keys every stage and sample set built on it.
  r = run(cfg + " --force train denoiser");
  REQUIRE(r.code == 0);
  r = run(cfg + " sample --count 3");
  REQUIRE(r.code == 0);
  CHECK(fs::path(last_line(r.out)) != plain);

  r = run(cfg + " sample --count 2 --guided --stage 1");
  REQUIRE_MESSAGE(r.code == 0, r.out);
  const fs::path guided = last_line(r.out);
  CHECK(guided != plain);
  CHECK(slurp(guided / "traces" / "X-00000.csv").rfind("t,grad_bc", 0) == 0);

  // evaluate: three sampler rows with intervals; --assert maps to 0 or 3.
  r = run(cfg + " evaluate --assert");
  CHECK((r.code == 0 || r.code == 3));
  CHECK((r.code == 3) == (r.out.find("FAIL ") != std::string::npos));
  fs::path eval_dir;
  for (const auto& e : fs::directory_iterator(kRoot / "runs"))
    if (e.path().filename().string().rfind("eval-", 0) == 0) eval_dir = e.path();
  REQUIRE(!eval_dir.empty());
  const json report = json::parse(slurp(eval_dir / "report.json"));
  REQUIRE(report["samplers"].size() == 3);
  CHECK(report["samplers"][0]["name"] == "baseline");
  CHECK(report["samplers"][2]["name"] == "stage-2");
  CHECK(report["samplers"][1]["bc"]["total"] == 8);
  CHECK(report["samplers"][1]["bc"]["ci95"].size() == 2);

  r = run(cfg + " report");
  CHECK(r.code == 0);
  CHECK(r.out.find("stage-1") != std::string::npos);
  CHECK(r.out.find("denoiser-") != std::string::npos);
}

TEST_CASE("serve answers /stats and stops on SIGINT") {
  const std::string cfg = "--config " + tiny_config().string();
  const fs::path log = kRoot / "serve.log", pidfile = kRoot / "serve.pid";
  fs::remove(log);
  const std::string cmd = std::string(TOPO_CLI_PATH) + " " + cfg + " serve --port 0 --queue-depth 0 > " + log.string() +
                          " 2>&1 & echo $! > " + pidfile.string();
  REQUIRE(std::system(cmd.c_str()) == 0);
  int port = 0;
  for (int i = 0; i < 600 && port == 0; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    const std::string text = slurp(log);
    const auto at = text.find("listening on http://127.0.0.1:");
    if (at != std::string::npos) port = std::atoi(text.c_str() + at + 30);
  }
  REQUIRE(port > 0);
  httplib::Client cli("127.0.0.1", port);
  auto res = cli.Get("/stats");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body).contains("labels"));
  res = cli.Post("/sessions", R"({"annotator": "smoke"})", "application/json");
  REQUIRE(res);
  const std::string sid = json::parse(res->body)["session_id"];
  res = cli.Get("/sessions/" + sid + "/batch?n=2");
  REQUIRE(res);
  CHECK(res->status == 200);
  const std::string id = json::parse(res->body)["samples"][0]["sample_id"];
  const json body{{"labels", {{{"sample_id", id}, {"bc_violation", true}, {"fm_violation", false}}}}};
  CHECK(cli.Post("/sessions/" + sid + "/labels", body.dump(), "application/json")->status == 200);

  const std::string pid = last_line(slurp(pidfile));
  REQUIRE(std::system(("kill -INT " + pid).c_str()) == 0);
  bool stopped = false;
  for (int i = 0; i < 100 && !stopped; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    stopped = slurp(log).find("stopped") != std::string::npos;
  }
  CHECK(stopped);
  // The acknowledged label is on disk after shutdown.
  const std::string labels = slurp(kRoot / "runs" / "service" / "labels.jsonl");
  CHECK(labels.find(id) != std::string::npos);
  CHECK(labels.find("\"y_bc\":0") != std::string::npos);
}
