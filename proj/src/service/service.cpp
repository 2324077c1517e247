#include "topo/service/service.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include "topo/rewards/training.hpp"
#include "topo/util/seed.hpp"

namespace topo::service {

namespace fs = std::filesystem;
using nlohmann::json;
using rewards::RewardKind;

namespace {

void write_json_atomic(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << j.dump(2) << '\n';
    if (!out) throw ServiceError(500, "failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::optional<json> read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  return json::parse(in);
}

bool is_id(const std::string& s) { return pipeline::valid_sample_id(s); }

}  // namespace

std::string make_uuid() {
  static std::mutex mu;
  static std::mt19937_64 rng(std::random_device{}());
  std::uint64_t a, b;
  {
    std::lock_guard lk(mu);
    a = rng();
    b = rng();
  }
  a = (a & ~0xF000ull) | 0x4000ull;  // version 4
  b = (b & 0x3FFFFFFFFFFFFFFFull) | 0x8000000000000000ull;
  char buf[37];
  std::snprintf(buf, sizeof buf, "%08x-%04x-%04x-%04x-%012llx", static_cast<unsigned>(a >> 32),
                static_cast<unsigned>((a >> 16) & 0xFFFF), static_cast<unsigned>(a & 0xFFFF),
                static_cast<unsigned>(b >> 48), static_cast<unsigned long long>(b & 0xFFFFFFFFFFFFull));
  return buf;
}

json Session::to_json() const {
  return {{"session_id", id},
          {"annotator", annotator},
          {"created_at", created_at},
          {"served", served.size()},
          {"labeled", labeled.size()},
          {"served_ids", served},
          {"labeled_ids", labeled}};
}

Session Session::from_json(const json& j) {
  return {j.at("session_id"), j.at("annotator"), j.at("created_at"), j.at("served_ids"), j.at("labeled_ids")};
}

std::vector<fs::path> registry_members(const json& registry, RewardKind kind) {
  const std::string k = rewards::to_string(kind);
  if (!registry.contains("ensembles") || !registry["ensembles"].contains(k)) return {};
  std::vector<fs::path> out;
  for (const auto& p : registry["ensembles"][k]) out.emplace_back(p.get<std::string>());
  return out;
}

Trainer default_trainer(const pipeline::RunConfig& config) {
  return [config](RewardKind kind, int stage, const std::vector<rewards::LabeledSample>& samples,
                  const fs::path& checkpoint) {
    auto opts = config.reward.train;
    opts.seed = derive_seed(config.seed, 1000 + static_cast<std::uint64_t>(stage) * 2 + static_cast<std::uint64_t>(kind));
    const auto res = rewards::train_reward(config.reward_config(kind, stage), samples, config.make_schedule(), opts);
    json metrics = res.metrics.to_json();
    res.model.save(checkpoint, {{"metrics", metrics}});
    return metrics;
  };
}

struct FeedbackService::Job {
  std::string id;
  RewardKind kind = RewardKind::BC;
  int stage = 1;
  std::string status = "queued";  // queued, running, succeeded, failed
  std::string error;
  json metrics = json::object();
  std::string checkpoint;
  int samples = 0;
  std::string created_at;

  json to_json() const {
    return {{"job_id", id},       {"kind", rewards::to_string(kind)}, {"stage", stage},
            {"status", status},   {"error", error},                   {"metrics", metrics},
            {"checkpoint", checkpoint}, {"samples", samples},         {"created_at", created_at}};
  }
};

FeedbackService::FeedbackService(ServiceOptions options, Generator generator, Trainer trainer)
    : options_(std::move(options)),
      generator_(std::move(generator)),
      trainer_(std::move(trainer)),
      samples_(options_.data_dir / "samples"),
      labels_(options_.data_dir / "labels.jsonl") {
  if (options_.max_batch < 1 || options_.queue_depth < 0 || options_.prefetch_size < 1) {
    throw std::invalid_argument("invalid service options");
  }
  fs::create_directories(options_.data_dir / "sessions");
  fs::create_directories(options_.data_dir / "jobs");
  fs::create_directories(options_.data_dir / "models");
  generator_thread_ = std::thread([this] { generator_loop(); });
}

FeedbackService::~FeedbackService() { shutdown(); }

void FeedbackService::shutdown() {
  {
    std::lock_guard lk(gen_mu_);
    if (stopping_ && !generator_thread_.joinable()) return;
    stopping_ = true;
    for (auto& r : requests_) r.second.set_exception(std::make_exception_ptr(ServiceError(503, "service stopping")));
    requests_.clear();
  }
  gen_cv_.notify_all();
  if (generator_thread_.joinable()) generator_thread_.join();
  std::vector<std::thread> threads;
  {
    std::lock_guard lk(job_mu_);
    threads.swap(job_threads_);
  }
  for (auto& t : threads) t.join();
}

// ---- sessions ----

Session FeedbackService::load_session(const std::string& id) const {
  if (!is_id(id)) throw ServiceError(404, "unknown session '" + id + "'");
  const auto j = read_json(options_.data_dir / "sessions" / (id + ".json"));
  if (!j) throw ServiceError(404, "unknown session '" + id + "'");
  return Session::from_json(*j);
}

void FeedbackService::save_session(const Session& s) const {
  write_json_atomic(options_.data_dir / "sessions" / (s.id + ".json"), s.to_json());
}

json FeedbackService::create_session(const std::string& annotator) {
  Session s{make_uuid(), annotator, rewards::utc_timestamp(), {}, {}};
  std::lock_guard lk(session_mu_);
  save_session(s);
  json j = s.to_json();
  j.erase("served_ids");
  j.erase("labeled_ids");
  return j;
}

json FeedbackService::get_session(const std::string& id) const {
  std::lock_guard lk(session_mu_);
  return load_session(id).to_json();
}

// ---- generation ----

GeneratedBatch FeedbackService::produce(int n) {
  GeneratedBatch b = generator_(n, derive_seed(options_.seed, generated_++));
  if (static_cast<int>(b.samples.size()) != n) throw ServiceError(500, "generator returned the wrong number of samples");
  for (auto& s : b.samples) {
    if (s.scenario_id != b.samples.front().scenario_id) throw ServiceError(500, "batch mixes scenarios");
    s.id = make_uuid();
    samples_.put(s);
  }
  return b;
}

void FeedbackService::generator_loop() {
  bool prefetch = options_.queue_depth > 0;
  std::unique_lock lk(gen_mu_);
  while (true) {
    gen_cv_.wait(lk, [&] {
      return stopping_ || !requests_.empty() || (prefetch && static_cast<int>(ready_.size()) < options_.queue_depth);
    });
    if (stopping_) return;
    if (!requests_.empty()) {
      auto req = std::move(requests_.front());
      requests_.pop_front();
      lk.unlock();
      try {
        req.second.set_value(produce(req.first));
      } catch (...) {
        req.second.set_exception(std::current_exception());
      }
      lk.lock();
      continue;
    }
    lk.unlock();
    std::optional<GeneratedBatch> b;
    try {
      b = produce(options_.prefetch_size);
    } catch (...) {
      prefetch = false;  // requests still surface the error
    }
    lk.lock();
    if (b) ready_.push_back(std::move(*b));
  }
}

GeneratedBatch FeedbackService::take_batch(int n) {
  std::future<GeneratedBatch> f;
  {
    std::lock_guard lk(gen_mu_);
    if (stopping_) throw ServiceError(503, "service stopping");
    if (!ready_.empty() && static_cast<int>(ready_.front().samples.size()) >= n) {
      GeneratedBatch b = std::move(ready_.front());
      ready_.pop_front();
      b.samples.resize(static_cast<std::size_t>(n));
      gen_cv_.notify_all();
      return b;
    }
    std::promise<GeneratedBatch> p;
    f = p.get_future();
    requests_.emplace_back(n, std::move(p));
  }
  gen_cv_.notify_all();
  try {
    return f.get();
  } catch (const ServiceError&) {
    throw;
  } catch (const std::exception& e) {
    throw ServiceError(500, std::string("generation failed: ") + e.what());
  }
}

json FeedbackService::next_batch(const std::string& session_id, int n) {
  if (n < 1 || n > options_.max_batch) {
    throw ServiceError(400, "n must lie in [1, " + std::to_string(options_.max_batch) + "]");
  }
  { std::lock_guard lk(session_mu_); load_session(session_id); }
  const GeneratedBatch b = take_batch(n);
  json entries = json::array();
  for (const auto& s : b.samples) {
    entries.push_back({{"sample_id", s.id},
                       {"scenario_id", s.scenario_id},
                       {"topology_png", "/media/" + s.id + ".png"},
                       {"conditions_png", "/media/" + s.id + "_cond.png"},
                       {"config_id", b.config_id}});
  }
  std::lock_guard lk(session_mu_);
  Session sess = load_session(session_id);
  for (const auto& s : b.samples) sess.served.push_back(s.id);
  save_session(sess);
  return {{"batch_id", make_uuid()},
          {"session_id", session_id},
          {"scenario_id", b.samples.front().scenario_id},
          {"config_id", b.config_id},
          {"samples", entries},
          {"served", sess.served.size()},
          {"labeled", sess.labeled.size()}};
}

// ---- labels ----

json FeedbackService::submit_labels(const std::string& session_id, const json& body) {
  if (!body.is_object() || !body.contains("labels") || !body["labels"].is_array()) {
    throw ServiceError(400, "body must be {\"labels\": [...]}");
  }
  std::lock_guard lk(session_mu_);
  Session sess = load_session(session_id);
  const std::set<std::string> served(sess.served.begin(), sess.served.end());
  std::vector<rewards::LabelRecord> records;
  for (const auto& l : body["labels"]) {
    if (!l.is_object() || !l.contains("sample_id") || !l["sample_id"].is_string() || !l.contains("bc_violation") ||
        !l["bc_violation"].is_boolean() || !l.contains("fm_violation") || !l["fm_violation"].is_boolean()) {
      throw ServiceError(400, "each label needs sample_id (string), bc_violation and fm_violation (booleans)");
    }
    const std::string id = l["sample_id"];
    if (!served.count(id)) throw ServiceError(404, "sample '" + id + "' was not served to this session");
    // A violation flag means the criterion fails, so y = 0.
    records.push_back({id, samples_.get(id).scenario_id, rewards::LabelSource::Human,
                       l["bc_violation"].get<bool>() ? 0 : 1, l["fm_violation"].get<bool>() ? 0 : 1, sess.annotator,
                       rewards::utc_timestamp()});
  }
  labels_.append(records);
  for (const auto& r : records) {
    if (std::find(sess.labeled.begin(), sess.labeled.end(), r.sample_id) == sess.labeled.end()) {
      sess.labeled.push_back(r.sample_id);
    }
  }
  save_session(sess);
  return {{"accepted", records.size()}, {"served", sess.served.size()}, {"labeled", sess.labeled.size()}};
}

// ---- retraining ----

void FeedbackService::save_job(const Job& job) const {
  write_json_atomic(options_.data_dir / "jobs" / (job.id + ".json"), job.to_json());
}

json FeedbackService::trigger_retrain(const json& body) {
  if (!body.is_object() || !body.contains("kind") || !body["kind"].is_string()) {
    throw ServiceError(400, "body must name a kind (\"bc\" or \"fm\")");
  }
  auto job = std::make_shared<Job>();
  try {
    job->kind = rewards::reward_kind_from_string(body["kind"]);
  } catch (const std::exception& e) {
    throw ServiceError(400, e.what());
  }
  job->stage = body.value("stage", 1);
  if (job->stage != 1 && job->stage != 2) throw ServiceError(400, "stage must be 1 or 2");
  job->id = make_uuid();
  job->created_at = rewards::utc_timestamp();
  auto samples = pipeline::labeled_samples(labels_, samples_, job->kind, job->stage);
  job->samples = static_cast<int>(samples.size());
  const int pos = static_cast<int>(std::count_if(samples.begin(), samples.end(), [](const auto& s) { return s.y == 1; }));
  const int neg = job->samples - pos;
  if (job->samples < options_.min_labels || pos < 2 || neg < 2) {
    job->status = "failed";
    job->error = "need at least " + std::to_string(options_.min_labels) + " " + rewards::to_string(job->kind) +
                 " labels for stage " + std::to_string(job->stage) + " with 2 of each class; have " +
                 std::to_string(pos) + " valid and " + std::to_string(neg) + " violating";
  }
  std::lock_guard lk(job_mu_);
  jobs_[job->id] = job;
  save_job(*job);
  if (job->status == "queued") {
    ++active_jobs_;
    job_threads_.emplace_back([this, job, s = std::move(samples)]() mutable { run_job(job, std::move(s)); });
  }
  return job->to_json();
}

void FeedbackService::run_job(std::shared_ptr<Job> job, std::vector<rewards::LabeledSample> samples) {
  std::lock_guard train(train_mu_);
  {
    std::lock_guard lk(job_mu_);
    job->status = "running";
    save_job(*job);
  }
  const std::string kind = rewards::to_string(job->kind);
  const fs::path ckpt =
      options_.data_dir / "models" / ("reward-" + kind + "-" + std::to_string(job->stage) + "-" + job->id + ".tnsr");
  json metrics;
  std::string error;
  try {
    metrics = trainer_(job->kind, job->stage, samples, ckpt);
  } catch (const std::exception& e) {
    error = e.what();
  }
  std::lock_guard lk(job_mu_);
  if (error.empty()) {
    json reg = read_json(registry_path()).value_or(json::object());
    reg["models"][kind][std::to_string(job->stage)] = ckpt.string();
    json members = json::array();
    if (job->stage == 2 && reg["models"][kind].contains("1")) members.push_back(reg["models"][kind]["1"]);
    members.push_back(ckpt.string());
    reg["ensembles"][kind] = members;
    reg["stage"][kind] = job->stage;
    write_json_atomic(registry_path(), reg);
    job->status = "succeeded";
    job->metrics = metrics;
    job->checkpoint = ckpt.string();
  } else {
    job->status = "failed";
    job->error = error;
  }
  save_job(*job);
  --active_jobs_;
  job_cv_.notify_all();
}

json FeedbackService::job(const std::string& id) const {
  {
    std::lock_guard lk(job_mu_);
    if (const auto it = jobs_.find(id); it != jobs_.end()) return it->second->to_json();
  }
  if (is_id(id)) {
    if (auto j = read_json(options_.data_dir / "jobs" / (id + ".json"))) return *j;
  }
  throw ServiceError(404, "unknown job '" + id + "'");
}

void FeedbackService::wait_idle() {
  std::unique_lock lk(job_mu_);
  job_cv_.wait(lk, [&] { return active_jobs_ == 0; });
}

// ---- stats and media ----

json FeedbackService::stats() const {
  json labels{{"bc", {{"valid", 0}, {"violation", 0}}}, {"fm", {{"valid", 0}, {"violation", 0}}}};
  const auto latest = labels_.latest();
  for (const auto& [id, r] : latest) {
    if (r.y_bc) labels["bc"][*r.y_bc ? "valid" : "violation"] = labels["bc"][*r.y_bc ? "valid" : "violation"].get<int>() + 1;
    if (r.y_fm) labels["fm"][*r.y_fm ? "valid" : "violation"] = labels["fm"][*r.y_fm ? "valid" : "violation"].get<int>() + 1;
  }
  int sessions = 0;
  for (const auto& e : fs::directory_iterator(options_.data_dir / "sessions")) sessions += e.path().extension() == ".json";
  json jobs{{"queued", 0}, {"running", 0}, {"succeeded", 0}, {"failed", 0}};
  {
    std::lock_guard lk(job_mu_);
    for (const auto& [id, j] : jobs_) jobs[j->status] = jobs[j->status].get<int>() + 1;
  }
  json evaluation = nullptr;
  if (!options_.reports_dir.empty() && fs::exists(options_.reports_dir)) {
    fs::path newest;
    fs::file_time_type when{};
    for (const auto& e : fs::directory_iterator(options_.reports_dir)) {
      const fs::path r = e.path() / "report.json";
      if (e.path().filename().string().rfind("eval-", 0) == 0 && fs::exists(r) && (newest.empty() || fs::last_write_time(r) > when)) {
        newest = r;
        when = fs::last_write_time(r);
      }
    }
    if (!newest.empty()) {
      const json rep = *read_json(newest);
      evaluation = {{"report", newest.string()}, {"samplers", json::array()}};
      for (const auto& s : rep.at("samplers")) {
        evaluation["samplers"].push_back({{"name", s.at("name")}, {"bc_rate", s.at("bc").at("rate")}, {"fm_rate", s.at("fm").at("rate")}});
      }
    }
  }
  return {{"labels", labels},
          {"label_records", labels_.all().size()},
          {"labeled_samples", latest.size()},
          {"samples", samples_.ids().size()},
          {"sessions", sessions},
          {"jobs", jobs},
          {"registry", read_json(registry_path()).value_or(json::object())},
          {"latest_evaluation", evaluation}};
}

fs::path FeedbackService::media(const std::string& name) const {
  if (!is_id(name)) throw ServiceError(404, "no such media");
  const fs::path p = samples_.dir() / (name + ".png");
  if (!fs::exists(p)) throw ServiceError(404, "no such media '" + name + ".png'");
  return p;
}

}  // namespace topo::service
