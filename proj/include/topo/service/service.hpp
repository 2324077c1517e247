#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "topo/pipeline/config.hpp"
#include "topo/pipeline/sample_store.hpp"
#include "topo/rewards/labels.hpp"

namespace topo::service {

/// Carries the HTTP status the error maps to.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct Session {
  std::string id;
  std::string annotator;
  std::string created_at;
  std::vector<std::string> served;   // sample ids in serving order
  std::vector<std::string> labeled;  // distinct sample ids with a submitted label

  nlohmann::json to_json() const;
  static Session from_json(const nlohmann::json& j);
};

/// Designs for one scenario. Ids are assigned by the service.
struct GeneratedBatch {
  std::string config_id;
  std::vector<pipeline::StoredSample> samples;
};
using Generator = std::function<GeneratedBatch(int n, std::uint64_t seed)>;

/// Trains a reward on labeled samples, writes the checkpoint and returns
/// metrics. Throws on failure; the message becomes the job diagnostic.
using Trainer = std::function<nlohmann::json(rewards::RewardKind kind, int stage,
                                             const std::vector<rewards::LabeledSample>& samples,
                                             const std::filesystem::path& checkpoint)>;

/// train_reward with the run config's reward settings.
Trainer default_trainer(const pipeline::RunConfig& config);

struct ServiceOptions {
  std::filesystem::path data_dir = "service";
  int max_batch = 32;
  int queue_depth = 2;     // pre-generated batches kept ready
  int prefetch_size = 20;  // samples per pre-generated batch
  int min_labels = 10;     // per retrain, with at least 2 of each class
  std::uint64_t seed = 0;
  /// Pipeline data directory whose newest eval-*/report.json feeds /stats.
  std::filesystem::path reports_dir;
};

/// Reward checkpoints that guidance should use for `kind`: the registered
/// ensemble of the highest stage, or nothing.
std::vector<std::filesystem::path> registry_members(const nlohmann::json& registry, rewards::RewardKind kind);

/// Human-in-the-loop backend: sessions, candidate batches, labels, reward
/// retraining and statistics. Files under data_dir:
///   sessions/<id>.json, samples/, labels.jsonl, registry.json, jobs/<id>.json
class FeedbackService {
 public:
  FeedbackService(ServiceOptions options, Generator generator, Trainer trainer);
  ~FeedbackService();
  FeedbackService(const FeedbackService&) = delete;
  FeedbackService& operator=(const FeedbackService&) = delete;

  nlohmann::json create_session(const std::string& annotator);
  nlohmann::json get_session(const std::string& id) const;
  nlohmann::json next_batch(const std::string& session_id, int n);
  /// body: {"labels": [{"sample_id", "bc_violation", "fm_violation"}]}
  nlohmann::json submit_labels(const std::string& session_id, const nlohmann::json& body);
  /// body: {"kind": "bc"|"fm", "stage": 1|2}
  nlohmann::json trigger_retrain(const nlohmann::json& body);
  nlohmann::json job(const std::string& id) const;
  nlohmann::json stats() const;
  /// File behind /media/<name>.png.
  std::filesystem::path media(const std::string& name) const;
  /// Blocks until no retrain job is queued or running.
  void wait_idle();
  /// Stops the generator and waits for running jobs.
  void shutdown();

  const pipeline::SampleStore& samples() const { return samples_; }
  const rewards::LabelStore& labels() const { return labels_; }
  std::filesystem::path registry_path() const { return options_.data_dir / "registry.json"; }

 private:
  struct Job;
  Session load_session(const std::string& id) const;
  void save_session(const Session& s) const;
  GeneratedBatch take_batch(int n);
  void generator_loop();
  GeneratedBatch produce(int n);
  void run_job(std::shared_ptr<Job> job, std::vector<rewards::LabeledSample> samples);
  void save_job(const Job& job) const;

  ServiceOptions options_;
  Generator generator_;
  Trainer trainer_;
  pipeline::SampleStore samples_;
  rewards::LabelStore labels_;

  mutable std::mutex session_mu_;

  std::mutex gen_mu_;
  std::condition_variable gen_cv_;
  std::deque<GeneratedBatch> ready_;
  std::deque<std::pair<int, std::promise<GeneratedBatch>>> requests_;
  std::uint64_t generated_ = 0;
  bool stopping_ = false;
  std::thread generator_thread_;

  mutable std::mutex job_mu_;
  std::condition_variable job_cv_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::vector<std::thread> job_threads_;
  int active_jobs_ = 0;
  std::mutex train_mu_;  // one training job at a time
};

/// Binds the endpoints of `service` to an httplib server.
class HttpServer {
 public:
  explicit HttpServer(FeedbackService& service);
  ~HttpServer();
  /// Port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); blocks.
  void listen();
  /// listen() on a background thread.
  void start();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string make_uuid();

}  // namespace topo::service
