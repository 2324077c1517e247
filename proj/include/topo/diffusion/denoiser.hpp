#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "topo/autodiff/engine.hpp"
#include "topo/autodiff/graph.hpp"
#include "topo/diffusion/schedule.hpp"

namespace topo::diffusion {

inline constexpr int kCondChannels = 6;

/// Encoder-decoder with skip connections. Level l runs at resolution
/// H / 2^l with widths[l] channels; every level has two conv blocks and the
/// time embedding is added after the first.
struct DenoiserConfig {
  int height = 32;
  int width = 32;
  std::vector<int> widths{32, 64, 128};
  int time_dim = 64;
  int groups = 8;

  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

/// Bumped when the graph layout changes, so cached checkpoints of an older
/// layout are not reused.
inline constexpr int kDenoiserArchitecture = 2;

/// Sinusoidal embedding of integer timesteps, [N, dim].
ad::Tensor time_embedding(const std::vector<int>& t, int dim);

/// Anything that predicts the noise in x_t. Shapes: x_t [N,1,H,W],
/// cond [N,6,H,W], one timestep per batch item.
class EpsPredictor {
 public:
  virtual ~EpsPredictor() = default;
  virtual ad::Tensor predict_eps(const ad::Tensor& x_t, const ad::Tensor& cond, const std::vector<int>& t) const = 0;
};

class Denoiser : public EpsPredictor {
 public:
  static Denoiser create(const DenoiserConfig& config, std::uint64_t seed);
  static Denoiser load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path, const nlohmann::json& metadata = nlohmann::json::object()) const;

  ad::Tensor predict_eps(const ad::Tensor& x_t, const ad::Tensor& cond, const std::vector<int>& t) const override;

  const DenoiserConfig& config() const { return config_; }
  const ad::Graph& graph() const { return graph_; }
  const ad::ParameterStore& params() const { return params_; }
  ad::ParameterStore& params() { return params_; }
  ad::TensorMap bind(const ad::Tensor& x_t, const ad::Tensor& cond, const std::vector<int>& t) const;

 private:
  DenoiserConfig config_;
  ad::Graph graph_;
  ad::ParameterStore params_;
};

/// x0 in [-1, 1], conditioning stacks, timesteps and the noise to recover.
struct TrainBatch {
  ad::Tensor x0;
  ad::Tensor cond;
  std::vector<int> t;
  ad::Tensor eps;
};

/// Mean over all elements of (eps - eps_theta(q_sample(x0, t, eps), t, c))^2.
double ddpm_loss(const EpsPredictor& model, const TrainBatch& batch, const NoiseSchedule& schedule);

/// Training pairs: x0 [N,1,H,W] in [-1, 1] and cond [N,6,H,W].
struct TrainingData {
  ad::Tensor x0;
  ad::Tensor cond;
  int size() const { return x0.empty() ? 0 : x0.dim(0); }
};

struct DenoiserTrainOptions {
  int steps = 2000;
  int batch_size = 16;
  float learning_rate = 1e-3f;
  bool cosine_decay = true;  // lr * (1 + cos(pi * step / steps)) / 2
  std::uint64_t seed = 0;
  std::function<void(int step, double loss)> progress;

  nlohmann::json to_json() const;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DenoiserTrainResult {
  std::vector<double> losses;  // one per step
};

/// Adam on the DDPM loss with minibatches, timesteps and noise drawn from the
/// seeded stream. Throws DivergenceError on a non-finite loss.
DenoiserTrainResult train_denoiser(Denoiser& model, const TrainingData& data, const NoiseSchedule& schedule,
                                   const DenoiserTrainOptions& options);

/// Draws a batch the way training does: random items, t uniform in 1..T, unit noise.
TrainBatch draw_batch(const TrainingData& data, int batch_size, const NoiseSchedule& schedule, std::uint64_t seed);

}  // namespace topo::diffusion
