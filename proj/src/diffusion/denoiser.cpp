#include "topo/diffusion/denoiser.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "topo/autodiff/adam.hpp"
#include "topo/autodiff/checkpoint.hpp"
#include "topo/autodiff/layers.hpp"
#include "topo/util/seed.hpp"

namespace topo::diffusion {

void DenoiserConfig::validate() const {
  if (widths.empty()) throw std::invalid_argument("denoiser needs at least one level");
  const int f = 1 << (widths.size() - 1);
  if (height < 1 || width < 1 || height % f || width % f) {
    throw std::invalid_argument("denoiser grid " + std::to_string(height) + "x" + std::to_string(width) +
                                " must be divisible by " + std::to_string(f));
  }
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("denoiser widths must be positive");
  if (time_dim < 2 || time_dim % 2) throw std::invalid_argument("time embedding dimension must be even");
  if (groups < 1) throw std::invalid_argument("group count must be positive");
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"height", height}, {"width", width}, {"widths", widths}, {"time_dim", time_dim}, {"groups", groups}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.time_dim = j.at("time_dim").get<int>();
  c.groups = j.value("groups", 8);
  c.validate();
  return c;
}

ad::Tensor time_embedding(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  ad::Tensor out({static_cast<int>(t.size()), dim});
  for (std::size_t n = 0; n < t.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      out[n * dim + i] = static_cast<float>(std::sin(t[n] * freq));
      out[n * dim + half + i] = static_cast<float>(std::cos(t[n] * freq));
    }
  }
  return out;
}

Denoiser Denoiser::create(const DenoiserConfig& config, std::uint64_t seed) {
  config.validate();
  Denoiser d;
  d.config_ = config;
  ad::Graph& g = d.graph_;
  ad::NetBuilder nb(g, d.params_, seed);
  const auto conv_block = [&](ad::NodeId x, const std::string& name, int cin, int cout, int stride) {
    ad::NodeId h = nb.conv(x, name + ".conv", cin, cout, 3, stride, 1.0f, false);
    h = nb.group_norm(h, name + ".norm", cout, config.groups);
    return g.silu(h);
  };
  const ad::NodeId x = g.input("x_t");
  const ad::NodeId c = g.input("cond");
  const ad::NodeId temb = g.input("temb");
  const ad::NodeId te = g.silu(nb.dense(temb, "time.fc", config.time_dim, config.time_dim));

  const auto& w = config.widths;
  const int levels = static_cast<int>(w.size());
  std::vector<ad::NodeId> skips;
  ad::NodeId h = g.concat(x, c);
  int cin = 1 + kCondChannels;
  for (int l = 0; l < levels; ++l) {
    const std::string p = "down" + std::to_string(l);
    h = conv_block(h, p + ".a", cin, w[l], l == 0 ? 1 : 2);
    h = g.add_channel(h, nb.dense(te, p + ".time", config.time_dim, w[l]));
    h = conv_block(h, p + ".b", w[l], w[l], 1);
    skips.push_back(h);
    cin = w[l];
  }
  for (int l = levels - 2; l >= 0; --l) {
    const std::string p = "up" + std::to_string(l);
    h = g.concat(g.upsample2x(h), skips[l]);
    h = conv_block(h, p + ".a", w[l + 1] + w[l], w[l], 1);
    h = g.add_channel(h, nb.dense(te, p + ".time", config.time_dim, w[l]));
    h = conv_block(h, p + ".b", w[l], w[l], 1);
  }
  // Every conv path ends in GroupNorm, which drops the spatial mean of x_t.
  // The true eps is x_t / sqrt(1 - abar_t) minus an x0 term, so a time-gated
  // copy of x_t carries that mean; without it the mean drifts during sampling.
  const ad::NodeId gain = nb.dense(te, "skip.gain", config.time_dim, 1);
  g.set_output("eps", g.add(nb.conv(h, "out", w[0], 1, 3, 1, 0.5f, true), g.mul_channel(x, gain)));
  return d;
}

ad::TensorMap Denoiser::bind(const ad::Tensor& x_t, const ad::Tensor& cond, const std::vector<int>& t) const {
  if (x_t.rank() != 4 || x_t.dim(1) != 1 || x_t.dim(2) != config_.height || x_t.dim(3) != config_.width) {
    throw std::invalid_argument("denoiser expects x_t of shape [N,1," + std::to_string(config_.height) + "," +
                                std::to_string(config_.width) + "], got " + ad::shape_string(x_t.shape()));
  }
  if (cond.rank() != 4 || cond.dim(0) != x_t.dim(0) || cond.dim(1) != kCondChannels || cond.dim(2) != x_t.dim(2) ||
      cond.dim(3) != x_t.dim(3)) {
    throw std::invalid_argument("denoiser expects cond of shape [N,6,H,W], got " + ad::shape_string(cond.shape()));
  }
  if (static_cast<int>(t.size()) != x_t.dim(0)) throw std::invalid_argument("denoiser needs one timestep per item");
  return {{"x_t", x_t}, {"cond", cond}, {"temb", time_embedding(t, config_.time_dim)}};
}

ad::Tensor Denoiser::predict_eps(const ad::Tensor& x_t, const ad::Tensor& cond, const std::vector<int>& t) const {
  const auto ev = ad::evaluate(graph_, params_, bind(x_t, cond, t));
  return ev.output("eps");
}

void Denoiser::save(const std::filesystem::path& path, const nlohmann::json& metadata) const {
  nlohmann::json meta = metadata;
  meta["kind"] = "denoiser";
  meta["config"] = config_.to_json();
  ad::write_checkpoint(path, graph_, params_, meta);
}

Denoiser Denoiser::load(const std::filesystem::path& path) {
  ad::Checkpoint ck = ad::read_checkpoint(path);
  if (ck.metadata.value("kind", "") != "denoiser") {
    throw ad::FormatError(path.string() + ": checkpoint is not a denoiser");
  }
  Denoiser d;
  d.config_ = DenoiserConfig::from_json(ck.metadata.at("config"));
  d.graph_ = std::move(ck.graph);
  d.params_ = std::move(ck.params);
  return d;
}

double ddpm_loss(const EpsPredictor& model, const TrainBatch& batch, const NoiseSchedule& schedule) {
  const ad::Tensor x_t = q_sample(batch.x0, batch.t, batch.eps, schedule);
  const ad::Tensor pred = model.predict_eps(x_t, batch.cond, batch.t);
  if (pred.shape() != batch.eps.shape()) throw std::invalid_argument("ddpm_loss: prediction shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(batch.eps[i]) - pred[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

nlohmann::json DenoiserTrainOptions::to_json() const {
  return {{"steps", steps}, {"batch_size", batch_size}, {"learning_rate", learning_rate},
          {"cosine_decay", cosine_decay}, {"seed", seed}};
}

TrainBatch draw_batch(const TrainingData& data, int batch_size, const NoiseSchedule& schedule, std::uint64_t seed) {
  if (data.size() == 0) throw std::invalid_argument("training data is empty");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, data.size() - 1);
  std::uniform_int_distribution<int> step(1, schedule.T);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<ad::Tensor> xs, cs;
  TrainBatch b;
  for (int i = 0; i < batch_size; ++i) {
    const int k = pick(rng);
    xs.push_back(data.x0.slice_batch(k));
    cs.push_back(data.cond.slice_batch(k));
    b.t.push_back(step(rng));
  }
  b.x0 = ad::Tensor::stack_batch(xs);
  b.cond = ad::Tensor::stack_batch(cs);
  b.eps = ad::Tensor(b.x0.shape());
  for (auto& v : b.eps.values()) v = normal(rng);
  return b;
}

DenoiserTrainResult train_denoiser(Denoiser& model, const TrainingData& data, const NoiseSchedule& schedule,
                                   const DenoiserTrainOptions& options) {
  if (data.size() == 0) throw std::invalid_argument("cannot train a denoiser on an empty dataset");
  if (options.steps < 1 || options.batch_size < 1) throw std::invalid_argument("steps and batch size must be positive");
  ad::Graph g = model.graph();
  const ad::NodeId target = g.input("target");
  const ad::NodeId loss = g.mse(g.output("eps"), target);
  ad::OptimizerState opt;
  opt.options.learning_rate = options.learning_rate;
  DenoiserTrainResult result;
  for (int s = 0; s < options.steps; ++s) {
    const TrainBatch b = draw_batch(data, options.batch_size, schedule, derive_seed(options.seed, static_cast<std::uint64_t>(s)));
    ad::TensorMap in = model.bind(q_sample(b.x0, b.t, b.eps, schedule), b.cond, b.t);
    in.emplace("target", b.eps);
    const auto ev = ad::evaluate(g, model.params(), in, {.check_finite = false});
    const double l = ev.scalar(loss);
    if (!std::isfinite(l)) throw DivergenceError("denoiser loss became non-finite at step " + std::to_string(s));
    result.losses.push_back(l);
    const auto grads = ad::gradients(ev, loss);
    if (options.cosine_decay) {
      opt.options.learning_rate =
          options.learning_rate * static_cast<float>(0.5 * (1.0 + std::cos(std::numbers::pi * s / options.steps)));
    }
    ad::adam_step(model.params(), grads, opt);
    if (options.progress) options.progress(s, l);
  }
  if (!model.params().all_finite()) throw DivergenceError("denoiser parameters became non-finite");
  return result;
}

}  // namespace topo::diffusion
