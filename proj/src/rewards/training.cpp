#include "topo/rewards/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

#include "topo/autodiff/adam.hpp"
#include "topo/util/seed.hpp"

namespace topo::rewards {

namespace {

constexpr int kLoadXChannel = 3;

// Stratified split: the first round(f * n_class) shuffled indices of each
// class are held out.
void stratified_split(const std::vector<int>& labels, double fraction, std::uint64_t seed, std::vector<int>& train,
                      std::vector<int>& held) {
  std::mt19937_64 rng(seed);
  for (int cls : {0, 1}) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) idx.push_back(static_cast<int>(i));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_held = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_held ? held : train).push_back(idx[k]);
  }
  std::sort(train.begin(), train.end());
  std::sort(held.begin(), held.end());
}

std::vector<std::vector<int>> minibatches(int n, int batch, std::mt19937_64& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> out;
  for (int s = 0; s < n; s += batch) out.emplace_back(order.begin() + s, order.begin() + std::min(n, s + batch));
  return out;
}

ad::Tensor gather(const ad::Tensor& t, const std::vector<int>& idx) {
  std::vector<ad::Tensor> parts;
  parts.reserve(idx.size());
  for (int i : idx) parts.push_back(t.slice_batch(i));
  return ad::Tensor::stack_batch(parts);
}

ad::Tensor with_batch_axis(const ad::Tensor& cond) {
  if (cond.rank() == 4) return cond;
  ad::Shape s{1};
  s.insert(s.end(), cond.shape().begin(), cond.shape().end());
  return cond.reshaped(s);
}

ad::Tensor stack_conds(const std::vector<const ad::Tensor*>& conds) {
  std::vector<ad::Tensor> parts;
  for (const auto* c : conds) parts.push_back(with_batch_axis(*c));
  return ad::Tensor::stack_batch(parts);
}

}  // namespace

fea::Field2D flip_horizontal(const fea::Field2D& f) {
  fea::Field2D out(f.nx, f.ny);
  for (int y = 0; y < f.ny; ++y)
    for (int x = 0; x < f.nx; ++x) out(x, y) = f(f.nx - 1 - x, y);
  return out;
}

ad::Tensor flip_cond(const ad::Tensor& cond) {
  const ad::Tensor c = with_batch_axis(cond);
  if (c.rank() != 4 || c.dim(1) != 6) throw std::invalid_argument("flip_cond expects [6,H,W] or [N,6,H,W]");
  ad::Tensor out(c.shape());
  const int n = c.dim(0), ch = c.dim(1), h = c.dim(2), w = c.dim(3);
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < ch; ++k)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const float v = c.at(b, k, y, w - 1 - x);
          out.at(b, k, y, x) = k == kLoadXChannel ? -v : v;
        }
  return cond.rank() == 4 ? out : out.reshaped(cond.shape());
}

ad::Tensor stack_topologies(const std::vector<fea::Field2D>& fields) {
  if (fields.empty()) throw std::invalid_argument("no topologies to stack");
  const int h = fields[0].ny, w = fields[0].nx;
  ad::Tensor out({static_cast<int>(fields.size()), 1, h, w});
  const std::size_t per = static_cast<std::size_t>(h) * w;
  for (std::size_t n = 0; n < fields.size(); ++n) {
    if (fields[n].nx != w || fields[n].ny != h) throw std::invalid_argument("topologies differ in size");
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] = static_cast<float>(2.0 * fields[n][i] - 1.0);
  }
  return out;
}

nlohmann::json RewardSetOptions::to_json() const {
  return {{"K", K}, {"flip", flip}, {"jitter", jitter}, {"jitter_sigma", jitter_sigma}, {"seed", seed}};
}

RewardTrainingSet make_reward_training_set(const std::vector<LabeledSample>& samples,
                                           const diffusion::NoiseSchedule& schedule, int mln,
                                           const RewardSetOptions& options) {
  if (samples.empty()) throw std::invalid_argument("reward training set needs at least one labeled sample");
  if (mln < 1 || mln > schedule.T) throw std::invalid_argument("MLN must lie in [1, T]");
  if (options.K < 1) throw std::invalid_argument("K must be positive");
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<int> step(0, mln - 1);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<ad::Tensor> xs, cs;
  RewardTrainingSet set;
  for (const auto& s : samples) {
    for (int f = 0; f < (options.flip ? 2 : 1); ++f) {
      const fea::Field2D topo = f ? flip_horizontal(s.topology) : s.topology;
      const ad::Tensor cond = with_batch_axis(f ? flip_cond(s.cond) : s.cond);
      const ad::Tensor clean = stack_topologies({topo});
      for (int k = 0; k < options.K; ++k) {
        ad::Tensor x0 = clean;
        if (options.jitter) {
          for (auto& v : x0.values()) v += static_cast<float>(options.jitter_sigma) * normal(rng);
        }
        const int t = step(rng);
        ad::Tensor eps(x0.shape());
        for (auto& v : eps.values()) v = normal(rng);
        xs.push_back(t == 0 ? x0 : diffusion::q_sample(x0, t, eps, schedule));
        cs.push_back(cond);
        set.t.push_back(t);
        set.y.push_back(static_cast<float>(s.y));
      }
    }
  }
  set.x = ad::Tensor::stack_batch(xs);
  set.cond = ad::Tensor::stack_batch(cs);
  return set;
}

nlohmann::json RewardTrainOptions::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"learning_rate", learning_rate},
          {"holdout_fraction", holdout_fraction}, {"seed", seed}, {"set", set.to_json()}};
}

nlohmann::json RewardMetrics::to_json() const {
  return {{"epoch_loss", epoch_loss}, {"train_samples", train_samples}, {"heldout_samples", heldout_samples},
          {"heldout_accuracy", heldout_accuracy}, {"train_accuracy", train_accuracy}};
}

double clean_accuracy(const RewardModel& model, const std::vector<LabeledSample>& samples) {
  if (samples.empty()) return 0.0;
  int correct = 0;
  for (std::size_t s = 0; s < samples.size(); s += 64) {
    const std::size_t e = std::min(samples.size(), s + 64);
    std::vector<fea::Field2D> topo;
    std::vector<const ad::Tensor*> conds;
    for (std::size_t i = s; i < e; ++i) {
      topo.push_back(samples[i].topology);
      conds.push_back(&samples[i].cond);
    }
    const auto p = model.probability(stack_topologies(topo), stack_conds(conds), std::vector<int>(e - s, 0));
    for (std::size_t i = s; i < e; ++i) correct += (p[i - s] >= 0.5 ? 1 : 0) == samples[i].y;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

RewardTrainResult train_reward(const RewardConfig& config, const std::vector<LabeledSample>& samples,
                               const diffusion::NoiseSchedule& schedule, const RewardTrainOptions& options) {
  config.validate();
  if (config.T != schedule.T) throw std::invalid_argument("reward T does not match the schedule");
  std::vector<int> labels;
  for (const auto& s : samples) {
    if (s.y != 0 && s.y != 1) throw std::invalid_argument("labels must be 0 or 1");
    labels.push_back(s.y);
  }
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  if (positives == 0 || positives == static_cast<long>(labels.size())) {
    throw std::invalid_argument("reward training needs both classes; got " + std::to_string(positives) + " valid of " +
                                std::to_string(labels.size()));
  }
  std::vector<int> train_idx, held_idx;
  stratified_split(labels, options.holdout_fraction, derive_seed(options.seed, 1), train_idx, held_idx);
  std::vector<LabeledSample> train, held;
  for (int i : train_idx) train.push_back(samples[i]);
  for (int i : held_idx) held.push_back(samples[i]);

  RewardSetOptions so = options.set;
  so.seed = derive_seed(options.seed, 2);
  const RewardTrainingSet set = make_reward_training_set(train, schedule, config.mln, so);

  RewardTrainResult r{RewardModel::create(config, derive_seed(options.seed, 3)), {}};
  ad::Graph g = r.model.graph();
  const ad::NodeId labels_in = g.input("labels");
  const ad::NodeId loss = g.bce_with_logits(g.output("logit"), labels_in);
  ad::OptimizerState opt;
  opt.options.learning_rate = options.learning_rate;
  std::mt19937_64 rng(derive_seed(options.seed, 4));
  const int total = options.epochs * ((set.size() + options.batch_size - 1) / options.batch_size);
  int step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    double acc = 0.0;
    int count = 0;
    for (const auto& idx : minibatches(set.size(), options.batch_size, rng)) {
      std::vector<int> t;
      ad::Tensor y({static_cast<int>(idx.size()), 1});
      for (std::size_t k = 0; k < idx.size(); ++k) {
        t.push_back(set.t[idx[k]]);
        y[k] = set.y[idx[k]];
      }
      ad::TensorMap in = r.model.bind(gather(set.x, idx), gather(set.cond, idx), t);
      in.emplace("labels", std::move(y));
      const auto ev = ad::evaluate(g, r.model.params(), in);
      const double l = ev.scalar(loss);
      if (!std::isfinite(l)) throw std::runtime_error("reward loss became non-finite in epoch " + std::to_string(epoch));
      opt.options.learning_rate =
          options.learning_rate * static_cast<float>(0.5 * (1.0 + std::cos(std::numbers::pi * step++ / total)));
      ad::adam_step(r.model.params(), ad::gradients(ev, loss), opt);
      acc += l * static_cast<double>(idx.size());
      count += static_cast<int>(idx.size());
    }
    r.metrics.epoch_loss.push_back(acc / count);
  }
  r.metrics.train_samples = static_cast<int>(train.size());
  r.metrics.heldout_samples = static_cast<int>(held.size());
  r.metrics.train_accuracy = clean_accuracy(r.model, train);
  r.metrics.heldout_accuracy = clean_accuracy(r.model, held);
  return r;
}

nlohmann::json RegressorMetrics::to_json() const {
  return {{"epoch_loss", epoch_loss}, {"train_samples", train_samples}, {"heldout_samples", heldout_samples},
          {"heldout_median_rel_error", heldout_median_rel_error}};
}

RegressorTrainResult train_compliance_regressor(const RegressorConfig& config,
                                                const std::vector<ComplianceSample>& samples,
                                                const RegressorTrainOptions& options) {
  config.validate();
  if (samples.size() < 50) {
    throw std::invalid_argument("compliance regressor needs at least 50 records, got " + std::to_string(samples.size()));
  }
  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng(derive_seed(options.seed, 1));
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_held = static_cast<std::size_t>(std::lround(options.holdout_fraction * static_cast<double>(samples.size())));
  const std::vector<int> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
  const std::vector<int> train(order.begin() + static_cast<std::ptrdiff_t>(n_held), order.end());

  std::vector<fea::Field2D> topo;
  std::vector<const ad::Tensor*> conds;
  std::vector<double> logc;
  for (const auto& s : samples) {
    if (!(s.compliance > 0.0) || !std::isfinite(s.compliance)) throw std::invalid_argument("compliance must be positive");
    topo.push_back(s.topology);
    conds.push_back(&s.cond);
    logc.push_back(std::log(s.compliance));
  }
  const ad::Tensor x_all = stack_topologies(topo);
  const ad::Tensor c_all = stack_conds(conds);

  RegressorTrainResult r{ComplianceRegressor::create(config, derive_seed(options.seed, 2)), {}};
  double mean = 0.0;
  for (int i : train) mean += logc[i] / static_cast<double>(train.size());
  r.model.params().get("head.bias")[0] = static_cast<float>(mean);

  ad::Graph g = r.model.graph();
  const ad::NodeId target = g.input("target");
  const ad::NodeId loss = g.mse(g.output("log_compliance"), target);
  ad::OptimizerState opt;
  opt.options.learning_rate = options.learning_rate;
  std::mt19937_64 rng(derive_seed(options.seed, 3));
  const int n_train = static_cast<int>(train.size());
  const int total = options.epochs * ((n_train + options.batch_size - 1) / options.batch_size);
  int step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    double acc = 0.0;
    for (const auto& local : minibatches(n_train, options.batch_size, rng)) {
      std::vector<int> idx;
      for (int k : local) idx.push_back(train[k]);
      ad::Tensor y({static_cast<int>(idx.size()), 1});
      for (std::size_t k = 0; k < idx.size(); ++k) y[k] = static_cast<float>(logc[idx[k]]);
      ad::TensorMap in = r.model.bind(gather(x_all, idx), gather(c_all, idx));
      in.emplace("target", std::move(y));
      const auto ev = ad::evaluate(g, r.model.params(), in);
      const double l = ev.scalar(loss);
      if (!std::isfinite(l)) throw std::runtime_error("regressor loss became non-finite in epoch " + std::to_string(epoch));
      opt.options.learning_rate =
          options.learning_rate * static_cast<float>(0.5 * (1.0 + std::cos(std::numbers::pi * step++ / total)));
      ad::adam_step(r.model.params(), ad::gradients(ev, loss), opt);
      acc += l * static_cast<double>(idx.size());
    }
    r.metrics.epoch_loss.push_back(acc / n_train);
  }
  r.metrics.train_samples = n_train;
  r.metrics.heldout_samples = static_cast<int>(held.size());
  if (!held.empty()) {
    const auto pred = r.model.predict_log(gather(x_all, held), gather(c_all, held));
    std::vector<double> rel;
    for (std::size_t k = 0; k < held.size(); ++k) {
      const double c = samples[held[k]].compliance;
      rel.push_back(std::fabs(std::exp(pred[k]) - c) / c);
    }
    std::nth_element(rel.begin(), rel.begin() + static_cast<std::ptrdiff_t>(rel.size() / 2), rel.end());
    r.metrics.heldout_median_rel_error = rel[rel.size() / 2];
  }
  return r;
}

}  // namespace topo::rewards
