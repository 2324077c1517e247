#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <sstream>

#include "doctest.h"
#include "topo/diffusion/sampler.hpp"
#include "topo/guidance/guidance.hpp"

using namespace topo;
using namespace topo::guidance;

namespace {

std::vector<float> vec(std::span<const float> s) { return {s.begin(), s.end()}; }

// log R has the fixed gradient `a` per element, whatever x is.
struct LinearReward : rewards::RewardFunction {
  std::vector<float> a;
  double p = 0.5;
  std::vector<double> probability(const ad::Tensor& x, const ad::Tensor&, const std::vector<int>&) const override {
    return std::vector<double>(static_cast<std::size_t>(x.dim(0)), p);
  }
  rewards::LogRewardGrad log_grad(const ad::Tensor& x, const ad::Tensor&, const std::vector<int>&,
                                  double delta) const override {
    rewards::LogRewardGrad g{probability(x, {}, {}), ad::Tensor(x.shape())};
    if (p <= delta) return g;
    const std::size_t per = x.size() / x.dim(0);
    for (std::size_t i = 0; i < x.size(); ++i) g.grad[i] = a[i % per];
    return g;
  }
};

struct LinearCompliance : rewards::ComplianceFunction {
  std::vector<float> c;
  ad::Tensor grad(const ad::Tensor& x, const ad::Tensor&) const override {
    ad::Tensor g(x.shape());
    const std::size_t per = x.size() / x.dim(0);
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = c[i % per];
    return g;
  }
};

// Exact eps-prediction for x0 ~ N(m, I): eps = sqrt(1 - abar) (x_t - sqrt(abar) m).
struct GaussianEps : diffusion::EpsPredictor {
  const diffusion::NoiseSchedule* s = nullptr;
  std::vector<double> m;
  ad::Tensor predict_eps(const ad::Tensor& x, const ad::Tensor&, const std::vector<int>& t) const override {
    ad::Tensor e(x.shape());
    const std::size_t per = x.size() / t.size();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double ab = s->alpha_bar[t[i / per]];
      e[i] = static_cast<float>(std::sqrt(1.0 - ab) * (x[i] - std::sqrt(ab) * m[i % per]));
    }
    return e;
  }
};

struct ZeroEps : diffusion::EpsPredictor {
  ad::Tensor predict_eps(const ad::Tensor& x, const ad::Tensor&, const std::vector<int>&) const override {
    return ad::Tensor(x.shape());
  }
};

LinearReward linear(std::vector<float> a, double p = 0.5) {
  LinearReward r;
  r.a = std::move(a);
  r.p = p;
  return r;
}

GuidanceConfig unclipped(int T) {
  GuidanceConfig c = GuidanceConfig::defaults(T);
  c.clip = false;
  return c;
}

const ad::Tensor kX({2, 1, 1, 3});
const ad::Tensor kCond({2, 6, 1, 3});

}  // namespace

TEST_CASE("defaults resolve the noise cutoffs") {
  const auto c = GuidanceConfig::defaults(100);
  CHECK(c.mln_bc == 100);
  CHECK(c.mln_fm == 30);
  CHECK(c.alpha_bc == 2.0);
  CHECK(c.eta_c == 1e-3);
  CHECK(GuidanceConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK(GuidanceConfig::zero().inactive());
  GuidanceConfig bad = c;
  bad.alpha_fm = 0.5;
  CHECK_THROWS(bad.validate(100));
  bad = c;
  bad.mln_fm = 101;
  CHECK_THROWS(bad.validate(100));
  bad = c;
  bad.lambda_bc = -1;
  CHECK_THROWS(bad.validate(100));
}

TEST_CASE("linear reward shifts the mean by lambda alpha Sigma a") {
  const auto bc = linear({1.0f, -2.0f, 0.5f});
  GuidanceModels models;
  models.bc = {&bc};
  auto cfg = unclipped(50);
  cfg.lambda_bc = 0.7;
  cfg.alpha_bc = 3.0;
  ad::Tensor mu(kX.shape());
  const double sigma = 0.02;
  guided_mean(mu, sigma, kX, kCond, 10, models, cfg, 50);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    CHECK(mu[i] == doctest::Approx(0.7 * 3.0 * sigma * bc.a[i % 3]).epsilon(1e-6));
  }
}

TEST_CASE("reward terms superpose and compliance pushes downhill") {
  const auto bc = linear({1.0f, 0.0f, 2.0f});
  const auto fm = linear({0.0f, 3.0f, -1.0f});
  LinearCompliance comp;
  comp.c = {5.0f, 5.0f, -5.0f};
  auto cfg = unclipped(50);
  cfg.eta_c = 0.1;
  const double sigma = 0.01;
  const auto shift = [&](GuidanceModels m) {
    ad::Tensor mu(kX.shape());
    guided_mean(mu, sigma, kX, kCond, 5, m, cfg, 50);
    return mu;
  };
  GuidanceModels all{{&bc}, {&fm}, &comp, nullptr};
  const auto s_all = shift(all);
  const auto s_bc = shift({{&bc}, {}, nullptr, nullptr});
  const auto s_fm = shift({{}, {&fm}, nullptr, nullptr});
  const auto s_c = shift({{}, {}, &comp, nullptr});
  for (std::size_t i = 0; i < s_all.size(); ++i) {
    CHECK(s_all[i] == doctest::Approx(s_bc[i] + s_fm[i] + s_c[i]).epsilon(1e-6));
    CHECK(s_c[i] == doctest::Approx(-0.1 * sigma * comp.c[i % 3]).epsilon(1e-6));
  }
}

TEST_CASE("each reward is active only below its noise cutoff") {
  const auto bc = linear({1.0f, 1.0f, 1.0f});
  const auto fm = linear({1.0f, 1.0f, 1.0f});
  GuidanceModels models{{&bc}, {&fm}, nullptr, nullptr};
  auto cfg = unclipped(100);
  cfg.eta_c = 0.0;
  const auto at = [&](int t, std::vector<TraceStep>* tr) {
    ad::Tensor mu(kX.shape());
    guided_mean(mu, 0.01, kX, kCond, t, models, cfg, 100, tr);
    return mu[0];
  };
  std::vector<TraceStep> tr;
  CHECK(at(100, &tr) == 0.0f);
  CHECK(!tr[0].active_bc);
  const float bc_only = at(99, &tr);
  CHECK(tr[0].active_bc);
  CHECK(!tr[0].active_fm);
  CHECK(bc_only == doctest::Approx(0.02));
  CHECK(at(30, &tr) == bc_only);
  CHECK(at(29, &tr) == doctest::Approx(0.04));
  CHECK(tr[0].active_fm);
  CHECK(tr[1].grad_fm == doctest::Approx(std::sqrt(3.0)));
}

TEST_CASE("sharpening and strength trade off exactly") {
  const auto bc = linear({0.3f, -1.7f, 2.9f});
  GuidanceModels models{{&bc}, {}, nullptr, nullptr};
  auto a = unclipped(50);
  a.lambda_bc = 0.5;
  a.alpha_bc = 3.0;
  auto b = a;
  b.lambda_bc = 1.5;
  b.alpha_bc = 1.0;
  std::mt19937_64 rng(1);
  ad::Tensor mu_a(kX.shape());
  for (auto& v : mu_a.values()) v = std::normal_distribution<float>(0, 1)(rng);
  ad::Tensor mu_b = mu_a;
  guided_mean(mu_a, 0.037, kX, kCond, 12, models, a, 50);
  guided_mean(mu_b, 0.037, kX, kCond, 12, models, b, 50);
  CHECK(vec(mu_a.values()) == vec(mu_b.values()));
}

TEST_CASE("shift norm is clipped to twice the noise scale") {
  const auto bc = linear({1e6f, 1e6f, 1e6f});
  GuidanceModels models{{&bc}, {}, nullptr, nullptr};
  auto cfg = GuidanceConfig::defaults(50);
  std::vector<TraceStep> tr;
  ad::Tensor mu(kX.shape());
  const double sigma = 0.01;
  guided_mean(mu, sigma, kX, kCond, 3, models, cfg, 50, &tr);
  const double cap = 2.0 * std::sqrt(sigma * 3);
  double n0 = 0.0;
  for (int i = 0; i < 3; ++i) n0 += static_cast<double>(mu[i]) * mu[i];
  CHECK(std::sqrt(n0) == doctest::Approx(cap).epsilon(1e-5));
  CHECK(tr[0].clipped);
  CHECK(tr[0].shift == doctest::Approx(cap));
}

TEST_CASE("ensemble gradient weights members by their probability") {
  const auto r1 = linear({1.0f, 0.0f, 0.0f}, 0.2);
  const auto r2 = linear({0.0f, 1.0f, 0.0f}, 0.6);
  const std::vector<const rewards::RewardFunction*> ens{&r1, &r2};
  const auto p = ensemble_reward(ens, kX, kCond, 4);
  CHECK(p[0] == doctest::Approx(0.4));
  const auto g = ensemble_log_grad(ens, kX, kCond, 4, 1e-6);
  CHECK(g.grad[0] == doctest::Approx(0.2 / 0.8));
  CHECK(g.grad[1] == doctest::Approx(0.6 / 0.8));
  CHECK(g.grad[2] == 0.0f);
  CHECK(ensemble_log_grad(ens, kX, kCond, 4, 0.5).grad[0] == 0.0f);

  const auto single = ensemble_log_grad({&r1}, kX, kCond, 4, 1e-6);
  CHECK(vec(single.grad.values()) == vec(r1.log_grad(kX, kCond, {4, 4}, 1e-6).grad.values()));
  const auto scaled = reward_log_grad(r1, kX, kCond, 4, 2.5, 1e-6);
  CHECK(scaled[0] == doctest::Approx(2.5));
  CHECK_THROWS(ensemble_reward({}, kX, kCond, 1));
}

TEST_CASE("inactive guidance reproduces the unguided sampler bit for bit") {
  const auto s = diffusion::make_schedule(30);
  ZeroEps model;
  const ad::Tensor cond({5, 6, 4, 4});
  diffusion::SampleOptions opt;
  opt.seed = 77;
  opt.chunk = 2;
  const auto plain = diffusion::sample(model, cond, s, opt);
  const auto bc = linear(std::vector<float>(16, 1.0f));
  const auto zero = censored_sample(model, cond, s, {{&bc}, {&bc}, nullptr, nullptr}, GuidanceConfig::zero(), opt);
  CHECK(vec(zero.sample.raw.values()) == vec(plain.raw.values()));
  const auto none = censored_sample(model, cond, s, {}, GuidanceConfig::defaults(30), opt);
  CHECK(vec(none.sample.raw.values()) == vec(plain.raw.values()));

  const auto guided = censored_sample(model, cond, s, {{&bc}, {}, nullptr, nullptr}, GuidanceConfig::defaults(30), opt);
  CHECK(vec(guided.sample.raw.values()) != vec(plain.raw.values()));
  REQUIRE(guided.traces.size() == 5);
  CHECK(guided.traces[4].steps.size() == 30);
  CHECK(guided.traces[4].steps.front().t == 30);
  CHECK(!guided.traces[4].steps.front().active_bc);
  CHECK(guided.traces[4].steps.back().active_bc);
  std::ostringstream csv;
  guided.traces[0].write_csv(csv);
  const std::string text = csv.str();
  CHECK(text.rfind("t,grad_bc,grad_fm,grad_c,grad_f,shift,active_bc,active_fm,clipped\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 31);
}

TEST_CASE("guided Gaussian chains match the closed-form mean") {
  // For x0 ~ N(m, I) the posterior mean is sqrt(alpha_t) x_t + beta_t sqrt(abar_t) / sqrt(alpha_t) m,
  // so with a constant log-reward gradient a the chain mean obeys the affine recursion
  // E[x_{t-1}] = sqrt(alpha_t) E[x_t] + beta_t sqrt(abar_t / alpha_t) m + lambda alpha Sigma_t a 1{t < MLN}.
  const int T = 40, H = 2, W = 2, N = 2000;
  const auto s = diffusion::make_schedule(T);
  GaussianEps model;
  model.s = &s;
  model.m = {0.3, -0.2, 0.0, 0.1};
  const auto bc = linear({2.0f, 0.0f, -3.0f, 1.0f});
  auto cfg = unclipped(T);
  cfg.lambda_bc = 1.5;
  cfg.alpha_bc = 1.0;
  cfg.eta_c = 0.0;
  cfg.mln_bc = 25;

  std::vector<double> mean(4, 0.0), var(4, 1.0);
  for (int t = T; t >= 1; --t) {
    const double sa = std::sqrt(s.alpha[t]);
    for (int i = 0; i < 4; ++i) {
      mean[i] = sa * mean[i] + s.beta[t] * std::sqrt(s.alpha_bar[t]) / sa * model.m[i];
      if (t < cfg.mln_bc) mean[i] += cfg.lambda_bc * cfg.alpha_bc * s.sigma[t] * bc.a[i];
      var[i] = s.alpha[t] * var[i] + (t > 1 ? s.sigma[t] : 0.0);
    }
  }

  diffusion::SampleOptions opt;
  opt.seed = 2024;
  opt.chunk = 500;
  const auto r = censored_sample(model, ad::Tensor({N, 6, H, W}), s, {{&bc}, {}, nullptr, nullptr}, cfg, opt);
  for (int i = 0; i < 4; ++i) {
    double m = 0.0;
    for (int n = 0; n < N; ++n) m += r.sample.raw[static_cast<std::size_t>(n) * 4 + i];
    m /= N;
    const double se = std::sqrt(var[i] / N);
    CHECK(std::abs(m - mean[i]) < 3.0 * se);
  }
  // The guidance term is large enough to matter at this sample size.
  double shift0 = 0.0;
  for (int t = 1; t < cfg.mln_bc; ++t) {
    double prod = 1.0;
    for (int u = t - 1; u >= 1; --u) prod *= std::sqrt(s.alpha[u]);
    shift0 += cfg.lambda_bc * s.sigma[t] * bc.a[0] * prod;
  }
  CHECK(shift0 > 10.0 * std::sqrt(var[0] / N));
}
