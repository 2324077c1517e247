// Acceptance checks P1..P8. One PASS/FAIL line per criterion; exit 0 only if
// every selected criterion passes. P6 and P7 share cached pipeline artifacts
// under --data-dir, so a second run only re-evaluates what changed.
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include <CLI11.hpp>

#include "topo/autodiff/gradcheck.hpp"
#include "topo/diffusion/denoiser.hpp"
#include "topo/diffusion/sampler.hpp"
#include "topo/fea/fea.hpp"
#include "topo/guidance/guidance.hpp"
#include "topo/pipeline/criteria.hpp"
#include "topo/pipeline/pipeline.hpp"
#include "topo/rewards/oracle.hpp"
#include "topo/rewards/training.hpp"
#include "topo/simp/simp.hpp"

using namespace topo;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Tolerances and budgets.
constexpr double kPatchTol = 1e-8;
constexpr double kDenseRelTol = 1e-6;
constexpr double kEquilibriumTol = 1e-8;
constexpr double kP1Seconds = 10;
constexpr double kSimpRatio = 0.5;
constexpr double kSimpVolumeTol = 0.005;
constexpr double kP2Seconds = 120;
constexpr double kGradRelTol = 1e-3;
constexpr double kP3Seconds = 60;
constexpr double kMomentSigmas = 3;
constexpr double kPosteriorTol = 1e-6;
constexpr double kShiftTol = 1e-6;
constexpr double kToySigmas = 3;
constexpr int kToyChains = 2000;
constexpr double kP5Seconds = 300;
constexpr double kOracleAccuracy = 0.8;
constexpr double kSeparableAccuracy = 0.95;
// Guards against degenerate samplers (all solid or all void), which pass the
// failure-rate checks trivially.
constexpr double kMaxBaselineVolumeError = 0.1;

struct Result {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

std::vector<float> vec(std::span<const float> s) { return {s.begin(), s.end()}; }

ad::Tensor randn(ad::Shape shape, std::mt19937_64& rng, float sd = 1.0f) {
  std::normal_distribution<float> n(0.0f, sd);
  ad::Tensor t(std::move(shape));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

fea::ScenarioSpec cantilever(int nx, int ny, double vf) {
  fea::ScenarioSpec s;
  s.nel_x = nx;
  s.nel_y = ny;
  for (int iy = 0; iy <= ny; ++iy) s.supports.push_back({s.node(0, iy), true, true});
  s.loads.push_back({s.node(nx, ny / 2), 0.0, -1.0});
  s.volume_fraction = vf;
  return s;
}

// ---------------------------------------------------------------- P1

// Closed-form unit-square plane-stress stiffness (E = 1), BL, BR, TR, TL order.
fea::Matrix8 closed_form_stiffness(double nu) {
  Eigen::Matrix4d a11, a12, b11, b12;
  a11 << 12, 3, -6, -3, 3, 12, 3, 0, -6, 3, 12, -3, -3, 0, -3, 12;
  a12 << -6, -3, 0, 3, -3, -6, -3, -6, 0, -3, -6, 3, 3, -6, 3, -6;
  b11 << -4, 3, -2, 9, 3, -4, -9, 4, -2, -9, -4, -3, 9, 4, -3, -4;
  b12 << 2, -3, 4, -9, -3, 2, 9, -2, 4, 9, 2, 3, -9, -2, 3, 2;
  fea::Matrix8 a, b;
  a << a11, a12, a12.transpose(), a11;
  b << b11, b12, b12.transpose(), b11;
  return (a + nu * b) / (24.0 * (1.0 - nu * nu));
}

double dense_compliance(const fea::ScenarioSpec& s, const fea::Field2D& rho, const fea::Material& m) {
  const fea::Matrix8 ke = m.youngs * closed_form_stiffness(m.poisson);
  const int n = s.dof_count();
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(n, n);
  for (int ey = 0; ey < s.nel_y; ++ey) {
    for (int ex = 0; ex < s.nel_x; ++ex) {
      const int nodes[4] = {(ey + 1) * (s.nel_x + 1) + ex, (ey + 1) * (s.nel_x + 1) + ex + 1,
                            ey * (s.nel_x + 1) + ex + 1, ey * (s.nel_x + 1) + ex};
      const double e = m.e_min + std::pow(rho(ex, ey), m.penal) * (1.0 - m.e_min);
      for (int a = 0; a < 8; ++a)
        for (int b = 0; b < 8; ++b) k(2 * nodes[a / 2] + a % 2, 2 * nodes[b / 2] + b % 2) += e * ke(a, b);
    }
  }
  Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
  for (const auto& l : s.loads) {
    f[2 * l.node] += l.fx;
    f[2 * l.node + 1] += l.fy;
  }
  std::vector<char> fixed(n, 0);
  for (const auto& sp : s.supports) {
    if (sp.fix_x) fixed[2 * sp.node] = 1;
    if (sp.fix_y) fixed[2 * sp.node + 1] = 1;
  }
  std::vector<int> keep;
  for (int d = 0; d < n; ++d)
    if (!fixed[d]) keep.push_back(d);
  Eigen::MatrixXd kr(keep.size(), keep.size());
  Eigen::VectorXd fr(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    fr[i] = f[keep[i]];
    for (std::size_t j = 0; j < keep.size(); ++j) kr(i, j) = k(keep[i], keep[j]);
  }
  return fr.dot(kr.partialPivLu().solve(fr));
}

void p1(Result& r) {
  // Uniaxial patch: u_x = x / E, u_y = -nu y / E under unit traction.
  fea::ScenarioSpec s;
  s.nel_x = 1;
  s.nel_y = 1;
  const int tl = s.node(0, 0), tr = s.node(1, 0), bl = s.node(0, 1), br = s.node(1, 1);
  s.supports = {{bl, true, true}, {tl, true, false}};
  s.loads = {{tr, 0.5, 0.0}, {br, 0.5, 0.0}};
  fea::Material m;
  m.e_min = 0.0;
  const auto patch = fea::assemble_and_solve(fea::Field2D(1, 1, 1.0), s, m);
  const double patch_err = std::max({std::fabs(patch.u[2 * br] - 1.0), std::fabs(patch.u[2 * tr] - 1.0),
                                     std::fabs(patch.u[2 * br + 1]), std::fabs(patch.u[2 * tr + 1] + m.poisson),
                                     std::fabs(patch.u[2 * tl + 1] + m.poisson)});
  r.require(patch_err < kPatchTol, "patch");

  const auto cant = cantilever(32, 16, 0.5);
  const fea::Material mat;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  fea::Field2D rho(32, 16);
  for (double& v : rho.v) v = u(rng);
  double dense_err = 0.0;
  for (const auto& field : {fea::Field2D(32, 16, 1.0), rho}) {
    const double c = fea::assemble_and_solve(field, cant, mat).compliance;
    dense_err = std::max(dense_err, std::fabs(c / dense_compliance(cant, field, mat) - 1.0));
  }
  r.require(dense_err < kDenseRelTol, "dense oracle");

  fea::ScenarioSpec e;
  e.nel_x = 16;
  e.nel_y = 8;
  e.supports = {{e.node(0, 8), true, true}, {e.node(16, 8), false, true}};
  e.loads = {{e.node(8, 0), 0.3, -1.0}, {e.node(4, 0), -0.2, -0.5}};
  fea::Field2D rho2(16, 8);
  std::uniform_real_distribution<double> u2(0.05, 1.0);
  for (double& v : rho2.v) v = u2(rng);
  const auto sol = fea::assemble_and_solve(rho2, e, mat);
  const auto res = fea::nodal_residual(sol, rho2, mat);
  double rx = 0.0, ry = 0.0;
  for (const auto& sp : e.supports) {
    if (sp.fix_x) rx += res[2 * sp.node];
    if (sp.fix_y) ry += res[2 * sp.node + 1];
  }
  const double eq_err = std::max(std::fabs(rx + (0.3 - 0.2)), std::fabs(ry + (-1.0 - 0.5)));
  r.require(eq_err < kEquilibriumTol, "equilibrium");
  r.detail << "patch " << patch_err << ", dense rel " << dense_err << ", equilibrium " << eq_err;
}

// ---------------------------------------------------------------- P2

void p2(Result& r) {
  const auto spec = cantilever(64, 32, 0.5);
  const auto out = simp::optimize(spec);
  const double ratio = out.compliance / out.initial_compliance;
  const double vol = std::fabs(out.density.mean() - spec.volume_fraction);
  const auto v = rewards::oracle_verdict(out.binary, spec);
  r.require(ratio < kSimpRatio, "compliance ratio");
  r.require(vol <= kSimpVolumeTol, "volume");
  r.require(v.bc_valid && v.fm_valid, "oracles");
  r.detail << "C/C_uniform " << ratio << ", |vol - 0.5| " << vol << ", bc " << v.bc_valid << " fm " << v.fm_valid
           << ", " << out.history.size() << " iterations";
}

// ---------------------------------------------------------------- P3

diffusion::DenoiserConfig micro_denoiser() {
  diffusion::DenoiserConfig c;
  c.height = 8;
  c.width = 8;
  c.widths = {4, 8};
  c.time_dim = 8;
  c.groups = 2;
  return c;
}

rewards::RewardConfig micro_reward(rewards::RewardKind kind) {
  rewards::RewardConfig c;
  c.kind = kind;
  c.height = 8;
  c.width = 8;
  c.widths = {4, 4, 8};
  c.groups = 2;
  c.T = 20;
  c.mln = 20;
  return c;
}

void p3(Result& r) {
  std::mt19937_64 rng(4);
  ad::GradcheckOptions opt;
  opt.tolerance = kGradRelTol;
  opt.inputs = {"x_t"};
  opt.analytic_float64 = true;

  const auto den = diffusion::Denoiser::create(micro_denoiser(), 7);
  const auto sched = diffusion::make_schedule(25);
  const ad::Tensor x0 = randn({2, 1, 8, 8}, rng, 0.5f), eps = randn({2, 1, 8, 8}, rng);
  ad::Graph g = den.graph();
  const auto loss = g.mse(g.output("eps"), g.input("target"));
  ad::TensorMap in = den.bind(diffusion::q_sample(x0, {3, 15}, eps, sched), randn({2, 6, 8, 8}, rng), {3, 15});
  in.emplace("target", eps);
  const auto rd = ad::gradcheck(g, den.params(), in, loss, opt);
  r.require(rd.pass, "denoiser");
  r.detail << "denoiser max rel " << rd.max_rel_error;

  opt.inputs = {"x"};
  for (auto kind : {rewards::RewardKind::BC, rewards::RewardKind::FM}) {
    const auto model = rewards::RewardModel::create(micro_reward(kind), 11);
    ad::Graph rg = model.graph();
    const auto l = rg.bce_with_logits(rg.output("logit"), rg.input("y"));
    ad::TensorMap rin = model.bind(randn({2, 1, 8, 8}, rng), randn({2, 6, 8, 8}, rng), {0, 9});
    rin.emplace("y", ad::Tensor({2, 1}, {1.0f, 0.0f}));
    const auto rr = ad::gradcheck(rg, model.params(), rin, l, opt);
    r.require(rr.pass, rewards::to_string(kind) + " head");
    r.detail << ", " << rewards::to_string(kind) << " max rel " << rr.max_rel_error;

    if (kind == rewards::RewardKind::BC) {
      // Negative control: one doubled element must be caught.
      auto bad = opt;
      bad.tamper = [](ad::GradientsD& grads) { grads.inputs.at("x")[5] *= 2.0; };
      const auto rc = ad::gradcheck(rg, model.params(), rin, l, bad);
      r.require(!rc.pass, "negative control");
      r.detail << ", corrupted max rel " << rc.max_rel_error;
    }
  }
}

// ---------------------------------------------------------------- P4

struct ZeroEps : diffusion::EpsPredictor {
  ad::Tensor predict_eps(const ad::Tensor& x, const ad::Tensor&, const std::vector<int>&) const override {
    return ad::Tensor(x.shape());
  }
};

struct FixedEps : diffusion::EpsPredictor {
  ad::Tensor eps;
  ad::Tensor predict_eps(const ad::Tensor&, const ad::Tensor&, const std::vector<int>&) const override { return eps; }
};

void p4(Result& r) {
  const auto s = diffusion::make_schedule(100);
  std::mt19937_64 rng(2024);
  const int n = 10000;
  const float x0v = 0.7f;
  double worst_z = 0.0;
  for (int t : {1, 10, 50, 100}) {
    const ad::Tensor eps = randn({n, 1, 1, 1}, rng);
    const auto x = diffusion::q_sample(ad::Tensor({n, 1, 1, 1}, x0v), t, eps, s);
    double m = 0, m2 = 0;
    for (float v : x.values()) m += v;
    m /= n;
    for (float v : x.values()) m2 += (v - m) * (v - m);
    const double var = m2 / (n - 1), true_var = 1 - s.alpha_bar[t];
    worst_z = std::max({worst_z, std::fabs(m - std::sqrt(s.alpha_bar[t]) * x0v) / std::sqrt(true_var / n),
                        std::fabs(var - true_var) / (true_var * std::sqrt(2.0 / (n - 1)))});
  }
  r.require(worst_z < kMomentSigmas, "q_sample moments");

  // q(x_{t-1} | x_t, x0) mean with x0 reconstructed from eps.
  const ad::Tensor x = randn({2, 1, 4, 4}, rng), c({2, 6, 4, 4});
  double worst = 0.0;
  for (int t : {1, 2, 17, 63, 100}) {
    FixedEps f;
    f.eps = randn(x.shape(), rng);
    const auto mu = diffusion::posterior_mean(f, x, t, c, s).mean;
    const double ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double x0 = (x[i] - std::sqrt(1 - ab) * f.eps[i]) / std::sqrt(ab);
      const double ref = std::sqrt(abp) * s.beta[t] / (1 - ab) * x0 + std::sqrt(s.alpha[t]) * (1 - abp) / (1 - ab) * x[i];
      worst = std::max(worst, std::fabs(ref - mu[i]));
    }
  }
  r.require(worst < kPosteriorTol, "posterior mean");

  const auto small = diffusion::make_schedule(25);
  const auto den = diffusion::Denoiser::create(micro_denoiser(), 3);
  const ad::Tensor cond = randn({5, 6, 8, 8}, rng);
  diffusion::SampleOptions opt;
  opt.seed = 42;
  opt.chunk = 2;
  const auto plain = diffusion::sample(den, cond, small, opt);
  opt.hook = [](ad::Tensor& mu, double, const ad::Tensor&, int, const ad::Tensor&, int) {
    for (auto& v : mu.values()) v += 0.0f;
  };
  const bool same = vec(diffusion::sample(den, cond, small, opt).raw.values()) == vec(plain.raw.values());
  r.require(same, "zero hook");
  r.detail << "moment max |z| " << worst_z << ", posterior max err " << worst << ", zero hook bitwise " << same;
}

// ---------------------------------------------------------------- P5

struct LinearReward : rewards::RewardFunction {
  std::vector<float> a;
  std::vector<double> probability(const ad::Tensor& x, const ad::Tensor&, const std::vector<int>&) const override {
    return std::vector<double>(static_cast<std::size_t>(x.dim(0)), 0.5);
  }
  rewards::LogRewardGrad log_grad(const ad::Tensor& x, const ad::Tensor&, const std::vector<int>&,
                                  double) const override {
    rewards::LogRewardGrad g{probability(x, {}, {}), ad::Tensor(x.shape())};
    const std::size_t per = x.size() / x.dim(0);
    for (std::size_t i = 0; i < x.size(); ++i) g.grad[i] = a[i % per];
    return g;
  }
};

// Exact eps for x0 ~ N(m, I).
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

void p5(Result& r) {
  const ad::Tensor x({2, 1, 1, 3}), cond({2, 6, 1, 3});
  LinearReward bc;
  bc.a = {1.0f, -2.0f, 0.5f};
  LinearReward fm;
  fm.a = {0.5f, 0.5f, -1.0f};
  guidance::GuidanceModels models{{&bc}, {}, nullptr, nullptr};
  auto cfg = guidance::GuidanceConfig::defaults(50);
  cfg.clip = false;
  cfg.eta_c = 0.0;
  cfg.lambda_bc = 0.7;
  cfg.alpha_bc = 1.0;
  const double sigma = 0.02;
  ad::Tensor mu(x.shape());
  guidance::guided_mean(mu, sigma, x, cond, 10, models, cfg, 50);
  double shift_err = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) shift_err = std::max(shift_err, std::fabs(mu[i] - 0.7 * sigma * bc.a[i % 3]));
  r.require(shift_err < kShiftTol, "single-step shift");

  auto sharp = cfg, flat = cfg;
  sharp.lambda_bc = 0.5;
  sharp.alpha_bc = 3.0;
  flat.lambda_bc = 1.5;
  flat.alpha_bc = 1.0;
  std::mt19937_64 rng(1);
  ad::Tensor ma = randn(x.shape(), rng), mb = ma;
  guidance::guided_mean(ma, 0.037, x, cond, 12, models, sharp, 50);
  guidance::guided_mean(mb, 0.037, x, cond, 12, models, flat, 50);
  const bool bitwise = vec(ma.values()) == vec(mb.values());
  r.require(bitwise, "sharpening equivalence");

  // Gating at T = 100: bc active for t < 100, fm for t < 30.
  guidance::GuidanceModels both{{&bc}, {&fm}, nullptr, nullptr};
  auto gate = guidance::GuidanceConfig::defaults(100);
  gate.clip = false;
  gate.eta_c = 0.0;
  bool gating = true;
  for (int t = 1; t <= 100; ++t) {
    std::vector<guidance::TraceStep> tr;
    ad::Tensor m0(x.shape());
    guidance::guided_mean(m0, 0.01, x, cond, t, both, gate, 100, &tr);
    const bool want_bc = t < 100, want_fm = t < 30;
    const double expect = 0.01 * 2.0 * ((want_bc ? bc.a[0] : 0.0f) + (want_fm ? fm.a[0] : 0.0f));
    gating = gating && tr[0].active_bc == want_bc && tr[0].active_fm == want_fm &&
             (want_bc || want_fm ? std::fabs(m0[0] - expect) < kShiftTol : m0[0] == 0.0f);
  }
  r.require(gating, "window gating");

  // Gaussian toy: E[x_{t-1}] = sqrt(a_t) E[x_t] + b_t sqrt(abar_t / a_t) m + lambda Sigma_t g 1{t < MLN}.
  const int T = 40;
  const auto s = diffusion::make_schedule(T);
  GaussianEps model;
  model.s = &s;
  model.m = {0.3, -0.2, 0.0, 0.1};
  LinearReward toy;
  toy.a = {2.0f, 0.0f, -3.0f, 1.0f};
  auto tc = guidance::GuidanceConfig::defaults(T);
  tc.clip = false;
  tc.eta_c = 0.0;
  tc.lambda_bc = 1.5;
  tc.alpha_bc = 1.0;
  tc.mln_bc = 25;
  std::vector<double> mean(4, 0.0), var(4, 1.0);
  for (int t = T; t >= 1; --t) {
    const double sa = std::sqrt(s.alpha[t]);
    for (int i = 0; i < 4; ++i) {
      mean[i] = sa * mean[i] + s.beta[t] * std::sqrt(s.alpha_bar[t]) / sa * model.m[i];
      if (t < tc.mln_bc) mean[i] += tc.lambda_bc * s.sigma[t] * toy.a[i];
      var[i] = s.alpha[t] * var[i] + (t > 1 ? s.sigma[t] : 0.0);
    }
  }
  diffusion::SampleOptions opt;
  opt.seed = 2024;
  opt.chunk = 500;
  const auto res = guidance::censored_sample(model, ad::Tensor({kToyChains, 6, 2, 2}), s, {{&toy}, {}, nullptr, nullptr},
                                             tc, opt);
  double worst_z = 0.0;
  for (int i = 0; i < 4; ++i) {
    double m = 0.0;
    for (int n = 0; n < kToyChains; ++n) m += res.sample.raw[static_cast<std::size_t>(n) * 4 + i];
    m /= kToyChains;
    worst_z = std::max(worst_z, std::fabs(m - mean[i]) / std::sqrt(var[i] / kToyChains));
  }
  r.require(worst_z < kToySigmas, "Gaussian toy");
  r.detail << "shift err " << shift_err << ", sharpening bitwise " << bitwise << ", gating exact " << gating
           << ", toy max |z| " << worst_z;
}

// ---------------------------------------------------------------- P6, P7

// The scaled reproduction: 32x32 grid, T = 100, desk-sized networks.
json p7_config(const fs::path& data_dir) {
  return {{"seed", 7},
          {"data_dir", data_dir.string()},
          {"grid", {{"nel_x", 32}, {"nel_y", 32}}},
          {"dataset", {{"n", 800}}},
          {"schedule", {{"T", 100}}},
          {"denoiser",
           {{"model", {{"widths", {16, 32, 64}}, {"time_dim", 32}, {"groups", 8}}},
            {"train", {{"steps", 4000}, {"batch_size", 16}, {"learning_rate", 0.002}}}}},
          {"reward", {{"labels_per_stage", 150}}},
          {"guidance", {{"lambda_bc", 50.0}, {"lambda_fm", 50.0}}},
          {"evaluation", {{"scenarios", 100}, {"per_condition", 3}}}};
}

// A two-pixel beam between a support edge and a point load. Bad bc samples
// stop short of the support, bad fm samples carry a loose block.
std::vector<rewards::LabeledSample> separable_set(rewards::RewardKind kind, int n, std::uint64_t seed) {
  constexpr int side = 16;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> row(6, 8), ix(4, side - 3), gap(4, 7);
  std::vector<rewards::LabeledSample> out;
  for (int i = 0; i < n; ++i) {
    const bool bad = i % 2 == 1;
    const bool left = rng() % 2 == 0;
    fea::Field2D f(side, side);
    const int r = row(rng);
    const int cut = kind == rewards::RewardKind::BC && bad ? gap(rng) : 0;
    for (int k = cut; k < side; ++k)
      for (int y = r; y < r + 2; ++y) f(left ? k : side - 1 - k, y) = 1.0;
    if (kind == rewards::RewardKind::FM && bad) {
      const int cx = ix(rng), cy = rng() % 2 ? 1 : side - 3;
      for (int y = cy; y < cy + 2; ++y)
        for (int x = cx; x < cx + 2; ++x) f(x, y) = 1.0;
    }
    ad::Tensor cond({6, side, side});
    const auto at = [&](int ch, int x, int y) -> float& { return cond[(ch * side + y) * side + x]; };
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) at(fea::kVolumeFraction, x, y) = 0.4f;
      at(fea::kSupportMask, left ? 0 : side - 1, y) = 1.0f;
    }
    at(fea::kLoadY, left ? side - 1 : 0, r) = -1.0f;
    out.push_back({f, cond, bad ? 0 : 1});
  }
  return out;
}

void p6(Result& r, pipeline::Pipeline& p) {
  // Oracle-labeled generator samples, stage 1 (labels_per_stage of them).
  for (auto kind : {rewards::RewardKind::BC, rewards::RewardKind::FM}) {
    const auto path = p.reward_path(kind, 1);
    const auto name = rewards::to_string(kind);
    if (path.empty()) {
      r.require(false, name + " labels hold a single class");
      continue;
    }
    std::ifstream in(path.parent_path() / "stage.json");
    const json metrics = json::parse(in).at("summary");
    const double acc = metrics.at("heldout_accuracy").get<double>();
    const int held = metrics.at("heldout_samples").get<int>();
    const int train = metrics.at("train_samples").get<int>();
    r.require(acc >= kOracleAccuracy, name + " oracle-labeled");
    r.detail << name << " " << acc << " on " << held << " held out (" << train << " train), ";
  }
  const auto sched = diffusion::make_schedule(50);
  for (auto kind : {rewards::RewardKind::BC, rewards::RewardKind::FM}) {
    rewards::RewardConfig c;
    c.kind = kind;
    c.height = 16;
    c.width = 16;
    c.widths = {8, 16, 16};
    c.groups = 4;
    c.T = 50;
    c.mln = 10;
    rewards::RewardTrainOptions o;
    o.epochs = 12;
    o.seed = 5;
    o.set.K = 4;
    const auto res = rewards::train_reward(c, separable_set(kind, 100, 3), sched, o);
    const double fresh = rewards::clean_accuracy(res.model, separable_set(kind, 60, 99));
    r.require(res.metrics.heldout_accuracy >= kSeparableAccuracy, rewards::to_string(kind) + " separable");
    r.detail << "separable " << rewards::to_string(kind) << " " << res.metrics.heldout_accuracy << " (fresh " << fresh
             << ")" << (kind == rewards::RewardKind::BC ? ", " : "");
  }
}

void p7(Result& r, pipeline::Pipeline& p) {
  const auto dir = p.evaluate();
  std::ifstream in(dir / "report.json");
  const json report = json::parse(in);
  for (const auto& c : pipeline::failure_rate_checks(report)) {
    r.require(c.pass, c.name);
    r.detail << c.name << ": " << c.detail << "; ";
  }
  const double vol = report.at("samplers").at(0).at("mean_volume_error").get<double>();
  r.require(vol < kMaxBaselineVolumeError, "baseline volume error");
  r.detail << "baseline mean |vol - vf| " << vol << "; report " << (dir / "report.md").string();
}

// ---------------------------------------------------------------- P8

void p8(Result& r) {
  const auto sched = diffusion::make_schedule(30);
  const auto den = diffusion::Denoiser::create(micro_denoiser(), 5);
  auto rc = micro_reward(rewards::RewardKind::BC);
  rc.T = 30;
  rc.mln = 30;
  const auto bc = rewards::RewardModel::create(rc, 1);
  rc.kind = rewards::RewardKind::FM;
  const auto fm = rewards::RewardModel::create(rc, 2);
  rewards::RegressorConfig gc;
  gc.height = 8;
  gc.width = 8;
  gc.widths = {4, 4, 8};
  gc.groups = 2;
  const auto reg = rewards::ComplianceRegressor::create(gc, 3);
  std::mt19937_64 rng(9);
  const ad::Tensor cond = randn({6, 6, 8, 8}, rng);
  diffusion::SampleOptions opt;
  opt.seed = 1234;
  opt.chunk = 4;
  const auto plain = diffusion::sample(den, cond, sched, opt);
  const guidance::GuidanceModels models{{&bc}, {&fm}, &reg, &fm};
  const auto zero = guidance::censored_sample(den, cond, sched, models, guidance::GuidanceConfig::zero(), opt);
  const bool same = vec(zero.sample.raw.values()) == vec(plain.raw.values());
  // The same models do move the samples once switched on.
  const auto on = guidance::censored_sample(den, cond, sched, models, guidance::GuidanceConfig::defaults(30), opt);
  const bool moved = vec(on.sample.raw.values()) != vec(plain.raw.values());
  r.require(same, "zero config bitwise");
  r.require(moved, "guidance active control");
  r.detail << "zero config bitwise " << same << " over " << plain.raw.size() << " values, active config differs " << moved;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks P1..P8"};
  fs::path data_dir = "acceptance-runs";
  std::string only;
  app.add_option("--data-dir", data_dir, "cache for the P6/P7 pipeline artifacts");
  app.add_option("--only", only, "comma-separated subset, e.g. P1,P5");
  CLI11_PARSE(app, argc, argv);

  std::set<std::string> selected;
  std::stringstream ss(only);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) selected.insert(item);
  const auto wanted = [&](const std::string& id) { return selected.empty() || selected.count(id) > 0; };

  std::unique_ptr<pipeline::Pipeline> pipe;
  const auto pipeline_for = [&]() -> pipeline::Pipeline& {
    if (!pipe) pipe = std::make_unique<pipeline::Pipeline>(pipeline::RunConfig::from_json(p7_config(data_dir)), &std::cerr);
    return *pipe;
  };

  struct Criterion {
    std::string id, title;
    double budget_s;  // 0 = no runtime bound
    std::function<void(Result&)> run;
  };
  const std::vector<Criterion> criteria{
      {"P1", "FEA correctness", kP1Seconds, p1},
      {"P2", "SIMP quality", kP2Seconds, p2},
      {"P3", "autodiff gradcheck", kP3Seconds, p3},
      {"P4", "diffusion math", 0, p4},
      {"P5", "guidance closed form", kP5Seconds, p5},
      {"P6", "reward learning", 0, [&](Result& r) { p6(r, pipeline_for()); }},
      {"P7", "scaled failure-rate reproduction", 0, [&](Result& r) { p7(r, pipeline_for()); }},
      {"P8", "reduction identity", 0, p8},
  };

  bool all = true;
  for (const auto& c : criteria) {
    if (!wanted(c.id)) continue;
    Result r;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(r);
    } catch (const std::exception& e) {
      r.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0) r.require(secs < c.budget_s, "runtime budget " + std::to_string(c.budget_s) + " s");
    std::cout << (r.pass ? "PASS " : "FAIL ") << c.id << " " << c.title << ": " << r.detail.str() << " ("
              << std::round(secs * 10) / 10 << " s)" << std::endl;
    all = all && r.pass;
  }
  return all ? 0 : 1;
}
