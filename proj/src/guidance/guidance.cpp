#include "topo/guidance/guidance.hpp"

#include <cmath>
#include <stdexcept>

namespace topo::guidance {

GuidanceConfig GuidanceConfig::defaults(int T) { return GuidanceConfig{}.resolved(T); }

GuidanceConfig GuidanceConfig::zero() {
  GuidanceConfig c;
  c.lambda_bc = c.lambda_fm = c.eta_c = c.eta_f = 0.0;
  return c;
}

GuidanceConfig GuidanceConfig::resolved(int T) const {
  GuidanceConfig c = *this;
  if (c.mln_bc == 0) c.mln_bc = T;
  if (c.mln_fm == 0) c.mln_fm = std::max(1, static_cast<int>(std::floor(0.3 * T)));
  return c;
}

void GuidanceConfig::validate(int T) const {
  const GuidanceConfig c = resolved(T);
  for (double v : {c.lambda_bc, c.lambda_fm, c.eta_c, c.eta_f}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("guidance strengths must be finite and >= 0");
  }
  if (!(c.alpha_bc >= 1.0) || !(c.alpha_fm >= 1.0)) throw std::invalid_argument("sharpening exponents must be >= 1");
  if (c.mln_bc < 1 || c.mln_bc > T || c.mln_fm < 1 || c.mln_fm > T) {
    throw std::invalid_argument("MLN cutoffs must lie in [1, T]");
  }
  if (!(c.delta > 0.0 && c.delta < 1.0)) throw std::invalid_argument("probability floor must lie in (0, 1)");
}

bool GuidanceConfig::inactive() const { return lambda_bc == 0.0 && lambda_fm == 0.0 && eta_c == 0.0 && eta_f == 0.0; }

nlohmann::json GuidanceConfig::to_json() const {
  return {{"lambda_bc", lambda_bc}, {"lambda_fm", lambda_fm}, {"eta_c", eta_c}, {"eta_f", eta_f},
          {"alpha_bc", alpha_bc},   {"alpha_fm", alpha_fm},   {"mln_bc", mln_bc}, {"mln_fm", mln_fm},
          {"delta", delta},         {"clip", clip}};
}

GuidanceConfig GuidanceConfig::from_json(const nlohmann::json& j) {
  GuidanceConfig c;
  c.lambda_bc = j.value("lambda_bc", c.lambda_bc);
  c.lambda_fm = j.value("lambda_fm", c.lambda_fm);
  c.eta_c = j.value("eta_c", c.eta_c);
  c.eta_f = j.value("eta_f", c.eta_f);
  c.alpha_bc = j.value("alpha_bc", c.alpha_bc);
  c.alpha_fm = j.value("alpha_fm", c.alpha_fm);
  c.mln_bc = j.value("mln_bc", c.mln_bc);
  c.mln_fm = j.value("mln_fm", c.mln_fm);
  c.delta = j.value("delta", c.delta);
  c.clip = j.value("clip", c.clip);
  return c;
}

namespace {

std::vector<int> repeat_t(const ad::Tensor& x, int t) { return std::vector<int>(static_cast<std::size_t>(x.dim(0)), t); }

void check_finite(const ad::Tensor& g, int t, const char* what) {
  if (!g.all_finite()) {
    throw std::runtime_error(std::string("non-finite ") + what + " gradient at t = " + std::to_string(t));
  }
}

double item_norm(const ad::Tensor& g, std::size_t n, std::size_t per) {
  double s = 0.0;
  for (std::size_t i = n * per; i < (n + 1) * per; ++i) s += static_cast<double>(g[i]) * g[i];
  return std::sqrt(s);
}

}  // namespace

ad::Tensor reward_log_grad(const rewards::RewardFunction& reward, const ad::Tensor& x, const ad::Tensor& cond, int t,
                           double alpha, double delta) {
  ad::Tensor g = reward.log_grad(x, cond, repeat_t(x, t), delta).grad;
  check_finite(g, t, "log-reward");
  for (auto& v : g.values()) v = static_cast<float>(alpha * v);
  return g;
}

std::vector<double> ensemble_reward(const std::vector<const rewards::RewardFunction*>& models, const ad::Tensor& x,
                                    const ad::Tensor& cond, int t) {
  if (models.empty()) throw std::invalid_argument("ensemble needs at least one reward model");
  std::vector<double> mean(static_cast<std::size_t>(x.dim(0)), 0.0);
  for (const auto* m : models) {
    const auto p = m->probability(x, cond, repeat_t(x, t));
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += p[i] / static_cast<double>(models.size());
  }
  return mean;
}

rewards::LogRewardGrad ensemble_log_grad(const std::vector<const rewards::RewardFunction*>& models,
                                         const ad::Tensor& x, const ad::Tensor& cond, int t, double delta) {
  if (models.empty()) throw std::invalid_argument("ensemble needs at least one reward model");
  if (models.size() == 1) return models[0]->log_grad(x, cond, repeat_t(x, t), delta);
  const std::size_t n = static_cast<std::size_t>(x.dim(0)), per = x.size() / n;
  std::vector<double> sum(x.size(), 0.0);
  rewards::LogRewardGrad out;
  out.probability.assign(n, 0.0);
  const double k = static_cast<double>(models.size());
  for (const auto* m : models) {
    // The floor is applied to the mean, so members contribute unfloored gradients.
    const auto g = m->log_grad(x, cond, repeat_t(x, t), 0.0);
    for (std::size_t b = 0; b < n; ++b) {
      out.probability[b] += g.probability[b] / k;
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) sum[i] += g.probability[b] * g.grad[i];
    }
  }
  out.grad = ad::Tensor(x.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const double rbar = out.probability[b];
    if (rbar <= delta) continue;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out.grad[i] = static_cast<float>(sum[i] / (k * rbar));
  }
  return out;
}

void GuidanceTrace::write_csv(std::ostream& os) const {
  os << "t,grad_bc,grad_fm,grad_c,grad_f,shift,active_bc,active_fm,clipped\n";
  for (const auto& s : steps) {
    os << s.t << ',' << s.grad_bc << ',' << s.grad_fm << ',' << s.grad_c << ',' << s.grad_f << ',' << s.shift << ','
       << s.active_bc << ',' << s.active_fm << ',' << s.clipped << '\n';
  }
}

void guided_mean(ad::Tensor& mu, double sigma, const ad::Tensor& x_t, const ad::Tensor& cond, int t,
                 const GuidanceModels& models, const GuidanceConfig& config_in, int T, std::vector<TraceStep>* traces) {
  const GuidanceConfig c = config_in.resolved(T);
  const std::size_t n = static_cast<std::size_t>(x_t.dim(0)), per = x_t.size() / n;
  if (traces) traces->assign(n, TraceStep{t});
  // lambda * alpha is formed once so that (lambda, alpha) and (lambda * alpha, 1)
  // produce the same coefficient bit for bit.
  const double k_bc = c.lambda_bc * c.alpha_bc, k_fm = c.lambda_fm * c.alpha_fm;
  const bool use_bc = k_bc != 0.0 && !models.bc.empty() && t < c.mln_bc;
  const bool use_fm = k_fm != 0.0 && !models.fm.empty() && t < c.mln_fm;
  const bool use_c = c.eta_c != 0.0 && models.compliance;
  const bool use_f = c.eta_f != 0.0 && models.floating;
  if (!use_bc && !use_fm && !use_c && !use_f) return;

  std::vector<double> shift(x_t.size(), 0.0);
  const auto accumulate = [&](const ad::Tensor& g, double coef, double TraceStep::*norm) {
    for (std::size_t i = 0; i < g.size(); ++i) shift[i] += coef * sigma * g[i];
    if (traces)
      for (std::size_t b = 0; b < n; ++b) (*traces)[b].*norm = item_norm(g, b, per);
  };
  if (use_bc) {
    const auto g = ensemble_log_grad(models.bc, x_t, cond, t, c.delta).grad;
    check_finite(g, t, "BC log-reward");
    accumulate(g, k_bc, &TraceStep::grad_bc);
  }
  if (use_fm) {
    const auto g = ensemble_log_grad(models.fm, x_t, cond, t, c.delta).grad;
    check_finite(g, t, "FM log-reward");
    accumulate(g, k_fm, &TraceStep::grad_fm);
  }
  if (use_c) {
    const auto g = models.compliance->grad(x_t, cond);
    check_finite(g, t, "compliance");
    accumulate(g, -c.eta_c, &TraceStep::grad_c);
  }
  if (use_f) {
    const auto g = models.floating->log_grad(x_t, cond, repeat_t(x_t, t), c.delta).grad;
    check_finite(g, t, "floating-classifier");
    accumulate(g, c.eta_f, &TraceStep::grad_f);
  }
  const double cap = 2.0 * std::sqrt(sigma * static_cast<double>(per));
  for (std::size_t b = 0; b < n; ++b) {
    double norm = 0.0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) norm += shift[i] * shift[i];
    norm = std::sqrt(norm);
    double scale = 1.0;
    if (c.clip && norm > cap) scale = cap / norm;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) mu[i] = static_cast<float>(mu[i] + scale * shift[i]);
    if (traces) {
      auto& s = (*traces)[b];
      s.active_bc = use_bc;
      s.active_fm = use_fm;
      s.clipped = scale < 1.0;
      s.shift = norm * scale;
    }
  }
}

CensoredResult censored_sample(const diffusion::EpsPredictor& model, const ad::Tensor& cond,
                               const diffusion::NoiseSchedule& schedule, const GuidanceModels& models,
                               const GuidanceConfig& config, const diffusion::SampleOptions& options) {
  config.validate(schedule.T);
  CensoredResult r;
  const int n = cond.dim(0);
  r.traces.resize(static_cast<std::size_t>(n));
  diffusion::SampleOptions opt = options;
  std::vector<TraceStep> steps;
  opt.hook = [&](ad::Tensor& mu, double sigma, const ad::Tensor& x_t, int t, const ad::Tensor& c, int first) {
    guided_mean(mu, sigma, x_t, c, t, models, config, schedule.T, &steps);
    for (std::size_t b = 0; b < steps.size(); ++b) {
      r.traces[static_cast<std::size_t>(first - options.first_chain) + b].steps.push_back(steps[b]);
    }
  };
  r.sample = diffusion::sample(model, cond, schedule, opt);
  return r;
}

}  // namespace topo::guidance
