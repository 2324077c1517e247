#include "topo/diffusion/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "topo/util/seed.hpp"

namespace topo::diffusion {

ad::Tensor posterior_mean_from_eps(const ad::Tensor& x_t, const ad::Tensor& eps, int t, const NoiseSchedule& schedule) {
  schedule.check_step(t);
  if (x_t.shape() != eps.shape()) throw std::invalid_argument("posterior mean: x_t and eps shapes differ");
  const double inv = 1.0 / std::sqrt(schedule.alpha[t]);
  const double k = schedule.beta[t] / std::sqrt(1.0 - schedule.alpha_bar[t]);
  ad::Tensor mu(x_t.shape());
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = static_cast<float>(inv * (x_t[i] - k * eps[i]));
  return mu;
}

PosteriorMean posterior_mean(const EpsPredictor& model, const ad::Tensor& x_t, int t, const ad::Tensor& cond,
                             const NoiseSchedule& schedule) {
  schedule.check_step(t);
  const ad::Tensor eps = model.predict_eps(x_t, cond, std::vector<int>(static_cast<std::size_t>(x_t.dim(0)), t));
  return {posterior_mean_from_eps(x_t, eps, t, schedule), schedule.sigma[t]};
}

fea::Field2D to_density(const ad::Tensor& x, int n) {
  const int h = x.dim(2), w = x.dim(3);
  fea::Field2D f(w, h);
  const std::size_t off = static_cast<std::size_t>(n) * f.size();
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = (std::clamp(static_cast<double>(x[off + i]), -1.0, 1.0) + 1.0) / 2.0;
  return f;
}

ad::Tensor from_density(const fea::Field2D& f) {
  ad::Tensor t({1, 1, f.ny, f.nx});
  for (std::size_t i = 0; i < f.size(); ++i) t[i] = static_cast<float>(2.0 * f[i] - 1.0);
  return t;
}

SampleResult sample(const EpsPredictor& model, const ad::Tensor& cond, const NoiseSchedule& schedule,
                    const SampleOptions& options) {
  if (cond.rank() != 4 || cond.dim(1) != kCondChannels) {
    throw std::invalid_argument("sample expects cond of shape [N,6,H,W], got " + ad::shape_string(cond.shape()));
  }
  const int n_total = cond.dim(0), h = cond.dim(2), w = cond.dim(3);
  const int chunk = std::max(1, options.chunk);
  const std::size_t per = static_cast<std::size_t>(h) * w;
  std::vector<ad::Tensor> outs;
  for (int start = 0; start < n_total; start += chunk) {
    const int n = std::min(chunk, n_total - start);
    std::vector<ad::Tensor> cs;
    for (int i = 0; i < n; ++i) cs.push_back(cond.slice_batch(start + i));
    const ad::Tensor c = ad::Tensor::stack_batch(cs);
    std::vector<std::mt19937_64> rngs;
    for (int i = 0; i < n; ++i) {
      rngs.emplace_back(derive_seed(options.seed, static_cast<std::uint64_t>(options.first_chain + start + i)));
    }
    std::normal_distribution<float> normal(0.0f, 1.0f);
    ad::Tensor x({n, 1, h, w});
    for (int i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < per; ++k) x[i * per + k] = normal(rngs[i]);
      normal.reset();
    }
    for (int t = schedule.T; t >= 1; --t) {
      PosteriorMean pm = posterior_mean(model, x, t, c, schedule);
      if (options.hook) options.hook(pm.mean, pm.sigma, x, t, c, options.first_chain + start);
      if (t > 1) {
        const float sd = static_cast<float>(std::sqrt(pm.sigma));
        for (int i = 0; i < n; ++i) {
          for (std::size_t k = 0; k < per; ++k) pm.mean[i * per + k] += sd * normal(rngs[i]);
          normal.reset();
        }
      }
      x = std::move(pm.mean);
      if (!x.all_finite()) throw std::runtime_error("sampling produced non-finite values at t = " + std::to_string(t));
    }
    outs.push_back(std::move(x));
  }
  SampleResult r;
  r.raw = ad::Tensor::stack_batch(outs);
  for (int i = 0; i < n_total; ++i) {
    r.density.push_back(to_density(r.raw, i));
    fea::Field2D b(w, h);
    for (std::size_t k = 0; k < per; ++k) b[k] = r.density.back()[k] >= 0.5 ? 1.0 : 0.0;
    r.binary.push_back(std::move(b));
  }
  return r;
}

}  // namespace topo::diffusion
