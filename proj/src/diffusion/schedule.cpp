#include "topo/diffusion/schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace topo::diffusion {

std::string to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw std::invalid_argument("unknown schedule kind '" + s + "'");
}

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > T) throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
}

nlohmann::json NoiseSchedule::to_json() const { return {{"T", T}, {"kind", to_string(kind)}}; }

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  return make_schedule(j.at("T").get<int>(), schedule_kind_from_string(j.value("kind", "linear")));
}

NoiseSchedule make_schedule(int T, ScheduleKind kind) {
  if (T < 10) throw std::invalid_argument("schedule needs T >= 10");
  NoiseSchedule s;
  s.T = T;
  s.kind = kind;
  s.beta.assign(T + 1, 0.0);
  if (kind == ScheduleKind::Linear) {
    const double scale = 1000.0 / T;
    const double lo = 1e-4 * scale, hi = 0.02 * scale;
    if (hi >= 1.0) throw std::invalid_argument("linear schedule needs T > 20 so that beta_T < 1");
    for (int t = 1; t <= T; ++t) s.beta[t] = lo + (hi - lo) * (t - 1) / (T - 1);
  } else {
    const auto f = [&](double t) {
      const double c = std::cos((t / T + 0.008) / 1.008 * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int t = 1; t <= T; ++t) s.beta[t] = std::min(0.999, 1.0 - f(t) / f(t - 1));
  }
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  s.sigma.assign(T + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.sigma[t] = t == 1 ? s.beta[1] : s.beta[t] * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]);
  }
  return s;
}

ad::Tensor q_sample(const ad::Tensor& x0, int t, const ad::Tensor& eps, const NoiseSchedule& schedule) {
  if (x0.rank() < 1) throw std::invalid_argument("q_sample needs a batched tensor");
  return q_sample(x0, std::vector<int>(static_cast<std::size_t>(x0.dim(0)), t), eps, schedule);
}

ad::Tensor q_sample(const ad::Tensor& x0, const std::vector<int>& t, const ad::Tensor& eps,
                    const NoiseSchedule& schedule) {
  if (x0.shape() != eps.shape()) throw std::invalid_argument("q_sample: x0 and eps shapes differ");
  if (x0.rank() < 1 || static_cast<std::size_t>(x0.dim(0)) != t.size()) {
    throw std::invalid_argument("q_sample: one timestep per batch item required");
  }
  ad::Tensor out(x0.shape());
  const std::size_t per = t.empty() ? 0 : x0.size() / t.size();
  for (std::size_t n = 0; n < t.size(); ++n) {
    schedule.check_step(t[n]);
    const double a = std::sqrt(schedule.alpha_bar[t[n]]);
    const double b = std::sqrt(1.0 - schedule.alpha_bar[t[n]]);
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      out[i] = static_cast<float>(a * x0[i] + b * eps[i]);
    }
  }
  return out;
}

}  // namespace topo::diffusion
