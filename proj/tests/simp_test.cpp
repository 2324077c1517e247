#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "doctest.h"
#include "topo/rewards/oracle.hpp"
#include "topo/simp/dataset.hpp"
#include "topo/simp/simp.hpp"
#include "topo/util/seed.hpp"

using namespace topo;
using fea::Field2D;
namespace fs = std::filesystem;

namespace {

fea::ScenarioSpec cantilever(int nx, int ny, double vf = 0.5) {
  fea::ScenarioSpec s;
  s.nel_x = nx;
  s.nel_y = ny;
  for (int iy = 0; iy <= ny; ++iy) s.supports.push_back({s.node(0, iy), true, true});
  s.loads.push_back({s.node(nx, ny / 2), 0.0, -1.0});
  s.volume_fraction = vf;
  return s;
}

Field2D random_field(int nx, int ny, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.2, 1.0);
  Field2D f(nx, ny);
  for (double& v : f.v) v = u(rng);
  return f;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("sensitivity is zero without displacement and non-positive otherwise") {
  fea::FeaResult zero;
  zero.element_energy = Field2D(4, 3);
  const fea::Material m;
  const auto s0 = simp::compliance_sensitivity(Field2D(4, 3, 0.5), zero, m);
  for (double v : s0.v) CHECK(v == 0.0);

  std::mt19937_64 rng(11);
  const auto spec = cantilever(12, 6);
  const Field2D rho = random_field(12, 6, rng);
  const auto res = fea::assemble_and_solve(rho, spec, m);
  for (double v : simp::compliance_sensitivity(rho, res, m).v) CHECK(v <= 0.0);
}

TEST_CASE("sensitivity matches central finite differences within 1%") {
  std::mt19937_64 rng(5);
  const auto spec = cantilever(10, 5);
  const fea::Material m;
  const Field2D rho = random_field(10, 5, rng);
  fea::FeaSystem sys(spec, m);
  const auto base = sys.solve(rho);
  const auto dc = simp::compliance_sensitivity(rho, base, m);
  const double h = 1e-4;
  for (std::size_t e : {std::size_t{0}, std::size_t{7}, std::size_t{23}, std::size_t{49}}) {
    Field2D up = rho, dn = rho;
    up[e] += h;
    dn[e] -= h;
    const double fd = (sys.solve(up).compliance - sys.solve(dn).compliance) / (2 * h);
    CHECK(std::fabs(fd - dc[e]) <= 0.01 * std::fabs(fd));
  }
}

TEST_CASE("filter: degenerate radius and uniform fields are fixed points") {
  std::mt19937_64 rng(2);
  const Field2D s = random_field(7, 5, rng);
  const Field2D rho = random_field(7, 5, rng);
  CHECK(simp::filter_sensitivities(s, rho, 1.0) == s);
  const Field2D u(7, 5, -2.5);
  const auto out = simp::filter_sensitivities(u, Field2D(7, 5, 0.6), 1.5);
  for (double v : out.v) CHECK(v == doctest::Approx(-2.5).epsilon(1e-12));
}

TEST_CASE("filter: spike spreads with cone weights and conserves the weighted sum") {
  // r_min = 1.5: self weight 1.5, edge neighbors 0.5, diagonals 1.5 - sqrt(2).
  Field2D s(5, 5);
  s(2, 2) = -1.0;
  const Field2D rho(5, 5, 1.0);
  const auto out = simp::filter_sensitivities(s, rho, 1.5);
  const double wd = 1.5 - std::sqrt(2.0);
  const double wsum = 1.5 + 4 * 0.5 + 4 * wd;  // interior weight total
  CHECK(out(2, 2) == doctest::Approx(-1.5 / wsum).epsilon(1e-12));
  CHECK(out(1, 2) == doctest::Approx(-0.5 / wsum).epsilon(1e-12));
  CHECK(out(1, 1) == doctest::Approx(-wd / wsum).epsilon(1e-12));
  CHECK(out(0, 0) == 0.0);
  CHECK(out(4, 2) == 0.0);
  // sum_e W_e rho_e out_e == sum_e W_e rho_e s_e for symmetric cone weights.
  std::mt19937_64 rng(9);
  const Field2D rs = random_field(6, 4, rng);
  const Field2D rr = random_field(6, 4, rng);
  const auto fo = simp::filter_sensitivities(rs, rr, 1.5);
  double lhs = 0.0, rhs = 0.0;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x) {
      double w = 0.0;
      for (int yy = 0; yy < 4; ++yy)
        for (int xx = 0; xx < 6; ++xx) w += std::max(0.0, 1.5 - std::hypot(x - xx, y - yy));
      lhs += w * rr(x, y) * fo(x, y);
      rhs += w * rr(x, y) * rs(x, y);
    }
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));
  for (double v : fo.v) CHECK(v >= 0.0);
}

TEST_CASE("OC update meets the volume target and the move limit") {
  std::mt19937_64 rng(4);
  simp::SimpOptions opt;
  for (int trial = 0; trial < 10; ++trial) {
    const Field2D rho = random_field(9, 6, rng);
    Field2D s = random_field(9, 6, rng);
    for (double& v : s.v) v = -v;
    const double vf = rho.mean() + (trial % 2 ? 0.05 : -0.05);  // inside the move-limited range
    const auto out = simp::oc_update(rho, s, vf, opt);
    CHECK(std::fabs(out.mean() - vf) <= 1e-4);
    for (std::size_t e = 0; e < out.size(); ++e) {
      CHECK(std::fabs(out[e] - rho[e]) <= opt.move + 1e-12);
      CHECK(out[e] >= 0.0);
      CHECK(out[e] <= 1.0);
    }
  }
}

TEST_CASE("OC update: zero sensitivity drops to the lower clamp; all zero or positive is an error") {
  const Field2D rho(4, 4, 0.5);
  Field2D s(4, 4, -1.0);
  s[5] = 0.0;
  const auto out = simp::oc_update(rho, s, 0.5, {});
  CHECK(out[5] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK_THROWS_AS(simp::oc_update(rho, Field2D(4, 4, 0.0), 0.5, {}), simp::OcBracketError);
  s[0] = 0.1;
  CHECK_THROWS_AS(simp::oc_update(rho, s, 0.5, {}), std::invalid_argument);
}

TEST_CASE("64x32 cantilever halves the uniform compliance and meets its invariants") {
  const auto spec = cantilever(64, 32, 0.5);
  const auto r = simp::optimize(spec);
  CHECK(r.converged);
  CHECK(r.compliance < 0.5 * r.initial_compliance);
  CHECK(static_cast<int>(r.history.size()) <= 200);
  CHECK(std::fabs(r.density.mean() - 0.5) <= 0.005);
  for (double v : r.volume_history) CHECK(std::fabs(v - 0.5) <= 1e-4);
  for (std::size_t i = 5; i + 1 < r.history.size(); ++i) CHECK(r.history[i + 1] <= r.history[i] * 1.02);
  for (double v : r.density.v) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(std::fabs(r.binary.mean() - r.density.mean()) < 0.05);
  const auto verdict = rewards::oracle_verdict(r.binary, spec);
  CHECK(verdict.bc_valid);
  CHECK(verdict.fm_valid);

  const auto again = simp::optimize(spec);
  CHECK(again.density == r.density);
  CHECK(again.history == r.history);
}

TEST_CASE("options validate and round-trip through JSON") {
  simp::SimpOptions o;
  o.move = 0.1;
  o.r_min = 2.0;
  const auto back = simp::SimpOptions::from_json(o.to_json());
  CHECK(back.move == 0.1);
  CHECK(back.r_min == 2.0);
  o.move = 1.0;
  CHECK_THROWS(o.validate());
  o = {};
  o.max_iterations = 0;
  CHECK_THROWS(o.validate());
}

TEST_CASE("scenario randomizer draws valid scenarios from the templates") {
  std::mt19937_64 rng(8);
  simp::ScenarioOptions so;
  so.nel_x = 16;
  so.nel_y = 8;
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < 300; ++i) {
    const auto d = simp::random_scenario(rng, so);
    ++counts[static_cast<int>(d.support)];
    CHECK(d.spec.volume_fraction >= 0.3);
    CHECK(d.spec.volume_fraction <= 0.5);
    CHECK((d.spec.loads.size() == 1 || d.spec.loads.size() == 2));
    const auto free = simp::free_boundary_nodes(16, 8, d.spec.supports);
    for (const auto& l : d.spec.loads) {
      CHECK(std::hypot(l.fx, l.fy) == doctest::Approx(1.0));
      CHECK(std::binary_search(free.begin(), free.end(), l.node));
    }
    if (d.spec.loads.size() == 2) CHECK(d.spec.loads[0].node != d.spec.loads[1].node);
  }
  for (int c : counts) CHECK(c > 60);
  CHECK(simp::template_supports(simp::SupportTemplate::BottomCorners, 16, 8).size() == 2);
  CHECK(simp::template_supports(simp::SupportTemplate::LeftEdgeBottomRight, 16, 8).size() == 10);
  CHECK(simp::support_template_from_string("bottom_corners") == simp::SupportTemplate::BottomCorners);
  CHECK_THROWS(simp::support_template_from_string("nope"));
  const auto train = simp::training_templates(simp::SupportTemplate::LeftEdgeBottomRight);
  CHECK(train.size() == 2);
}

TEST_CASE("converged SIMP outputs on in-template scenarios pass the oracle (50 scenarios)") {
  simp::DatasetOptions opt;
  opt.scenario.nel_x = 24;
  opt.scenario.nel_y = 12;
  opt.scenario.templates = simp::training_templates(opt.holdout);
  int converged = 0;
  for (int i = 0; i < 50; ++i) {
    std::mt19937_64 rng(derive_seed(77, i));
    const auto d = simp::random_scenario(rng, opt.scenario);
    const auto r = simp::optimize(d.spec, opt.simp);
    if (!r.converged) continue;
    ++converged;
    const auto v = rewards::oracle_verdict(r.binary, d.spec);
    INFO("scenario ", i, ": ", d.spec.to_json().dump());
    CHECK(v.bc_valid);
    CHECK(v.fm_valid);
    CHECK(std::fabs(r.density.mean() - d.spec.volume_fraction) <= 0.005);
  }
  MESSAGE("converged scenarios: ", converged, " / 50");
  CHECK(converged >= 40);
}

TEST_CASE("dataset generation filters, labels splits and reproduces byte-identical files") {
  simp::DatasetOptions opt;
  opt.scenario.nel_x = 16;
  opt.scenario.nel_y = 8;
  simp::DatasetStats stats;
  const auto recs = simp::generate_dataset(10, 123, opt, &stats);
  REQUIRE(recs.size() == 10);
  CHECK(stats.attempts >= 10);
  for (const auto& r : recs) {
    const auto v = rewards::oracle_verdict(r.binary, r.spec);
    CHECK(v.bc_valid);
    CHECK(v.fm_valid);
    CHECK(std::fabs(r.density.mean() - r.spec.volume_fraction) <= 0.005);
    CHECK(r.binary == simp::threshold(r.density));
    CHECK(std::isfinite(r.compliance));
    CHECK(r.split == (r.support == opt.holdout ? "ood" : "train"));
  }
  const fs::path root = fs::temp_directory_path() / "topo_simp_test";
  fs::remove_all(root);
  simp::write_dataset(root / "a", recs, {{"seed", 123}});
  const auto again = simp::generate_dataset(10, 123, opt);
  simp::write_dataset(root / "b", again, {{"seed", 123}});
  for (const auto& e : fs::directory_iterator(root / "a")) {
    CHECK(slurp(e.path()) == slurp(root / "b" / e.path().filename()));
  }
  const auto loaded = simp::read_dataset(root / "a");
  REQUIRE(loaded.size() == 10);
  CHECK(loaded[3].spec.to_json() == recs[3].spec.to_json());
  CHECK(loaded[3].binary == recs[3].binary);
  CHECK(loaded[3].conditioning.channels[fea::kSupportMask].v.size() == 16 * 8);
  CHECK(loaded[3].density.v[5] == doctest::Approx(recs[3].density.v[5]).epsilon(1e-6));
}

TEST_CASE("dataset generation gives up after the retry cap") {
  simp::DatasetOptions opt;
  opt.scenario.nel_x = 8;
  opt.scenario.nel_y = 4;
  opt.simp.max_iterations = 1;  // nothing converges
  opt.max_attempts_factor = 2;
  CHECK_THROWS_AS(simp::generate_dataset(3, 1, opt), simp::DatasetError);
  CHECK_THROWS_AS(simp::generate_dataset(0, 1, opt), std::invalid_argument);
}
