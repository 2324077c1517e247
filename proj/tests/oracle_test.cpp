#include <algorithm>
#include <random>

#include "doctest.h"
#include "topo/rewards/oracle.hpp"

using namespace topo;
using fea::Field2D;

namespace {

fea::ScenarioSpec cantilever(int nx, int ny) {
  fea::ScenarioSpec s;
  s.nel_x = nx;
  s.nel_y = ny;
  for (int iy = 0; iy <= ny; ++iy) s.supports.push_back({s.node(0, iy), true, true});
  s.loads.push_back({s.node(nx, ny / 2), 0.0, -1.0});
  s.volume_fraction = 0.5;
  return s;
}

void fill(Field2D& f, int x0, int y0, int x1, int y1, double v = 1.0) {
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) f(x, y) = v;
}

// Reference labeling by repeated label propagation until a fixed point; shares
// no code with the flood fill.
int count_by_propagation(const Field2D& g) {
  std::vector<int> lab(g.size(), 0);
  for (std::size_t i = 0; i < g.size(); ++i) lab[i] = g[i] >= 0.5 ? static_cast<int>(i) + 1 : 0;
  for (bool changed = true; changed;) {
    changed = false;
    for (int y = 0; y < g.ny; ++y)
      for (int x = 0; x < g.nx; ++x) {
        int& l = lab[y * g.nx + x];
        if (!l) continue;
        const int nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
        for (auto& q : nb) {
          if (q[0] < 0 || q[1] < 0 || q[0] >= g.nx || q[1] >= g.ny) continue;
          const int m = lab[q[1] * g.nx + q[0]];
          if (m && m < l) {
            l = m;
            changed = true;
          }
        }
      }
  }
  std::vector<int> roots;
  for (std::size_t i = 0; i < lab.size(); ++i)
    if (lab[i] == static_cast<int>(i) + 1) roots.push_back(lab[i]);
  return static_cast<int>(roots.size());
}

}  // namespace

TEST_CASE("connected components: void, block, block plus far pixel") {
  Field2D g(10, 8);
  CHECK(rewards::connected_components(g).count == 0);
  fill(g, 1, 1, 5, 5);
  const auto one = rewards::connected_components(g);
  CHECK(one.count == 1);
  CHECK(one(2, 2) == 1);
  CHECK(one(8, 7) == 0);
  g(9, 7) = 1.0;
  CHECK(rewards::connected_components(g).count == 2);
}

TEST_CASE("diagonal contact separates under 4- but not 8-connectivity") {
  Field2D g(4, 4);
  g(0, 0) = 1.0;
  g(1, 1) = 1.0;
  CHECK(rewards::connected_components(g, 4).count == 2);
  CHECK(rewards::connected_components(g, 8).count == 1);
  CHECK_THROWS_AS(rewards::connected_components(g, 6), std::invalid_argument);
}

TEST_CASE("component count matches an independent propagation labeling") {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.45);
  for (int trial = 0; trial < 30; ++trial) {
    Field2D g(13, 9);
    for (double& v : g.v) v = coin(rng) ? 1.0 : 0.0;
    CHECK(rewards::connected_components(g).count == count_by_propagation(g));
  }
}

TEST_CASE("solid cantilever is valid; an island breaks fm but not bc") {
  const auto spec = cantilever(16, 8);
  Field2D g(16, 8, 1.0);
  auto v = rewards::oracle_verdict(g, spec);
  CHECK(v.bc_valid);
  CHECK(v.fm_valid);
  CHECK(v.component_count == 1);

  // 2x2 island well away from beam and supports.
  Field2D iso(16, 8);
  fill(iso, 0, 1, 16, 5);
  fill(iso, 10, 6, 12, 8);
  v = rewards::oracle_verdict(iso, spec);
  CHECK(v.bc_valid);
  CHECK_FALSE(v.fm_valid);
  CHECK(v.component_count == 2);
  CHECK(v.floating_components.size() == 1);
}

TEST_CASE("erasing the support column breaks bc") {
  const auto spec = cantilever(16, 8);
  Field2D g(16, 8, 1.0);
  fill(g, 0, 0, 2, 8, 0.0);  // material still reaches the load
  const auto v = rewards::oracle_verdict(g, spec);
  CHECK_FALSE(v.bc_valid);
  CHECK(v.unreached_loads.empty());
  CHECK(v.detached_supports.size() == 9);
  CHECK_FALSE(v.fm_valid);  // the remaining block touches no support
}

TEST_CASE("material missing at the load breaks bc") {
  const auto spec = cantilever(16, 8);
  Field2D g(16, 8, 1.0);
  fill(g, 14, 0, 16, 8, 0.0);
  const auto v = rewards::oracle_verdict(g, spec);
  CHECK_FALSE(v.bc_valid);
  REQUIRE(v.unreached_loads.size() == 1);
  CHECK(v.unreached_loads[0] == spec.loads[0].node);
  CHECK(v.fm_valid);
}

TEST_CASE("a block detached from the wall but holding the load is floating") {
  auto spec = cantilever(16, 8);
  Field2D g(16, 8);
  fill(g, 0, 0, 4, 8);
  fill(g, 8, 2, 16, 6);
  const auto v = rewards::oracle_verdict(g, spec);
  CHECK(v.bc_valid);
  CHECK_FALSE(v.fm_valid);
}

TEST_CASE("a corner-connected staircase from wall to load is one attached component") {
  fea::ScenarioSpec spec;
  spec.nel_x = 8;
  spec.nel_y = 8;
  for (int iy = 0; iy <= 8; ++iy) spec.supports.push_back({spec.node(0, iy), true, true});
  spec.loads = {{spec.node(8, 0), 0.0, -1.0}};
  spec.volume_fraction = 0.3;
  Field2D g(8, 8);
  for (int k = 0; k < 8; ++k) g(k, 7 - k) = 1.0;
  CHECK(rewards::connected_components(g, 4).count == 8);
  const auto v = rewards::oracle_verdict(g, spec);
  CHECK(v.component_count == 1);
  CHECK(v.bc_valid);
  CHECK(v.fm_valid);
}

TEST_CASE("verdict is invariant to component discovery order") {
  // Mirroring the grid and scenario left-right reverses raster order of
  // components; the verdict must not change.
  fea::ScenarioSpec spec;
  spec.nel_x = 12;
  spec.nel_y = 6;
  spec.supports = {{spec.node(0, 6), true, true}, {spec.node(12, 6), true, true}};
  spec.loads = {{spec.node(6, 0), 0.0, -1.0}};
  spec.volume_fraction = 0.4;
  Field2D g(12, 6);
  fill(g, 0, 4, 3, 6);
  fill(g, 5, 0, 7, 2);
  fill(g, 10, 5, 12, 6);
  Field2D m(12, 6);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 12; ++x) m(x, y) = g(11 - x, y);
  fea::ScenarioSpec ms = spec;
  for (auto& s : ms.supports) s.node = ms.node(12 - ms.node_x(s.node), ms.node_y(s.node));
  for (auto& l : ms.loads) l.node = ms.node(12 - ms.node_x(l.node), ms.node_y(l.node));
  const auto a = rewards::oracle_verdict(g, spec);
  const auto b = rewards::oracle_verdict(m, ms);
  CHECK(a.bc_valid == b.bc_valid);
  CHECK(a.fm_valid == b.fm_valid);
  CHECK(a.component_count == b.component_count);
  CHECK(a.floating_components.size() == b.floating_components.size());
  CHECK_FALSE(a.fm_valid);  // the load block floats
  CHECK(a.floating_components.size() == 1);
  CHECK(rewards::oracle_verdict(g, spec).to_json() == a.to_json());
}

TEST_CASE("grid mismatch is rejected") {
  CHECK_THROWS_AS(rewards::oracle_verdict(Field2D(4, 4), cantilever(8, 4)), std::invalid_argument);
}

TEST_CASE("label selection enriches violations up to half") {
  const auto verdict = [](bool bc, bool fm) {
    rewards::ValidityVerdict v;
    v.bc_valid = bc;
    v.fm_valid = fm;
    return v;
  };
  std::vector<rewards::ValidityVerdict> pool;
  for (int i = 0; i < 100; ++i) pool.push_back(verdict(i % 10 != 3, i % 25 != 7));  // 10 bc, 4 fm, disjoint
  const auto pick = rewards::select_for_labeling(pool, 20);
  REQUIRE(pick.size() == 20);
  CHECK(std::is_sorted(pick.begin(), pick.end()));
  CHECK(std::adjacent_find(pick.begin(), pick.end()) == pick.end());
  int fm = 0, bc = 0;
  for (auto i : pick) {
    fm += !pool[i].fm_valid;
    bc += pool[i].fm_valid && !pool[i].bc_valid;
  }
  CHECK(fm == 4);
  CHECK(bc == 6);  // fills the other half
  // No valid designs: violations make up the count.
  std::vector<rewards::ValidityVerdict> bad(30, verdict(false, true));
  CHECK(rewards::select_for_labeling(bad, 12).size() == 12);
  // Rare violations are all taken; the rest is valid.
  std::vector<rewards::ValidityVerdict> clean(50, verdict(true, true));
  clean[9] = verdict(true, false);
  const auto few = rewards::select_for_labeling(clean, 10);
  CHECK(std::find(few.begin(), few.end(), 9u) != few.end());
  CHECK_THROWS_AS(rewards::select_for_labeling(clean, 51), std::invalid_argument);
}
