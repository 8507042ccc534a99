#include <doctest.h>

#include <cmath>

#include "dmq/errors.hpp"
#include "dmq/rng.hpp"
#include "dmq/tsw.hpp"

using dmq::tsw::TimestepWeighter;

TEST_CASE("uniform before any observation") {
  TimestepWeighter w({1, 2, 3}, 1.0, 0.95);
  CHECK(w.weight(1) == 1.0);
  CHECK(w.weight(3) == 1.0);
  CHECK_FALSE(w.initialized(2));
}

TEST_CASE("closed-form weights") {
  TimestepWeighter w({10, 20}, 1.0, 0.95);
  w.update(10, 1.0);
  w.update(20, 3.0);
  CHECK(w.weight(10) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(w.weight(20) == doctest::Approx(0.25).epsilon(1e-12));

  TimestepWeighter flat({10, 20}, 0.0, 0.95);
  flat.update(10, 1.0);
  flat.update(20, 3.0);
  CHECK(flat.weight(10) == 1.0);
  CHECK(flat.weight(20) == 1.0);

  TimestepWeighter single({10, 20}, 1.0, 0.95);
  single.update(10, 5.0);
  CHECK(single.weight(10) == 0.0);
  CHECK(single.weight(20) == 1.0);
}

TEST_CASE("momentum update") {
  TimestepWeighter w({1}, 1.0, 0.95);
  w.update(1, 5.0);
  CHECK(w.accumulated(1) == 5.0);  // first observation seeds the average
  TimestepWeighter m({1}, 1.0, 0.95);
  m.update(1, 2.0);
  m.update(1, 4.0);
  CHECK(std::abs(m.accumulated(1) - 2.1) <= 1e-12);
  TimestepWeighter z({1}, 1.0, 0.0);
  z.update(1, 2.0);
  z.update(1, 7.0);
  CHECK(z.accumulated(1) == 7.0);
}

TEST_CASE("errors") {
  TimestepWeighter w({1, 2}, 1.0, 0.95);
  CHECK_THROWS_AS(w.weight(3), dmq::DomainError);
  CHECK_THROWS_AS(w.update(1, -1.0), dmq::DomainError);
  CHECK_THROWS_AS(w.update(7, 1.0), dmq::DomainError);
  const std::vector<double> losses{1.0, 2.0};
  const std::vector<int> ts{1};
  CHECK_THROWS_AS(w.weighted_mean(losses, ts), dmq::DimensionError);
  CHECK_THROWS_AS(TimestepWeighter({1}, -1.0, 0.5), dmq::DomainError);
  CHECK_THROWS_AS(TimestepWeighter({1}, 1.0, 1.0), dmq::DomainError);
}

TEST_CASE("weighted mean freezes weights then updates") {
  TimestepWeighter w({1, 2}, 1.0, 0.95);
  const std::vector<double> l0{4.0, 8.0};
  const std::vector<int> t0{1, 2};
  CHECK(w.weighted_mean(l0, t0) == 6.0);  // all weights 1 at the start
  TimestepWeighter v({1, 2}, 1.0, 0.95);
  v.update(1, 1.0);
  v.update(2, 3.0);
  CHECK(v.weighted_mean(l0, t0) == doctest::Approx(2.5).epsilon(1e-12));
  // Then Lambda moves by (1 - xi) toward each batch mean.
  CHECK(v.accumulated(1) == doctest::Approx(0.95 * 1.0 + 0.05 * 4.0).epsilon(1e-12));
  CHECK(v.accumulated(2) == doctest::Approx(0.95 * 3.0 + 0.05 * 8.0).epsilon(1e-12));
  // Per-timestep mean, not per-sample update.
  TimestepWeighter u({1}, 1.0, 0.5);
  const std::vector<double> l1{2.0, 6.0};
  const std::vector<int> t1{1, 1};
  u.weighted_mean(l1, t1);
  CHECK(u.accumulated(1) == 4.0);
}

TEST_CASE("anti-monotone, bounded and stable over random states") {
  dmq::Rng rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::vector<int> ts{1, 2, 3, 4};
    const double alpha = rng.uniform(0.1, 3.0);
    TimestepWeighter w(ts, alpha, 0.9);
    for (int t : ts) w.update(t, rng.uniform(0.0, 10.0));
    for (int a : ts)
      for (int b : ts) {
        CHECK(w.weight(a) >= 0.0);
        CHECK(w.weight(a) <= 1.0);
        if (w.accumulated(a) < w.accumulated(b)) CHECK(w.weight(a) > w.weight(b));
      }
    // Ratio grows with alpha.
    TimestepWeighter hi(ts, alpha + 1.0, 0.9);
    for (int t : ts) hi.update(t, w.accumulated(t));
    for (int a : ts)
      for (int b : ts)
        if (w.accumulated(a) < w.accumulated(b) && w.weight(b) > 0.0 && hi.weight(b) > 0.0)
          CHECK(hi.weight(a) / hi.weight(b) >= w.weight(a) / w.weight(b) * (1 - 1e-12));
    const double before = w.accumulated(1);
    const double loss = rng.uniform(0.0, 10.0);
    w.update(1, loss);
    CHECK(std::abs(w.accumulated(1) - before) <= 0.1 * std::abs(loss - before) + 1e-12);
  }
}
