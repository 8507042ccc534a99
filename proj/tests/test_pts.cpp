#include <doctest.h>

#include <cmath>

#include "dmq/errors.hpp"
#include "dmq/pts.hpp"
#include "dmq/quant.hpp"
#include "dmq/rng.hpp"
#include "oracles.hpp"

using namespace dmq;
using namespace dmq::pts;

namespace {

IntTensor votes_matrix(std::vector<std::vector<std::int64_t>> rows) {
  const std::size_t n = rows.size(), c = rows[0].size();
  std::vector<std::int64_t> data;
  for (auto& r : rows) data.insert(data.end(), r.begin(), r.end());
  return IntTensor({n, c}, std::move(data), 8);
}

IntTensor column(std::vector<std::int64_t> v) {
  const auto n = v.size();
  return IntTensor({n, 1}, std::move(v), 8);
}

}  // namespace

TEST_CASE("per_sample_best examples") {
  const double s = 0.05;
  // On-grid values inside the range.
  const std::vector<double> grid{3 * s, -7 * s, 127 * s, -128 * s, 0.0};
  CHECK(per_sample_best(grid, s, 3, 8, true) == 0);
  // 4 s u fits exactly after scaling by 4.
  const std::vector<double> big{4 * s * 127};
  CHECK(per_sample_best(big, s, 2, 8, true) == 2);
  CHECK(per_sample_best(big, s, 3, 8, true) == 2);
  CHECK(per_sample_best(big, s, 0, 8, true) == 0);
  CHECK_THROWS_AS(per_sample_best(big, 0.0, 2, 8, true), DomainError);
  CHECK_THROWS_AS(per_sample_best(big, s, -1, 8, true), DomainError);
}

TEST_CASE("per_sample_best agrees with enumeration") {
  Rng rng(31);
  for (int trial = 0; trial < 2000; ++trial) {
    const int D = static_cast<int>(rng.below(5));
    const int bits = 2 + static_cast<int>(rng.below(7));
    const bool sgn = rng.below(2) == 0;
    const double s = std::exp(rng.uniform(-3, 0));
    std::vector<double> v(1 + rng.below(6));
    for (double& e : v) e = rng.normal() * s * std::ldexp(1.0, bits) * rng.uniform(0, 4);
    CHECK(per_sample_best(v, s, D, bits, sgn) == oracle::best_exponent(v, s, D, bits, sgn));
  }
}

TEST_CASE("vote examples") {
  auto f = vote(column({2, 2, 2, 2}), 0.6, 3);
  CHECK(f.delta[0] == 2);
  CHECK(f.agreement[0] == 1.0);

  f = vote(column({2, 2, 3, 3}), 0.6, 3);
  CHECK(f.agreement[0] == 0.5);
  CHECK(f.mode[0] == 2);
  CHECK(f.delta[0] == 0);

  f = vote(column({1, 1, 1, 0}), 0.6, 3);
  CHECK(f.agreement[0] == 0.75);
  CHECK(f.delta[0] == 1);

  // Agreement exactly at kappa stays at 0.
  f = vote(column({1, 1, 1, 0}), 0.75, 3);
  CHECK(f.delta[0] == 0);
}

TEST_CASE("vote errors") {
  CHECK_THROWS_AS(vote(column({4}), 0.6, 3), DomainError);
  CHECK_THROWS_AS(vote(column({-1}), 0.6, 3), DomainError);
  CHECK_THROWS_AS(vote(column({1}), 0.0, 3), DomainError);
  CHECK_THROWS_AS(vote(column({1}), 1.5, 3), DomainError);
  CHECK_THROWS_AS(vote(IntTensor({0, 2}, 8), 0.6, 3), InputError);
}

TEST_CASE("vote matches brute force on every column up to N = 6, D = 2") {
  const double kappas[] = {0.2, 0.5, 0.6, 0.75, 1.0};
  for (int D = 0; D <= 2; ++D)
    for (std::size_t n = 1; n <= 6; ++n) {
      std::size_t total = 1;
      for (std::size_t i = 0; i < n; ++i) total *= static_cast<std::size_t>(D + 1);
      for (std::size_t code = 0; code < total; ++code) {
        std::vector<std::int64_t> v(n);
        std::vector<int> iv(n);
        std::size_t c = code;
        for (std::size_t i = 0; i < n; ++i, c /= static_cast<std::size_t>(D + 1))
          iv[i] = static_cast<int>(v[i] = static_cast<std::int64_t>(c % static_cast<std::size_t>(D + 1)));
        for (double k : kappas) {
          const auto f = vote(column(v), k, D);
          const auto o = oracle::vote_column(iv, k, D);
          REQUIRE(f.delta[0] == o.delta);
          REQUIRE(f.mode[0] == o.mode);
          REQUIRE(f.agreement[0] == o.agreement);
        }
      }
    }
}

TEST_CASE("columns vote independently") {
  const auto f = vote(votes_matrix({{0, 3, 1}, {0, 3, 2}, {1, 3, 2}}), 0.6, 3);
  CHECK(f.delta == std::vector<int>{0, 3, 2});
  CHECK(f.mode == std::vector<int>{0, 3, 2});
}

TEST_CASE("quantize_with_pts") {
  Rng rng(4);
  const Tensor x = rng.normal_tensor({7, 5});
  const std::vector<double> ones(5, 1.0);
  const std::vector<int> zeros(5, 0);
  const auto p = quant::QuantParams::per_tensor(0.02, 8);
  CHECK(quantize_with_pts(x, ones, 0.02, zeros, 8, true) == quant::quantize(x, p));

  const double s = 0.1;
  const Tensor y = Tensor::from_rows({{8 * s, 0.0}});
  const std::vector<double> t2{1.0, 1.0};
  const std::vector<int> d{3, 0};
  const auto codes = quantize_with_pts(y, t2, s, d, 8, true);
  CHECK(codes(0, 0) == 1);
  CHECK(dequantize_with_pts(codes, s, d)(0, 0) == 8 * s);
  CHECK_THROWS_AS(quantize_with_pts(y, ones, s, d, 8, true), DimensionError);
}

TEST_CASE("grouped samples") {
  // Two timestep groups: in group 1 the channel is large on one row only.
  const double s = 1.0;
  const Tensor x = Tensor::from_rows({{500.0}, {1.0}, {2.0}, {3.0}});
  const std::vector<int> ids{1, 1, 2, 2};
  const auto per_row = candidate_exponents(x, s, 3, 8, true);
  CHECK(per_row.rows() == 4);
  const auto grouped = candidate_exponents(x, s, 3, 8, true, ids);
  REQUIRE(grouped.rows() == 2);
  CHECK(grouped(0, 0) == oracle::best_exponent({500.0, 1.0}, s, 3, 8, true));
  CHECK(grouped(1, 0) == 0);
  const std::vector<int> short_ids{1};
  CHECK_THROWS_AS(candidate_exponents(x, s, 3, 8, true, short_ids), DimensionError);
}

TEST_CASE("outlier channels get a shift, others do not") {
  Rng rng(8);
  Tensor x = rng.normal_tensor({200, 6});
  for (std::size_t i = 0; i < 200; ++i) x(i, 2) *= 8.0;
  std::vector<int> ids(200);
  for (std::size_t i = 0; i < 200; ++i) ids[i] = static_cast<int>(i / 20);
  // Scale sized for the ordinary channels.
  const double s = 4.0 / 127.0;
  const auto f = vote(candidate_exponents(x, s, 3, 8, true, ids), 0.6, 3);
  CHECK(f.delta[2] >= 2);
  for (std::size_t k : {0u, 1u, 3u, 4u, 5u}) CHECK(f.delta[k] == 0);
}

TEST_CASE("scale ladder") {
  Rng rng(9);
  Tensor x = rng.normal_tensor({64, 4});
  for (std::size_t i = 0; i < 64; ++i) x(i, 0) *= 20.0;
  std::vector<int> ids(64);
  for (std::size_t i = 0; i < 64; ++i) ids[i] = static_cast<int>(i / 16);
  const double mm = max_abs(x) / 127.0;
  const auto all = scale_candidates(x, mm, 3, 0.6, 8, true, ids);
  REQUIRE(all.size() == 7);
  for (std::size_t m = 0; m < all.size(); ++m) CHECK(all[m].scale == doctest::Approx(mm * std::exp2(-0.5 * m)));
  // At the MinMax rung nothing clips, so no exponent can beat zero.
  for (int d : all[0].factors.delta) CHECK(d == 0);
  const auto best = calibrate(x, mm, 3, 0.6, 8, true, ids);
  for (const auto& c : all) CHECK(best.error <= c.error);
  CHECK(best.error < all[0].error);
}
