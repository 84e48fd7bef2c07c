#include <catch_amalgamated.hpp>

#include <chrono>
#include <iostream>

#include "hsiseg/dsrt.hpp"
#include "support/dsrt_reference.hpp"
#include "support/gradcheck.hpp"

using namespace hsiseg;
using namespace hsiseg::testing;

namespace {

struct Layer {
  ParamStore<double> store;
  DsrtParams<double> params;
};

std::unique_ptr<Layer> make_layer(std::size_t heads, std::size_t dim, std::size_t gh,
                                  std::size_t gw, std::uint64_t seed, bool randomize) {
  auto l = std::make_unique<Layer>();
  std::mt19937_64 rng(seed);
  l->params = DsrtParams<double>::create(l->store, "dsrt", {heads, dim, gh, gw}, rng);
  if (randomize) randomize_params(l->store, seed + 1);
  return l;
}

}  // namespace

TEST_CASE("region partition examples", "[dsrt][partition]") {
  auto centre = partition_regions(2, 2, 5, 5);
  for (const auto& r : centre.regions) {
    CHECK(r.rows() == 3);
    CHECK(r.cols() == 3);
  }
  auto corner = partition_regions(0, 0, 5, 5);
  CHECK(corner.regions[0].size() == 1);
  CHECK(corner.regions[1].size() == 5);
  CHECK(corner.regions[2].size() == 5);
  CHECK(corner.regions[3].size() == 25);
  CHECK_THROWS_AS(partition_regions(5, 0, 5, 5), ArgumentError);
  CHECK_THROWS_AS(partition_regions(0, 3, 4, 3), ArgumentError);
}

TEST_CASE("region partition coverage and cardinality on every grid up to 8x8", "[dsrt][partition]") {
  for (std::size_t H = 1; H <= 8; ++H)
    for (std::size_t W = 1; W <= 8; ++W)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          auto p = partition_regions(h, w, H, W);
          REQUIRE(p.regions[0].size() == (h + 1) * (w + 1));
          REQUIRE(p.regions[1].size() == (h + 1) * (W - w));
          REQUIRE(p.regions[2].size() == (H - h) * (w + 1));
          REQUIRE(p.regions[3].size() == (H - h) * (W - w));
          for (std::size_t r = 0; r < H; ++r)
            for (std::size_t c = 0; c < W; ++c) {
              int members = 0;
              for (const auto& reg : p.regions) members += reg.contains(r, c);
              REQUIRE(members >= 1);
              // cells shared by several regions lie on the query's row or column
              if (members > 1) REQUIRE((r == h || c == w));
              if (r == h && c == w) REQUIRE(members == 4);
            }
        }
}

TEST_CASE("plan sequences match the enumerated regions", "[dsrt][plan]") {
  auto plan = build_dsrt_plan(3, 4, 2);
  CHECK(plan->segments == 12 * 2 * 4);
  std::size_t expect_tokens = 0;
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t w = 0; w < 4; ++w) {
      auto p = partition_regions(h, w, 3, 4);
      for (std::size_t hd = 0; hd < 2; ++hd)
        for (const auto& r : p.regions) expect_tokens += r.size() + 1;
    }
  CHECK(plan->tokens == expect_tokens);
  CHECK(plan->token_rows->size() == 6 * expect_tokens);
  CHECK(plan->region_offsets->back() == plan->segments);
}

TEST_CASE("region aggregation", "[dsrt][aggregate]") {
  std::mt19937_64 rng(3);
  SECTION("identical tokens give that token with uniform weights") {
    auto q = random_tensor({2, 3}, rng);
    auto tok = random_tensor({1, 3}, rng);
    std::vector<double> rows;
    for (int i = 0; i < 8; ++i) rows.insert(rows.end(), tok.data().begin(), tok.data().end());
    std::vector<double> w;
    auto out = region_aggregate(q, Tensor<double>({8, 3}, rows), &w);
    for (std::size_t i = 0; i < 6; ++i) CHECK(out.data()[i] == Catch::Approx(tok.data()[i % 3]).margin(1e-12));
    for (double a : w) CHECK(a == Catch::Approx(0.25).margin(1e-12));
  }
  SECTION("a dominant score selects its token") {
    // scale 1/sqrt(1); token 2 scores +50 above the others
    Tensor<double> q({1, 1}, std::vector<double>{1.0});
    Tensor<double> tok({4, 1}, std::vector<double>{0.5, -0.3, 50.5, 0.2});
    auto out = region_aggregate(q, tok);
    CHECK(std::abs(out.item() - 50.5) < 1e-6);
  }
  SECTION("random instance against a per-query loop") {
    auto q = random_tensor({5, 4}, rng);
    auto tok = random_tensor({20, 4}, rng);
    std::vector<double> w;
    auto out = region_aggregate(q, tok, &w);
    for (std::size_t n = 0; n < 5; ++n) {
      Vec s(4);
      for (std::size_t r = 0; r < 4; ++r) {
        double d = 0;
        for (std::size_t j = 0; j < 4; ++j) d += q.data()[n * 4 + j] * tok.data()[(n * 4 + r) * 4 + j];
        s[r] = d / 2.0;
      }
      auto a = softmax_ref(s);
      CHECK(std::abs(w[n * 4] + w[n * 4 + 1] + w[n * 4 + 2] + w[n * 4 + 3] - 1) < 1e-6);
      for (std::size_t j = 0; j < 4; ++j) {
        double ref = 0;
        for (std::size_t r = 0; r < 4; ++r) ref += a[r] * tok.data()[(n * 4 + r) * 4 + j];
        CHECK(std::abs(out.data()[n * 4 + j] - ref) < 1e-6);
      }
    }
    CHECK_THROWS_AS(region_aggregate(q, random_tensor({19, 4}, rng)), DimensionError);
  }
}

TEST_CASE("region window attention", "[dsrt][window]") {
  auto l = make_layer(1, 4, 4, 4, 11, true);
  std::mt19937_64 rng(5);
  auto cells = random_tensor({5, 4}, rng);
  std::vector<double> weights;
  auto a = region_window_attention(cells, 2, l->params, &weights);
  auto b = region_window_attention(Tensor<double>(cells.shape(), std::vector<double>(cells.data().begin(), cells.data().end())), 2, l->params);
  CHECK(a.shape() == Shape{1, 4});
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.data()[i] == b.data()[i]);
  REQUIRE(weights.size() == 36);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += weights[r * 6 + c];
    CHECK(std::abs(s - 1) < 1e-6);
  }

  std::vector<Vec> rows(5, Vec(4));
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t j = 0; j < 4; ++j) rows[k][j] = cells.data()[k * 4 + j];
  auto ref = reference_region_token(rows, 2, l->params);
  for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(a.data()[j] - ref[j]) < 1e-10);

  // single-cell region depends only on that cell and the class token
  auto one = region_window_attention(narrow(cells, 1, 1), 0, l->params);
  auto one_ref = reference_region_token({rows[1]}, 0, l->params);
  for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(one.data()[j] - one_ref[j]) < 1e-10);
}

TEST_CASE("dsrt layer matches the unrolled reference", "[dsrt][layer]") {
  struct Case {
    std::size_t heads, dim, gh, gw;
  };
  for (auto c : {Case{1, 4, 3, 3}, Case{2, 8, 3, 3}, Case{2, 4, 4, 5}, Case{1, 2, 1, 1}, Case{2, 6, 2, 3}}) {
    auto l = make_layer(c.heads, c.dim, c.gh, c.gw, 21 + c.gh * 7 + c.gw, true);
    std::mt19937_64 rng(c.gw);
    auto x = random_tensor({c.dim, c.gh, c.gw}, rng);
    DsrtTrace<double> trace;
    auto y = dsrt_forward(x, l->params, &trace);
    REQUIRE(y.shape() == x.shape());
    DsrtReferenceStats stats;
    auto ref = reference_dsrt(to_vec(x), l->params, &stats);
    double worst = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref[i] - y.data()[i]));
    CHECK(worst < 1e-6);
    CHECK(stats.max_window_row_error < 1e-6);
    CHECK(stats.max_aggregator_row_error < 1e-6);

    for (std::size_t s = 0; s + 1 < trace.plan->window_offsets->size(); ++s) {
      double sum = 0;
      for (std::size_t t = (*trace.plan->window_offsets)[s]; t < (*trace.plan->window_offsets)[s + 1]; ++t)
        sum += trace.window[t];
      REQUIRE(std::abs(sum - 1) < 1e-6);
    }
    for (std::size_t m = 0; m < trace.aggregator.size() / 4; ++m)
      REQUIRE(std::abs(trace.aggregator[4 * m] + trace.aggregator[4 * m + 1] +
                       trace.aggregator[4 * m + 2] + trace.aggregator[4 * m + 3] - 1) < 1e-6);

    auto again = dsrt_forward(x, l->params);
    for (std::size_t i = 0; i < y.numel(); ++i) REQUIRE(y.data()[i] == again.data()[i]);
  }
}

TEST_CASE("dsrt rejects a grid that differs from its configuration", "[dsrt][layer]") {
  auto l = make_layer(1, 4, 3, 3, 1, false);
  CHECK_THROWS_AS(dsrt_forward(Tensor<double>({4, 3, 4}, 0.0), l->params), DimensionError);
  CHECK_THROWS_AS(dsrt_forward(Tensor<double>({2, 3, 3}, 0.0), l->params), DimensionError);
  ParamStore<double> s;
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(DsrtParams<double>::create(s, "x", {3, 4, 2, 2}, rng), ArgumentError);
}

TEST_CASE("constant field stays constant at initialization", "[dsrt][layer]") {
  auto l = make_layer(2, 8, 5, 4, 9, false);
  std::vector<double> v(8 * 20);
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t i = 0; i < 20; ++i) v[c * 20 + i] = 0.3 * c - 1.0;
  auto y = dsrt_forward(Tensor<double>({8, 5, 4}, v), l->params);
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t i = 1; i < 20; ++i) CHECK(std::abs(y.data()[c * 20 + i] - y.data()[c * 20]) < 1e-12);
}

TEST_CASE("dsrt layer gradients agree with finite differences", "[dsrt][grad]") {
  auto l = make_layer(1, 4, 3, 3, 31, true);
  std::mt19937_64 rng(8);
  auto x = random_tensor({4, 3, 3}, rng);
  std::vector<Tensor<double>> inputs{x};
  for (auto& p : l->store.params()) inputs.push_back(p.tensor);
  auto r = grad_check(inputs, [&] { return weighted_sum(dsrt_forward(x, l->params)); });
  INFO("max relative error " << r.max_rel_error);
  CHECK(r.max_rel_error <= 1e-4);
  CHECK(r.checked > 100);

  auto l2 = make_layer(2, 4, 2, 3, 32, true);
  auto x2 = random_tensor({4, 2, 3}, rng);
  std::vector<Tensor<double>> in2{x2};
  for (auto& p : l2->store.params()) in2.push_back(p.tensor);
  auto r2 = grad_check(in2, [&] { return weighted_sum(dsrt_forward(x2, l2->params)); });
  CHECK(r2.max_rel_error <= 1e-4);
}

TEST_CASE("dsrt cost grows with the grid", "[dsrt][timing]") {
  std::vector<double> seconds;
  for (std::size_t g : {4, 8, 12}) {
    ParamStore<float> store;
    std::mt19937_64 rng(1);
    auto p = DsrtParams<float>::create(store, "t", {2, 16, g, g}, rng);
    Tensor<float> x({16, g, g}, 0.1f);
    NoGradGuard guard;
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 3; ++i) dsrt_forward(x, p);
    seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 3);
  }
  std::cout << "dsrt forward seconds for grids 4/8/12: " << seconds[0] << " " << seconds[1] << " "
            << seconds[2] << "\n";
  SUCCEED();
}
