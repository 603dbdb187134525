#include <cmath>
#include <memory>
#include <random>

#include <Eigen/Dense>
#include <catch2/catch_amalgamated.hpp>

#include "builders.hpp"
#include "oracles.hpp"
#include "poiattrib/encoding.hpp"
#include "poiattrib/params.hpp"

using namespace poiattrib;

TEST_CASE("time features are zero when all parameters are zero", "[encoding]") {
  ParamRegistry reg;
  Time2Vec tv(reg, "t", 6);  // params start at zero
  Eigen::RowVectorXd out(6);
  tv.forward(123.456, out);
  for (int i = 0; i < 6; ++i) CHECK(out(i) == 0.0);
}

TEST_CASE("time features follow the linear-plus-sines formula", "[encoding]") {
  ParamRegistry reg;
  Time2Vec tv(reg, "t", 4);
  Tensor& omega = reg.at("t.omega");
  Tensor& phi = reg.at("t.phi");
  omega.value << 0.5, 1.0, 2.0, 0.25;
  phi.value << 0.1, 0.2, 0.3, 0.4;
  const double t = 3.7;
  Eigen::RowVectorXd out(4);
  tv.forward(t, out);
  CHECK(out(0) == 0.5 * t + 0.1);
  CHECK(out(1) == std::sin(1.0 * t + 0.2));
  CHECK(out(2) == std::sin(2.0 * t + 0.3));
  CHECK(out(3) == std::sin(0.25 * t + 0.4));
}

TEST_CASE("periodic time features repeat after one period", "[encoding]") {
  ParamRegistry reg;
  Time2Vec tv(reg, "t", 5);
  std::mt19937_64 rng(4);
  tv.init(rng);
  const Tensor& omega = reg.at("t.omega");
  const double t = 7.25;
  Eigen::RowVectorXd a(5), b(5);
  tv.forward(t, a);
  for (int i = 1; i < 5; ++i) {
    const double period = 2.0 * kPi / omega.value(0, i);
    tv.forward(t + period, b);
    CHECK(b(i) == Catch::Approx(a(i)).margin(1e-9));
  }
}

TEST_CASE("time feature parameter gradients match finite differences", "[encoding]") {
  ParamRegistry reg;
  Time2Vec tv(reg, "t", 6);
  std::mt19937_64 rng(9);
  tv.init(rng);
  Tensor& omega = reg.at("t.omega");
  Tensor& phi = reg.at("t.phi");
  const double t = 5.25;
  Eigen::RowVectorXd v(6);
  for (int i = 0; i < 6; ++i) v(i) = 0.3 + 0.1 * i;

  reg.zero_grads();
  tv.backward(t, v);  // gradient of f = <out, v>

  const auto f_of = [&](Tensor& tensor, int col, double value) {
    const double saved = tensor.value(0, col);
    tensor.value(0, col) = value;
    Eigen::RowVectorXd out(6);
    tv.forward(t, out);
    tensor.value(0, col) = saved;
    return out.dot(v);
  };
  const double step = 1e-5;
  for (int i = 0; i < 6; ++i) {
    const double x0 = omega.value(0, i);
    const double numeric = (f_of(omega, i, x0 + step) - f_of(omega, i, x0 - step)) / (2 * step);
    const double analytic = omega.grad(0, i);
    CHECK(std::abs(analytic - numeric) /
              std::max({std::abs(analytic), std::abs(numeric), 1e-8}) <
          1e-5);
    const double p0 = phi.value(0, i);
    const double pnum = (f_of(phi, i, p0 + step) - f_of(phi, i, p0 - step)) / (2 * step);
    CHECK(std::abs(phi.grad(0, i) - pnum) /
              std::max({std::abs(phi.grad(0, i)), std::abs(pnum), 1e-8}) <
          1e-5);
  }
}

TEST_CASE("space features at the origin are alternating sin-zero cos-one", "[encoding]") {
  ParamRegistry reg;
  EncodingConfig cfg;
  cfg.space_scales = 4;
  cfg.d_s = 8;
  Space2Vec sv(reg, "s", cfg);
  const Eigen::RowVectorXd raw = sv.raw_features({0.0, 0.0});
  REQUIRE(raw.size() == 2 * 3 * 4);
  for (int k = 0; k < raw.size(); k += 2) {
    CHECK(raw(k) == 0.0);
    CHECK(raw(k + 1) == 1.0);
  }
}

TEST_CASE("space wavelengths are geometric between min and max", "[encoding]") {
  ParamRegistry reg;
  EncodingConfig cfg;
  cfg.space_scales = 6;
  cfg.lambda_min_m = 10.0;
  cfg.lambda_max_m = 10000.0;
  Space2Vec sv(reg, "s", cfg);
  CHECK(sv.wavelength(0) == Catch::Approx(10.0));
  CHECK(sv.wavelength(5) == Catch::Approx(10000.0));
  const double ratio = sv.wavelength(1) / sv.wavelength(0);
  for (int s = 1; s + 1 < 6; ++s)
    CHECK(sv.wavelength(s + 1) / sv.wavelength(s) == Catch::Approx(ratio).epsilon(1e-12));
}

TEST_CASE("translating by one wavelength preserves that level's features", "[encoding]") {
  ParamRegistry reg;
  EncodingConfig cfg;
  cfg.space_scales = 5;
  Space2Vec sv(reg, "s", cfg);
  const ProjectedPoint p{123.4, -56.7};
  const Eigen::RowVectorXd before = sv.raw_features(p);
  const int level = 3;
  const double lambda = sv.wavelength(level);
  // translate along the first direction (unit x)
  const Eigen::RowVectorXd after = sv.raw_features({p.x + lambda, p.y});
  const int k = level * 6;  // [sin, cos] x three directions per level
  CHECK(after(k) == Catch::Approx(before(k)).margin(1e-9));
  CHECK(after(k + 1) == Catch::Approx(before(k + 1)).margin(1e-9));
}

TEST_CASE("space projection gradients match finite differences", "[encoding]") {
  ParamRegistry reg;
  EncodingConfig cfg;
  cfg.space_scales = 3;
  cfg.d_s = 4;
  Space2Vec sv(reg, "s", cfg);
  std::mt19937_64 rng(5);
  sv.init(rng);
  Tensor& w = reg.at("s.proj_w");
  const ProjectedPoint p{37.5, -12.25};
  Eigen::RowVectorXd v(4);
  v << 0.7, -0.3, 0.2, 1.1;

  reg.zero_grads();
  sv.backward(p, v);

  const double step = 1e-4;
  std::uniform_int_distribution<int> pick_r(0, static_cast<int>(w.rows()) - 1);
  std::uniform_int_distribution<int> pick_c(0, static_cast<int>(w.cols()) - 1);
  for (int trial = 0; trial < 20; ++trial) {
    const int r = pick_r(rng), c = pick_c(rng);
    const double saved = w.value(r, c);
    Eigen::RowVectorXd out(4);
    w.value(r, c) = saved + step;
    sv.forward(p, out);
    const double up = out.dot(v);
    w.value(r, c) = saved - step;
    sv.forward(p, out);
    const double down = out.dot(v);
    w.value(r, c) = saved;
    const double numeric = (up - down) / (2 * step);
    const double analytic = w.grad(r, c);
    CHECK(std::abs(analytic - numeric) /
              std::max({std::abs(analytic), std::abs(numeric), 1e-8}) <
          1e-5);
  }
}

TEST_CASE("category embedding returns the exact row for singletons", "[encoding]") {
  ParamRegistry reg;
  CategoryEmbedding emb(reg, "c", 4, 5);
  std::mt19937_64 rng(2);
  emb.init(rng);
  const Tensor& table = reg.at("c.table");

  Eigen::RowVectorXd out(5);
  emb.forward({2}, out);
  CHECK((out - table.value.row(2)).cwiseAbs().maxCoeff() == 0.0);
  emb.forward({2, 2}, out);  // duplicates collapse
  CHECK((out - table.value.row(2)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("multi-category embeddings average the member rows", "[encoding]") {
  ParamRegistry reg;
  CategoryEmbedding emb(reg, "c", 6, 4);
  std::mt19937_64 rng(3);
  emb.init(rng);
  const Tensor& table = reg.at("c.table");

  Eigen::RowVectorXd out(4);
  emb.forward({1, 4, 3}, out);
  for (int j = 0; j < 4; ++j) {
    const double expected =
        (table.value(1, j) + table.value(3, j) + table.value(4, j)) / 3.0;
    CHECK(out(j) == Catch::Approx(expected).margin(1e-15));
  }
}

TEST_CASE("the mask row is the extra table row", "[encoding]") {
  ParamRegistry reg;
  CategoryEmbedding emb(reg, "c", 3, 4);
  std::mt19937_64 rng(6);
  emb.init(rng);
  const Tensor& table = reg.at("c.table");
  REQUIRE(table.rows() == 4);  // V + 1

  Eigen::RowVectorXd out(4);
  emb.forward_mask(out);
  CHECK((out - table.value.row(3)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("unknown and empty category sets are rejected", "[encoding]") {
  ParamRegistry reg;
  CategoryEmbedding emb(reg, "c", 3, 4);
  Eigen::RowVectorXd out(4);
  CHECK_THROWS_AS(emb.forward({7}, out), Error);
  try {
    emb.forward({7}, out);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::unknown_category);
  }
  CHECK_THROWS_AS(emb.forward({}, out), Error);
}

TEST_CASE("category gradients spread evenly over the member rows", "[encoding]") {
  ParamRegistry reg;
  CategoryEmbedding emb(reg, "c", 5, 3);
  Tensor& table = reg.at("c.table");
  Eigen::RowVectorXd dout(3);
  dout << 1.0, 2.0, 3.0;
  reg.zero_grads();
  emb.backward({0, 2}, dout);
  CHECK(table.grad(0, 0) == 0.5);
  CHECK(table.grad(2, 2) == 1.5);
  CHECK(table.grad(1, 0) == 0.0);
  reg.zero_grads();
  emb.backward_mask(dout);
  CHECK(table.grad(5, 1) == 2.0);
}

namespace {

struct TokenFixture {
  ParamRegistry reg;
  EncodingConfig cfg;
  PoiCatalog catalog;
  std::unique_ptr<TokenEncoder> enc;
  Trajectory traj;

  TokenFixture() {
    cfg.d_s = 6;
    cfg.d_t = 4;
    cfg.d_c = 6;
    cfg.space_scales = 3;
    catalog = testutil::make_catalog({{"a", 34.0, -118.0, {"cafe"}},
                                      {"b", 34.001, -118.001, {"bar", "club"}},
                                      {"c", 34.002, -118.002, {"gym"}}});
    enc = std::make_unique<TokenEncoder>(reg, cfg, catalog.vocab.size());
    std::mt19937_64 rng(13);
    enc->init(rng);
    traj = testutil::make_traj(
        "u", {testutil::make_stay(34.0, -118.0, 0.0, 1800.0, "a"),
              testutil::make_stay(34.001, -118.001, 3600.0, 5400.0, "b"),
              testutil::make_stay(34.002, -118.002, 7200.0, 9000.0, "c")});
  }
};

}  // namespace

TEST_CASE_METHOD(TokenFixture, "a single stay becomes one token with position zero",
                 "[encoding]") {
  Trajectory single = testutil::make_traj("u", {traj.stays[0]});
  Eigen::MatrixXd tokens;
  enc->forward(single, 0, catalog, tokens);
  REQUIRE(tokens.rows() == 1);
  REQUIRE(tokens.cols() == cfg.d_model());

  // reconstruct by hand: sub-encoders plus the position-0 pattern
  Eigen::RowVectorXd expected(cfg.d_model());
  const ProjectedPoint xy = project(single.stays[0].location, catalog.origin);
  enc->space().forward(xy, expected.segment(0, cfg.d_s));
  enc->time_arrival().forward(0.0, expected.segment(cfg.d_s, cfg.d_t));
  enc->time_departure().forward(1800.0 / 3600.0,
                                expected.segment(cfg.d_s + cfg.d_t, cfg.d_t));
  enc->categories().forward_mask(expected.segment(cfg.d_s + 2 * cfg.d_t, cfg.d_c));
  Eigen::RowVectorXd pos(cfg.d_model());
  positional_encoding(0, pos);
  for (int j = 0; j < cfg.d_model(); ++j) {
    CHECK(tokens(0, j) == expected(j) + pos(j));
    if (j % 2 == 0)
      CHECK(pos(j) == 0.0);  // sin(0)
    else
      CHECK(pos(j) == 1.0);  // cos(0)
  }
}

TEST_CASE_METHOD(TokenFixture, "non-target tokens reproduce the sub-encoder slices",
                 "[encoding]") {
  Eigen::MatrixXd tokens;
  const std::size_t target = 1;
  enc->forward(traj, target, catalog, tokens);
  REQUIRE(tokens.rows() == 3);

  for (std::size_t i = 0; i < 3; ++i) {
    if (i == target) continue;
    const Stay& s = traj.stays[i];
    Eigen::RowVectorXd expected(cfg.d_model());
    enc->space().forward(project(s.location, catalog.origin), expected.segment(0, cfg.d_s));
    enc->time_arrival().forward(s.arrival_s / 3600.0, expected.segment(cfg.d_s, cfg.d_t));
    enc->time_departure().forward(s.departure_s / 3600.0,
                                  expected.segment(cfg.d_s + cfg.d_t, cfg.d_t));
    enc->categories().forward(catalog.require(s.true_poi).categories,
                              expected.segment(cfg.d_s + 2 * cfg.d_t, cfg.d_c));
    Eigen::RowVectorXd pos(cfg.d_model());
    positional_encoding(static_cast<int>(i), pos);
    expected += pos;
    for (int j = 0; j < cfg.d_model(); ++j)
      CHECK(tokens(static_cast<Eigen::Index>(i), j) == expected(j));
  }
}

TEST_CASE_METHOD(TokenFixture, "the target token uses the mask row regardless of label",
                 "[encoding]") {
  const std::size_t target = 1;
  Eigen::MatrixXd with_b;
  enc->forward(traj, target, catalog, with_b);

  Trajectory relabeled = traj;
  relabeled.stays[target].true_poi = "c";  // different label, different categories
  Eigen::MatrixXd with_c;
  enc->forward(relabeled, target, catalog, with_c);
  // bit-identical: the label never enters the input
  CHECK((with_b - with_c).cwiseAbs().maxCoeff() == 0.0);

  // and the category slice is exactly mask row + positional slice
  Eigen::RowVectorXd mask(cfg.d_c);
  enc->categories().forward_mask(mask);
  Eigen::RowVectorXd pos(cfg.d_model());
  positional_encoding(static_cast<int>(target), pos);
  const int off = cfg.d_s + 2 * cfg.d_t;
  for (int j = 0; j < cfg.d_c; ++j)
    CHECK(with_b(static_cast<Eigen::Index>(target), off + j) == mask(j) + pos(off + j));
}

TEST_CASE_METHOD(TokenFixture, "unlabeled context stays also use the mask row", "[encoding]") {
  Trajectory t = traj;
  t.stays[2].true_poi.clear();
  Eigen::MatrixXd tokens;
  enc->forward(t, 0, catalog, tokens);

  Eigen::RowVectorXd mask(cfg.d_c);
  enc->categories().forward_mask(mask);
  Eigen::RowVectorXd pos(cfg.d_model());
  positional_encoding(2, pos);
  const int off = cfg.d_s + 2 * cfg.d_t;
  for (int j = 0; j < cfg.d_c; ++j) CHECK(tokens(2, off + j) == mask(j) + pos(off + j));
}

TEST_CASE_METHOD(TokenFixture, "an out-of-range target index is rejected", "[encoding]") {
  Eigen::MatrixXd tokens;
  CHECK_THROWS_AS(enc->forward(traj, 3, catalog, tokens), Error);
}
