#include "mahgcn/spectrum.hpp"

#include <doctest.h>

#include <cmath>

using namespace mahgcn;
using namespace mahgcn::spectrum;

namespace {

// two feature clusters with high within- and low between-correlation
Matrix clustered_features(int per_cluster, int dim, std::uint64_t seed) {
  Rng rng(seed);
  Matrix base_a = rng.gaussian_matrix(1, dim);
  Matrix base_b = rng.gaussian_matrix(1, dim);
  Matrix out(2 * per_cluster, dim);
  for (int i = 0; i < 2 * per_cluster; ++i) {
    const Matrix& base = i < per_cluster ? base_a : base_b;
    out.row(i) = base + 0.2 * rng.gaussian_matrix(1, dim);
  }
  return out;
}

}  // namespace

TEST_CASE("relation_matrix correlation distances") {
  Matrix f(4, 6);
  Rng rng(3);
  f.row(0) = rng.gaussian_matrix(1, 6);
  f.row(1) = 2.0 * f.row(0);            // perfectly correlated
  f.row(2) = -f.row(0);                 // anti-correlated
  f.row(3) = rng.gaussian_matrix(1, 6);
  Matrix rel = relation_matrix(f);
  CHECK(rel(0, 1) == doctest::Approx(0.0));
  CHECK(rel(0, 2) == doctest::Approx(2.0));
  CHECK((rel - rel.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(rel.diagonal().cwiseAbs().maxCoeff() == 0.0);
  CHECK((rel(0, 3) > 0.0 && rel(0, 3) < 2.0));
}

TEST_CASE("relation_matrix neutral distance for constant rows") {
  Matrix f(3, 5);
  Rng rng(4);
  f.row(0) = rng.gaussian_matrix(1, 5);
  f.row(1).setConstant(2.0);
  f.row(2) = rng.gaussian_matrix(1, 5);
  Matrix rel = relation_matrix(f);
  CHECK(rel(0, 1) == doctest::Approx(1.0));
  CHECK(rel(1, 2) == doctest::Approx(1.0));
}

TEST_CASE("consensus_relation weights by AUC") {
  Matrix a = Matrix::Constant(3, 3, 1.0);
  Matrix b = Matrix::Constant(3, 3, 3.0);
  Matrix out = consensus_relation({a, b}, {0.2, 0.6});
  CHECK(out(0, 0) == doctest::Approx(0.25 * 1.0 + 0.75 * 3.0));
  CHECK_THROWS_AS(consensus_relation({a, Matrix::Zero(2, 2)}, {1.0, 1.0}), Error);
  CHECK_THROWS_AS(consensus_relation({a}, {0.0}), Error);
}

TEST_CASE("diffusion embedding separates planted clusters") {
  int per = 12;
  Matrix features = clustered_features(per, 16, 9);
  Matrix rel = relation_matrix(features);
  Embedding emb = diffusion_embed(rel, 2, 0.5, 0.5);

  for (bool e : emb.embedded) CHECK(e);
  REQUIRE(emb.lambdas.size() == 2);
  CHECK(emb.lambdas[0] >= emb.lambdas[1]);
  CHECK(emb.lambdas[0] + emb.lambdas[1] == doctest::Approx(1.0));

  double mean_a = 0.0, mean_b = 0.0;
  for (int i = 0; i < per; ++i) mean_a += emb.coordinates(i, 0);
  for (int i = per; i < 2 * per; ++i) mean_b += emb.coordinates(i, 0);
  mean_a /= per;
  mean_b /= per;
  // gradient 1 splits the clusters: every subject sits on its cluster's side
  double mid = 0.5 * (mean_a + mean_b);
  for (int i = 0; i < 2 * per; ++i) {
    double side = (emb.coordinates(i, 0) - mid) * ((i < per ? mean_a : mean_b) - mid);
    CHECK(side > 0.0);
  }
}

TEST_CASE("diffusion embedding is deterministic") {
  Matrix rel = relation_matrix(clustered_features(8, 10, 21));
  Embedding a = diffusion_embed(rel, 2, 0.5, 0.5);
  Embedding b = diffusion_embed(rel, 2, 0.5, 0.5);
  for (Index i = 0; i < a.coordinates.rows(); ++i)
    for (Index j = 0; j < 2; ++j)
      CHECK(a.coordinates(i, j) == b.coordinates(i, j));
}

TEST_CASE("disconnected graph embeds only the largest component") {
  // blocks of 7 and 5; across-block distance 2 gives zero affinity
  Index n = 12;
  Matrix rel = Matrix::Constant(n, n, 2.0);
  rel.diagonal().setZero();
  Rng rng(31);
  auto fill_block = [&](Index lo, Index hi) {
    for (Index i = lo; i < hi; ++i)
      for (Index j = lo; j < i; ++j) {
        double d = 0.1 + 0.2 * rng.uniform();
        rel(i, j) = d;
        rel(j, i) = d;
      }
  };
  fill_block(0, 7);
  fill_block(7, 12);
  Embedding emb = diffusion_embed(rel, 2, 0.5, 0.5);
  for (Index i = 0; i < 7; ++i) {
    CHECK(emb.embedded[static_cast<std::size_t>(i)]);
    CHECK(std::isfinite(emb.coordinates(i, 0)));
  }
  for (Index i = 7; i < 12; ++i) {
    CHECK(!emb.embedded[static_cast<std::size_t>(i)]);
    CHECK(std::isnan(emb.coordinates(i, 0)));
  }
}

TEST_CASE("partition_asd percentile box") {
  // hand-built embedding: 11 ADHD refs at g1 = 0..10, g2 = 0..10
  Cohort cohort;
  cohort.scales = {4};
  Embedding emb;
  Index n = 11 + 4;
  emb.coordinates = Matrix::Zero(n, 2);
  emb.embedded.assign(static_cast<std::size_t>(n), true);
  for (int i = 0; i < 11; ++i) {
    SubjectRecord rec;
    rec.subject_id = "adhd" + std::to_string(i);
    rec.site_id = "s";
    rec.scanner_id = "s";
    rec.diagnosis = Diagnosis::ADHD;
    rec.age = 10;
    cohort.subjects.push_back(rec);
    emb.coordinates(i, 0) = static_cast<double>(i);
    emb.coordinates(i, 1) = static_cast<double>(i);
  }
  // box: g1 >= 1 (10th percentile), g2 <= 9 (90th percentile)
  std::vector<std::pair<double, double>> asd_coords = {
      {5.0, 5.0},   // inside
      {0.5, 5.0},   // g1 below the lower bound
      {5.0, 9.5},   // g2 above the upper bound
      {1.0, 9.0}};  // exactly on both bounds: inclusive
  for (std::size_t i = 0; i < asd_coords.size(); ++i) {
    SubjectRecord rec;
    rec.subject_id = "asd" + std::to_string(i);
    rec.site_id = "s";
    rec.scanner_id = "s";
    rec.diagnosis = Diagnosis::ASD;
    rec.age = 10;
    cohort.subjects.push_back(rec);
    emb.coordinates(static_cast<Index>(11 + i), 0) = asd_coords[i].first;
    emb.coordinates(static_cast<Index>(11 + i), 1) = asd_coords[i].second;
  }
  auto part = partition_asd(emb, cohort);
  CHECK(part.adhd_like == std::vector<std::size_t>{11, 14});
  CHECK(part.mci_like == std::vector<std::size_t>{12, 13});
}

TEST_CASE("pearson and spearman hand cases") {
  std::vector<double> x = {1, 2, 3, 4, 5};
  std::vector<double> lin = {2, 4, 6, 8, 10};
  std::vector<double> neg = {5, 4, 3, 2, 1};
  CHECK(pearson_r(x, lin) == doctest::Approx(1.0));
  CHECK(pearson_r(x, neg) == doctest::Approx(-1.0));
  // monotone nonlinear: spearman 1, pearson < 1
  std::vector<double> cubic = {1, 8, 27, 64, 125};
  CHECK(spearman_rho(x, cubic) == doctest::Approx(1.0));
  CHECK(pearson_r(x, cubic) < 1.0);
  CHECK_THROWS_AS(pearson_r(x, {1, 1, 1, 1, 1}), Error);
}

TEST_CASE("covariate_association dispatches on covariate type") {
  Rng rng(17);
  std::vector<double> gradient, binary, continuous, noise;
  for (int i = 0; i < 60; ++i) {
    double g = rng.normal();
    gradient.push_back(g);
    binary.push_back(g > 0 ? 1.0 : 0.0);
    continuous.push_back(0.9 * g + 0.1 * rng.normal());
    noise.push_back(rng.normal());
  }

  SUBCASE("binary covariate routes to a rank test") {
    auto assoc = covariate_association(gradient, binary);
    std::vector<double> g0, g1;
    for (std::size_t i = 0; i < gradient.size(); ++i)
      (binary[i] == 0.0 ? g0 : g1).push_back(gradient[i]);
    CHECK(assoc.p ==
          doctest::Approx(stats::mann_whitney_u(g0, g1, stats::Side::TwoSided)));
    CHECK(assoc.p < 1e-6);
  }
  SUBCASE("continuous covariate reports r and a small p under signal") {
    auto assoc = covariate_association(gradient, continuous);
    CHECK(assoc.statistic == doctest::Approx(pearson_r(gradient, continuous)));
    CHECK(assoc.statistic > 0.9);
    CHECK(assoc.p < 1e-8);
  }
  SUBCASE("no association keeps p large") {
    auto assoc = covariate_association(gradient, noise);
    CHECK(assoc.p > 0.01);
  }
  SUBCASE("input validation") {
    CHECK_THROWS_AS(covariate_association({1, 2, 3}, {1, 2, 3}), Error);
    std::vector<double> constant(60, 1.0);
    CHECK_THROWS_AS(covariate_association(gradient, constant), Error);
  }
}
