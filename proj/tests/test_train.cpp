#include "mahgcn/train.hpp"

#include <doctest.h>

#include <set>

using namespace mahgcn;

namespace {

struct Fixture {
  MultiscaleAtlasSet atlas;
  Cohort cohort;
  std::vector<MappingMatrix> mappings;
  ModelConfig config;

  explicit Fixture(double effect = 0.6, int per_site = 16) {
    atlas = synth_hierarchy({3, 6}, 3, 77);
    SyntheticSpec spec;
    spec.scales = {3, 6};
    spec.n_sites = 2;
    spec.subjects_per_site = per_site;
    spec.planted_rsn = 0;
    spec.planted_effect_size = effect;
    spec.rng_seed = 7;
    cohort = generate_synthetic(spec, atlas);
    mappings.push_back(compute_mapping(atlas, 1, 0, 0.0));
    config.scales = {3, 6};
    config.hidden_dim = 4;
    config.fl_widths = {8, 6, 4, 2};
    config.dropout_rate = 0.0;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(cohort.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
  }
};

}  // namespace

TEST_CASE("adam minimizes a quadratic") {
  nn::Var x = nn::Var::param(Matrix::Constant(1, 2, 5.0));
  std::vector<nn::Var> params = {x};
  AdamState adam(params);
  for (int step = 0; step < 400; ++step) {
    x.mutable_grad() = 2.0 * x.value();  // d/dx sum(x^2)
    adam_step(params, adam, 0.05, 0.0);
  }
  CHECK(x.value().cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("adam first step has magnitude close to lr") {
  nn::Var x = nn::Var::param(Matrix::Constant(1, 1, 1.0));
  std::vector<nn::Var> params = {x};
  AdamState adam(params);
  x.mutable_grad() = Matrix::Constant(1, 1, 1e-3);
  adam_step(params, adam, 0.01, 0.0);
  // bias-corrected m/sqrt(v) is sign(g) regardless of gradient scale
  CHECK(x.value()(0, 0) == doctest::Approx(1.0 - 0.01).epsilon(1e-4));
}

TEST_CASE("adam skips parameters without gradients and clears used ones") {
  nn::Var a = nn::Var::param(Matrix::Ones(2, 2));
  nn::Var b = nn::Var::param(Matrix::Ones(2, 2));
  std::vector<nn::Var> params = {a, b};
  AdamState adam(params);
  a.mutable_grad() = Matrix::Ones(2, 2);
  adam_step(params, adam, 0.1, 0.0);
  CHECK((b.value().array() - 1.0).abs().maxCoeff() == 0.0);
  CHECK(a.value()(0, 0) < 1.0);
  CHECK(a.grad().size() == 0);
}

TEST_CASE("weight decay shrinks a parameter with zero gradient signal") {
  nn::Var x = nn::Var::param(Matrix::Constant(1, 1, 2.0));
  std::vector<nn::Var> params = {x};
  AdamState adam(params);
  for (int step = 0; step < 300; ++step) {
    x.mutable_grad() = Matrix::Zero(1, 1);
    adam_step(params, adam, 0.05, 0.01);
  }
  CHECK(std::abs(x.value()(0, 0)) < 0.5);
}

TEST_CASE("site stats and class weights") {
  SiteStats st;
  st.n_hc = 30;
  st.n_bd = 10;
  auto [w0, w1] = st.class_weights();
  CHECK(w0 == doctest::Approx(0.5));
  CHECK(w1 == doctest::Approx(1.5));
  CHECK((w0 + w1) / 2.0 == doctest::Approx(1.0));
  CHECK(st.penalty() == doctest::Approx(1.0 / std::sqrt(40.0)));

  SiteStats missing;
  missing.n_hc = 5;
  CHECK_THROWS_AS(missing.class_weights(), Error);
}

TEST_CASE("site-weighted loss equals the per-site decomposition") {
  Matrix logits_m(4, 2);
  logits_m << 1.0, -0.5, 0.2, 0.4, -1.0, 1.0, 0.3, 0.3;
  nn::Var logits = nn::Var::constant(logits_m);
  std::vector<int> labels = {0, 1, 1, 0};
  std::vector<std::string> sites = {"a", "a", "b", "b"};
  std::map<std::string, SiteStats> stats;
  stats["a"] = SiteStats{12, 4};
  stats["b"] = SiteStats{6, 18};

  auto res = site_weighted_loss(logits, labels, sites, stats);

  Matrix probs = softmax_rows(logits_m);
  double expect = 0.0;
  for (const std::string& site : {"a", "b"}) {
    auto [w0, w1] = stats[site].class_weights();
    double mean = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (sites[i] != site) continue;
      double ce = -std::log(probs(static_cast<Index>(i), labels[i]));
      mean += (labels[i] == 0 ? w0 : w1) * ce;
      ++count;
    }
    expect += stats[site].penalty() * mean / count;
  }
  CHECK(res.loss.value()(0, 0) == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("auc_score hand cases") {
  SUBCASE("textbook 0.75") {
    auto auc = auc_score({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1});
    CHECK(*auc == doctest::Approx(0.75));
  }
  SUBCASE("perfect and inverted") {
    CHECK(*auc_score({0.1, 0.9}, {0, 1}) == doctest::Approx(1.0));
    CHECK(*auc_score({0.9, 0.1}, {0, 1}) == doctest::Approx(0.0));
  }
  SUBCASE("all tied scores give 0.5") {
    CHECK(*auc_score({0.4, 0.4, 0.4, 0.4}, {0, 1, 0, 1}) == doctest::Approx(0.5));
  }
  SUBCASE("single class is undefined") {
    CHECK(!auc_score({0.2, 0.3}, {1, 1}).has_value());
  }
}

TEST_CASE("compute_metrics confusion counts") {
  auto rec = compute_metrics({0.9, 0.2, 0.6, 0.4}, {1, 1, 0, 0});
  CHECK(*rec.acc == doctest::Approx(0.5));
  CHECK(*rec.sen == doctest::Approx(0.5));
  CHECK(*rec.spe == doctest::Approx(0.5));
}

TEST_CASE("aggregate_site_metrics skips undefined entries") {
  std::map<std::string, MetricsRecord> per_site;
  MetricsRecord a;
  a.acc = 0.8;
  a.auc = 0.9;
  MetricsRecord b;
  b.acc = 0.6;  // no auc: single-class site
  per_site["a"] = a;
  per_site["b"] = b;
  auto agg = aggregate_site_metrics(per_site);
  CHECK(*agg.acc == doctest::Approx(0.7));
  CHECK(*agg.auc == doctest::Approx(0.9));
}

TEST_CASE("lr schedule switches after the boundary epoch") {
  TrainConfig c;
  c.epochs = 100;
  c.lr_switch_epoch = 50;
  CHECK(c.lr_at(1) == doctest::Approx(0.01));
  CHECK(c.lr_at(50) == doctest::Approx(0.01));
  CHECK(c.lr_at(51) == doctest::Approx(0.001));
}

TEST_CASE("training reduces the loss on a separable cohort") {
  Fixture fx;
  Model model = init_model(fx.config, fx.mappings, 1);
  TrainConfig tc;
  tc.epochs = 10;
  tc.per_site_batch = 8;
  tc.lr_switch_epoch = 10;
  tc.weight_decay = 0.0;
  Rng rng(3);
  auto trace = train_model(model, fx.cohort, fx.all_indices(), tc, rng);
  REQUIRE(trace.size() == 10);
  CHECK(trace.back() < 0.7 * trace.front());
}

TEST_CASE("training fails when a site lacks one class") {
  Fixture fx;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < fx.cohort.size(); ++i)
    if (fx.cohort.subjects[i].site_id == "site0" ||
        fx.cohort.subjects[i].binary_label() == 0)
      idx.push_back(i);
  Model model = init_model(fx.config, fx.mappings, 1);
  TrainConfig tc;
  tc.epochs = 1;
  tc.per_site_batch = 4;
  tc.lr_switch_epoch = 1;
  Rng rng(3);
  CHECK_THROWS_AS(train_model(model, fx.cohort, idx, tc, rng), Error);
}

TEST_CASE("predict is chunk-consistent and bounded") {
  Fixture fx(0.3, 40);
  Model model = init_model(fx.config, fx.mappings, 5);
  auto idx = fx.all_indices();  // 80 subjects crosses the 64-chunk boundary
  auto scores = predict(model, fx.cohort, idx);
  REQUIRE(scores.size() == idx.size());
  for (double s : scores) CHECK((s >= 0.0 && s <= 1.0));

  std::vector<std::size_t> head(idx.begin(), idx.begin() + 30);
  auto head_scores = predict(model, fx.cohort, head);
  for (std::size_t i = 0; i < head.size(); ++i)
    CHECK(head_scores[i] == doctest::Approx(scores[i]).epsilon(1e-12));
}

TEST_CASE("cross_validate partitions, evaluates, and reruns identically") {
  Fixture fx(0.5, 15);
  TrainConfig tc;
  tc.epochs = 2;
  tc.per_site_batch = 6;
  tc.lr_switch_epoch = 1;
  tc.k_folds = 3;
  tc.seed = 11;
  auto builder = [&](std::uint64_t seed) {
    return init_model(fx.config, fx.mappings, seed);
  };
  auto cv = cross_validate(fx.cohort, tc, builder);
  REQUIRE(cv.folds.size() == 3);
  std::set<std::size_t> seen;
  for (const auto& f : cv.folds) {
    for (std::size_t i : f.test_indices) CHECK(seen.insert(i).second);
    CHECK(f.test_scores.size() == f.test_indices.size());
    CHECK(!f.checkpoint.empty());
    CHECK(f.site_averaged.acc.has_value());
  }
  CHECK(seen.size() == fx.cohort.size());
  auto summary = cv.mean_site_averaged();
  CHECK(summary.auc.has_value());

  auto again = cross_validate(fx.cohort, tc, builder);
  for (std::size_t f = 0; f < cv.folds.size(); ++f)
    for (std::size_t i = 0; i < cv.folds[f].test_scores.size(); ++i)
      CHECK(cv.folds[f].test_scores[i] == again.folds[f].test_scores[i]);
}
