#include "mahgcn/model.hpp"

#include <doctest.h>

#include <filesystem>

using namespace mahgcn;

namespace {

struct Fixture {
  MultiscaleAtlasSet atlas;
  Cohort cohort;
  std::vector<MappingMatrix> mappings;
  ModelConfig config;

  Fixture() {
    atlas = synth_hierarchy({3, 6}, 3, 21);
    SyntheticSpec spec;
    spec.scales = {3, 6};
    spec.n_sites = 2;
    spec.subjects_per_site = 6;
    spec.planted_rsn = 0;
    spec.planted_effect_size = 0.2;
    spec.rng_seed = 100;
    cohort = generate_synthetic(spec, atlas);
    mappings.push_back(compute_mapping(atlas, 1, 0, 0.0));
    config.scales = {3, 6};
    config.hidden_dim = 4;
    config.fl_widths = {8, 6, 4, 2};
    config.dropout_rate = 0.0;
  }

  std::vector<const SubjectRecord*> batch(std::size_t n) const {
    std::vector<const SubjectRecord*> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(&cohort.subjects[i]);
    return out;
  }
};

}  // namespace

TEST_CASE("normalize_adjacency hand cases") {
  SUBCASE("two-node unit edge gives all 0.5") {
    Matrix a(2, 2);
    a << 0, 1, 1, 0;
    Matrix n = normalize_adjacency(a);
    CHECK((n.array() - 0.5).abs().maxCoeff() < 1e-14);
  }
  SUBCASE("negative edge keeps sign, degree uses magnitude") {
    Matrix a(2, 2);
    a << 0, -1, -1, 0;
    Matrix n = normalize_adjacency(a);
    CHECK(n(0, 0) == doctest::Approx(0.5));
    CHECK(n(0, 1) == doctest::Approx(-0.5));
  }
  SUBCASE("empty graph normalizes to identity") {
    Matrix n = normalize_adjacency(Matrix::Zero(3, 3));
    CHECK((n - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("symmetry is preserved") {
    Rng rng(4);
    Matrix a = rng.gaussian_matrix(5, 5);
    a = ((a + a.transpose()) / 2.0).eval();
    a.diagonal().setZero();
    Matrix n = normalize_adjacency(a);
    CHECK((n - n.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("rejects non-square and non-finite") {
    CHECK_THROWS_AS(normalize_adjacency(Matrix::Zero(2, 3)), Error);
    Matrix bad = Matrix::Zero(2, 2);
    bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(normalize_adjacency(bad), Error);
  }
}

TEST_CASE("model config validation") {
  ModelConfig c;
  c.scales = {10, 20};
  c.validate();
  SUBCASE("scales must increase") {
    c.scales = {20, 10};
    CHECK_THROWS_AS(c.validate(), Error);
  }
  SUBCASE("final layer width is two") {
    c.fl_widths = {256, 64, 16, 3};
    CHECK_THROWS_AS(c.validate(), Error);
  }
  SUBCASE("readout concatenates one block per scale") {
    c.hidden_dim = 16;
    CHECK(c.readout_dim() == 32);
  }
}

TEST_CASE("init_model shapes and init ranges") {
  Fixture fx;
  Model model = init_model(fx.config, fx.mappings, 7);
  REQUIRE(model.gcn.size() == 2);
  // finest-first: gcn0 consumes identity features of the finest scale
  CHECK(model.gcn[0].weight.rows() == 6);
  CHECK(model.gcn[0].weight.cols() == 4);
  CHECK(model.gcn[1].weight.rows() == 4);
  REQUIRE(model.pool.size() == 1);
  CHECK(model.pool[0].rows() == 6);
  CHECK(model.pool[0].cols() == 3);
  REQUIRE(model.fl.size() == 4);
  CHECK(model.fl[0].weight.rows() == fx.config.readout_dim());
  CHECK(model.fl[3].weight.cols() == 2);
  CHECK(model.fl[3].has_bn == false);

  for (auto& [name, var] : model.named_params()) {
    if (name.find("weight") != std::string::npos) {
      double bound = 1.0 / std::sqrt(static_cast<double>(var.rows()));
      CHECK(var.value().cwiseAbs().maxCoeff() <= bound);
    }
    if (name.find("bias") != std::string::npos)
      CHECK(var.value().cwiseAbs().maxCoeff() == 0.0);
    if (name.find("gamma") != std::string::npos)
      CHECK((var.value().array() - 1.0).abs().maxCoeff() == 0.0);
  }

  Model again = init_model(fx.config, fx.mappings, 7);
  CHECK((model.gcn[0].weight.value() - again.gcn[0].weight.value()).norm() == 0.0);
  Model other = init_model(fx.config, fx.mappings, 8);
  CHECK((model.gcn[0].weight.value() - other.gcn[0].weight.value()).norm() != 0.0);
}

TEST_CASE("forward pass shapes and probabilities") {
  Fixture fx;
  Model model = init_model(fx.config, fx.mappings, 3);
  Rng rng(1);
  auto batch = fx.batch(4);
  ForwardTrace trace = mahgcn_forward(model, batch, nn::Mode::Train, rng);
  CHECK(trace.logits.rows() == 4);
  CHECK(trace.logits.cols() == 2);
  for (Index i = 0; i < 4; ++i)
    CHECK(trace.probs.row(i).sum() == doctest::Approx(1.0));
  REQUIRE(trace.scale_features.size() == 4);
  // finest first: 6-node features then pooled 3-node features
  CHECK(trace.scale_features[0][0].rows() == 6);
  CHECK(trace.scale_features[0][1].rows() == 3);
  CHECK(trace.scale_features[0][0].cols() == 4);
  CHECK(trace.fl3.rows() == 4);
  CHECK(trace.fl3.cols() == 4);
}

TEST_CASE("eval forward is deterministic and batch-size invariant") {
  Fixture fx;
  ModelConfig cfg = fx.config;
  cfg.dropout_rate = 0.3;  // must be ignored in eval mode
  Model model = init_model(cfg, fx.mappings, 11);
  // seed running stats away from init so eval batchnorm is nontrivial
  Rng warm(2);
  auto wb = fx.batch(8);
  (void)mahgcn_forward(model, wb, nn::Mode::Train, warm);

  Rng rng(1);
  auto batch = fx.batch(5);
  Matrix p1 = mahgcn_forward(model, batch, nn::Mode::Eval, rng).probs;
  Matrix p2 = mahgcn_forward(model, batch, nn::Mode::Eval, rng).probs;
  CHECK((p1 - p2).cwiseAbs().maxCoeff() == 0.0);

  // eval-mode rows do not depend on the rest of the batch
  Matrix solo = mahgcn_forward(model, fx.cohort.subjects[2], nn::Mode::Eval, rng).probs;
  CHECK((p1.row(2) - solo.row(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("single-scale model runs on a multiscale cohort") {
  Fixture fx;
  Model model = init_single_scale_model(6, 4, {8, 6, 4, 2}, 0.0, 5);
  Rng rng(1);
  auto batch = fx.batch(3);
  ForwardTrace trace = mahgcn_forward(model, batch, nn::Mode::Train, rng);
  CHECK(trace.logits.rows() == 3);
  CHECK(trace.scale_features[0].size() == 1);
  CHECK(trace.scale_features[0][0].rows() == 6);

  Model missing = init_single_scale_model(7, 4, {8, 6, 4, 2}, 0.0, 5);
  CHECK_THROWS_AS(mahgcn_forward(missing, batch, nn::Mode::Train, rng), Error);
}

TEST_CASE("full model gradient matches finite differences") {
  Fixture fx;
  Model model = init_model(fx.config, fx.mappings, 13);
  auto batch = fx.batch(4);
  std::vector<int> labels;
  for (const auto* s : batch) labels.push_back(s->binary_label());
  std::vector<double> weights(batch.size(), 1.0);
  Rng rng(1);

  auto loss_value = [&]() {
    ForwardTrace trace = mahgcn_forward(model, batch, nn::Mode::Train, rng);
    return nn::softmax_crossentropy(trace.logits, labels, weights);
  };

  // analytic gradients for every parameter from one backward pass
  auto res = loss_value();
  nn::backward(res.loss);
  for (auto& [name, var] : model.named_params()) {
    Matrix analytic = var.grad();
    REQUIRE(analytic.size() > 0);
    nn::Var param = var;
    auto f = [&](const Matrix& x) {
      Matrix saved = param.value();
      param.mutable_value() = x;
      double v = loss_value().loss.value()(0, 0);
      param.mutable_value() = saved;
      return v;
    };
    double err = nn::finite_diff_check(f, param.value(), analytic);
    INFO("parameter ", name);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("checkpoint round trip reproduces predictions") {
  Fixture fx;
  Model model = init_model(fx.config, fx.mappings, 17);
  Rng warm(3);
  auto wb = fx.batch(8);
  (void)mahgcn_forward(model, wb, nn::Mode::Train, warm);  // move bn stats

  auto path = std::filesystem::temp_directory_path() / "mahgcn_test_ckpt.bin";
  io::write_checkpoint(path.string(), model.to_tensors());
  Model fresh = init_model(fx.config, fx.mappings, 99);
  fresh.from_tensors(io::read_checkpoint(path.string()));
  std::filesystem::remove(path);

  Rng rng(1);
  auto batch = fx.batch(5);
  Matrix a = mahgcn_forward(model, batch, nn::Mode::Eval, rng).probs;
  Matrix b = mahgcn_forward(fresh, batch, nn::Mode::Eval, rng).probs;
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("clone is independent of the original") {
  Fixture fx;
  Model model = init_model(fx.config, fx.mappings, 23);
  Model copy = model.clone();
  Rng rng(1);
  auto batch = fx.batch(3);
  Matrix a = mahgcn_forward(model, batch, nn::Mode::Eval, rng).probs;
  Matrix b = mahgcn_forward(copy, batch, nn::Mode::Eval, rng).probs;
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);

  copy.gcn[0].weight.mutable_value().array() += 0.5;
  Matrix c = mahgcn_forward(model, batch, nn::Mode::Eval, rng).probs;
  CHECK((a - c).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("softmax_rows is stable and normalized") {
  Matrix logits(2, 2);
  logits << 1000.0, -1000.0, 3.0, 3.0;
  Matrix p = softmax_rows(logits);
  CHECK(p(0, 0) == doctest::Approx(1.0));
  CHECK(p(1, 0) == doctest::Approx(0.5));
  for (Index i = 0; i < 2; ++i) CHECK(p.row(i).sum() == doctest::Approx(1.0));
}
