#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <catch2/catch_amalgamated.hpp>
#include <nlohmann/json.hpp>

#include "builders.hpp"
#include "poiattrib/train.hpp"

using namespace poiattrib;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::validation;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  REQUIRE(out.good());
}

ModelConfig small_config() {
  ModelConfig mc;
  mc.enc.d_s = 8;
  mc.enc.d_t = 4;
  mc.enc.d_c = 8;
  mc.enc.space_scales = 3;
  mc.layers = 1;
  mc.heads = 2;
  mc.d_ff = 32;
  mc.dropout = 0.0;
  mc.context_window = 8;
  mc.candidate_radius_m = 300.0;
  mc.candidate_k = 8;
  return mc;
}

/// Two POIs with hour-coded visits: nights at home, midday at the office.
/// Both POIs sit inside every candidate set, so only context can tell them
/// apart.
struct SmallWorld {
  PoiCatalog catalog;
  std::vector<Trajectory> trajs;

  explicit SmallWorld(int days = 10, int users = 2) {
    catalog = testutil::make_catalog({
        {"home", 40.0, -74.0, {"residence"}},
        {"work", 40.0004, -74.0, {"office"}},
    });
    std::mt19937_64 rng(17);
    std::normal_distribution<double> jitter(0.0, 0.00002);
    for (int u = 0; u < users; ++u) {
      Trajectory t;
      t.user_id = "u" + std::to_string(u);
      for (int d = 0; d < days; ++d) {
        const double base = static_cast<double>(d) * 86400.0;
        const double night = base + 2.0 * 3600.0;
        const double noon = base + 13.0 * 3600.0;
        t.stays.push_back(testutil::make_stay(40.0 + jitter(rng), -74.0 + jitter(rng),
                                              night, night + 4.0 * 3600.0, "home"));
        t.stays.push_back(testutil::make_stay(40.0004 + jitter(rng),
                                              -74.0 + jitter(rng), noon,
                                              noon + 4.0 * 3600.0, "work"));
      }
      trajs.push_back(std::move(t));
    }
  }
};

CandidateScores make_scores(std::vector<std::string> ids, std::vector<double> logits) {
  CandidateScores s;
  s.poi_ids = std::move(ids);
  s.logit = std::move(logits);
  s.log_likelihood_part.assign(s.poi_ids.size(), 0.0);
  s.log_prior_part = s.logit;
  s.valid.assign(s.poi_ids.size(), 1);
  return s;
}

}  // namespace

TEST_CASE("training config validation", "[train]") {
  TrainConfig cfg;
  cfg.learning_rate = -1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.jitter_sigma_deg = -0.1;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("cross-entropy over candidates has its closed-form corner values",
          "[train]") {
  SmallWorld world;
  ScoreOptions opts;
  opts.kde_term = false;

  // a lone candidate is always certain
  CandidateScores one = make_scores({"home"}, {-3.7});
  LossResult res = candidate_loss(one, 0, world.catalog, opts);
  CHECK(res.loss == Catch::Approx(0.0).margin(1e-12));
  CHECK(res.raw_nll == Catch::Approx(3.7).margin(1e-12));
  CHECK(res.top1_correct);
  CHECK_FALSE(res.skipped);

  // two equal logits split the probability evenly
  CandidateScores two = make_scores({"home", "work"}, {1.25, 1.25});
  res = candidate_loss(two, 1, world.catalog, opts);
  CHECK(res.loss == Catch::Approx(std::log(2.0)).margin(1e-12));

  // a missing truth is a skip, not an error
  res = candidate_loss(two, -1, world.catalog, opts);
  CHECK(res.skipped);

  // raising the true logit strictly lowers the loss
  double prev = candidate_loss(make_scores({"home", "work"}, {0.0, 0.0}), 0,
                               world.catalog, opts)
                    .loss;
  for (double boost = 0.5; boost <= 3.0; boost += 0.5) {
    const double cur = candidate_loss(make_scores({"home", "work"}, {boost, 0.0}), 0,
                                      world.catalog, opts)
                           .loss;
    CHECK(cur < prev);
    prev = cur;
  }

  // an infinitely bad true candidate is a hard failure
  CandidateScores bad = make_scores({"home", "work"}, {kNegInf, 0.0});
  CHECK(kind_of([&] { candidate_loss(bad, 0, world.catalog, opts); }) ==
        ErrorKind::non_finite);
}

TEST_CASE("the prior gradient is softmax minus the one-hot truth, per category",
          "[train]") {
  SmallWorld world;
  ScoreOptions opts;
  opts.kde_term = false;
  CandidateScores scores = make_scores({"home", "work"}, {1.0, -0.5});
  const LossResult res = candidate_loss(scores, 0, world.catalog, opts);

  const double p_home = std::exp(1.0) / (std::exp(1.0) + std::exp(-0.5));
  const double p_work = 1.0 - p_home;
  const auto residence =
      static_cast<Eigen::Index>(world.catalog.vocab.require("residence"));
  const auto office = static_cast<Eigen::Index>(world.catalog.vocab.require("office"));
  REQUIRE(res.d_log_prior.size() ==
          static_cast<Eigen::Index>(world.catalog.vocab.size()));
  CHECK(res.d_log_prior(residence) == Catch::Approx(p_home - 1.0).margin(1e-12));
  CHECK(res.d_log_prior(office) == Catch::Approx(p_work).margin(1e-12));

  // with the prior term ablated the gradient vanishes entirely
  ScoreOptions no_prior;
  no_prior.prior_term = false;
  const LossResult silent = candidate_loss(scores, 0, world.catalog, no_prior);
  CHECK(silent.d_log_prior.cwiseAbs().maxCoeff() == 0.0);

  // probabilities over slots sum to one, so the gradient sums to zero when
  // every candidate has exactly one category
  CHECK(std::abs(res.d_log_prior.sum()) < 1e-12);
}

TEST_CASE("loss is invariant to candidate slot order", "[train]") {
  SmallWorld world;
  ScoreOptions opts;
  opts.kde_term = false;
  CandidateScores fwd = make_scores({"home", "work"}, {0.3, 1.9});
  CandidateScores rev = make_scores({"work", "home"}, {1.9, 0.3});
  const LossResult a = candidate_loss(fwd, 1, world.catalog, opts);
  const LossResult b = candidate_loss(rev, 0, world.catalog, opts);
  CHECK(a.loss == Catch::Approx(b.loss).margin(1e-12));
  CHECK(a.raw_nll == Catch::Approx(b.raw_nll).margin(1e-12));
  CHECK(a.top1_correct == b.top1_correct);
  CHECK((a.d_log_prior - b.d_log_prior).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("example building keeps labeled stays and locates the truth slot",
          "[train]") {
  SmallWorld world(3, 1);
  // add an unlabeled stay and one whose truth lies outside any radius
  world.trajs[0].stays.push_back(
      testutil::make_stay(40.0001, -74.0, 500000.0, 500600.0));
  world.trajs[0].stays.push_back(
      testutil::make_stay(40.3, -74.3, 600000.0, 600600.0, "home"));

  const SpatialGridIndex index(world.catalog);
  const auto examples = build_examples(world.trajs, world.catalog, index, 300.0, 8);
  REQUIRE(examples.size() == 7);  // 6 labeled visits + 1 far labeled stay
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& ex = examples[i];
    REQUIRE(ex.true_slot >= 0);
    const Stay& s = ex.traj->stays[ex.stay_index];
    CHECK(ex.candidates.poi_ids[static_cast<std::size_t>(ex.true_slot)] == s.true_poi);
    CHECK(ex.candidates.count() == 2);  // home and work are 44 m apart
  }
  CHECK(examples.back().true_slot == -1);  // truth unreachable from 0.3 deg away
  CHECK(examples.back().candidates.empty());
}

TEST_CASE("one adaptive step matches the hand-derived update", "[train]") {
  ParamRegistry reg;
  Tensor& t = reg.add("w", 1, 2);
  t.value << 1.0, -2.0;
  t.grad << 0.5, -0.25;

  AdamW opt(reg, 0.1, 0.0);
  opt.step();
  // first step: m_hat = g, v_hat = g^2, so the update is lr * g/(|g|+eps)
  CHECK(t.value(0, 0) == Catch::Approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8))).margin(1e-12));
  CHECK(t.value(0, 1) ==
        Catch::Approx(-2.0 - 0.1 * (-0.25 / (0.25 + 1e-8))).margin(1e-12));

  // decoupled decay shrinks the value even with zero gradient
  ParamRegistry reg2;
  Tensor& t2 = reg2.add("w", 1, 1);
  t2.value << 4.0;
  t2.grad << 0.0;
  AdamW decay(reg2, 0.5, 0.1);
  decay.step();
  CHECK(t2.value(0, 0) == Catch::Approx(4.0 - 0.5 * 0.1 * 4.0).margin(1e-12));

  // zero learning rate freezes everything
  ParamRegistry reg3;
  Tensor& t3 = reg3.add("w", 1, 1);
  t3.value << 4.0;
  t3.grad << 123.0;
  AdamW frozen(reg3, 0.0, 0.01);
  frozen.step();
  CHECK(t3.value(0, 0) == 4.0);
}

TEST_CASE("training on hour-coded visits drives the loss down", "[train]") {
  SmallWorld world;
  ModelConfig mc = small_config();
  mc.kde_term = false;  // isolate the learned prior
  AttributionModel model(world.catalog.vocab, mc);
  model.init(5);
  const SpatialGridIndex index(world.catalog);

  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.batch_size = 8;
  cfg.learning_rate = 3e-3;
  cfg.weight_decay = 1e-3;
  cfg.jitter_sigma_deg = 1e-5;
  cfg.seed = 9;

  std::ostringstream log;
  const auto history = train(model, nullptr, world.trajs, world.catalog, index, cfg, &log);
  REQUIRE(history.size() == 12);
  CHECK(history.front().mean_loss > history.back().mean_loss);
  CHECK(history.back().mean_loss < 0.45);
  CHECK(history.back().train_top1 > 0.8);
  for (const auto& m : history) CHECK(m.skipped == 0);

  // the metrics stream is one self-contained JSON object per epoch
  std::istringstream lines(log.str());
  std::string line;
  int epoch = 0;
  while (std::getline(lines, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.at("epoch").get<int>() == epoch);
    CHECK(j.at("mean_loss").get<double>() ==
          Catch::Approx(history[static_cast<std::size_t>(epoch)].mean_loss));
    CHECK(j.contains("train_top1"));
    CHECK(j.contains("mean_raw_nll"));
    CHECK(j.contains("skipped"));
    ++epoch;
  }
  CHECK(epoch == 12);
}

TEST_CASE("training is bit-reproducible under the same seed", "[train]") {
  SmallWorld world(4, 2);
  ModelConfig mc = small_config();
  mc.kde_term = false;
  const SpatialGridIndex index(world.catalog);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 21;

  auto run = [&]() {
    AttributionModel model(world.catalog.vocab, mc);
    model.init(5);
    train(model, nullptr, world.trajs, world.catalog, index, cfg);
    return model;
  };
  AttributionModel a = run();
  AttributionModel b = run();
  REQUIRE(a.params().tensor_count() == b.params().tensor_count());
  for (std::size_t i = 0; i < a.params().tensor_count(); ++i)
    CHECK((a.params().tensor(i).value - b.params().tensor(i).value)
              .cwiseAbs()
              .maxCoeff() == 0.0);

  // a different seed takes a different path
  TrainConfig other = cfg;
  other.seed = 22;
  AttributionModel model_c(world.catalog.vocab, mc);
  model_c.init(5);
  train(model_c, nullptr, world.trajs, world.catalog, index, other);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.params().tensor_count(); ++i)
    diff = std::max(diff, (a.params().tensor(i).value - model_c.params().tensor(i).value)
                              .cwiseAbs()
                              .maxCoeff());
  CHECK(diff > 0.0);
}

TEST_CASE("zero epochs leave the parameters untouched", "[train]") {
  SmallWorld world(3, 2);
  ModelConfig mc = small_config();
  mc.kde_term = false;
  AttributionModel model(world.catalog.vocab, mc);
  model.init(5);
  std::vector<Eigen::MatrixXd> before;
  for (std::size_t i = 0; i < model.params().tensor_count(); ++i)
    before.push_back(model.params().tensor(i).value);

  const SpatialGridIndex index(world.catalog);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto history = train(model, nullptr, world.trajs, world.catalog, index, cfg);
  CHECK(history.empty());
  for (std::size_t i = 0; i < model.params().tensor_count(); ++i)
    CHECK((model.params().tensor(i).value - before[i]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("training without labeled examples is an error", "[train]") {
  SmallWorld world(2, 1);
  for (auto& s : world.trajs[0].stays) s.true_poi.clear();
  ModelConfig mc = small_config();
  mc.kde_term = false;
  AttributionModel model(world.catalog.vocab, mc);
  model.init(5);
  const SpatialGridIndex index(world.catalog);
  CHECK(kind_of([&] {
          train(model, nullptr, world.trajs, world.catalog, index, TrainConfig{});
        }) == ErrorKind::validation);
}

TEST_CASE("a poisoned parameter aborts training with a located diagnostic",
          "[train]") {
  SmallWorld world(3, 1);
  ModelConfig mc = small_config();
  mc.kde_term = false;
  AttributionModel model(world.catalog.vocab, mc);
  model.init(5);
  model.params().at("prior.b").value.setConstant(
      std::numeric_limits<double>::infinity());
  const SpatialGridIndex index(world.catalog);
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(model, nullptr, world.trajs, world.catalog, index, cfg);
    FAIL("expected non-finite abort");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::non_finite);
    CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
    CHECK(std::string(e.what()).find("u0") != std::string::npos);
  }
}

TEST_CASE("context windows center the target and clamp at the edges", "[train]") {
  SmallWorld world(10, 1);  // 20 stays
  ModelConfig mc = small_config();
  mc.context_window = 8;
  AttributionModel model(world.catalog.vocab, mc);
  const Trajectory& traj = world.trajs[0];

  auto [w0, l0] = model.window(traj, 0);
  CHECK(w0.stays.size() == 8);
  CHECK(l0 == 0);
  CHECK(w0.stays[0].arrival_epoch_s == traj.stays[0].arrival_epoch_s);

  auto [wmid, lmid] = model.window(traj, 10);
  CHECK(wmid.stays.size() == 8);
  CHECK(lmid == 4);
  CHECK(wmid.stays[lmid].arrival_epoch_s == traj.stays[10].arrival_epoch_s);

  auto [wend, lend] = model.window(traj, 19);
  CHECK(wend.stays.size() == 8);
  CHECK(lend == 7);
  CHECK(wend.stays[lend].arrival_epoch_s == traj.stays[19].arrival_epoch_s);

  CHECK_THROWS_AS(model.window(traj, 20), Error);

  // shorter trajectories come back whole
  Trajectory tiny;
  tiny.user_id = traj.user_id;
  tiny.stays.assign(traj.stays.begin(), traj.stays.begin() + 3);
  auto [wt, lt] = model.window(tiny, 2);
  CHECK(wt.stays.size() == 3);
  CHECK(lt == 2);
}

TEST_CASE("checkpoints round-trip parameters and predictions bit for bit",
          "[train]") {
  SmallWorld world;
  ModelConfig mc = small_config();
  mc.kde_term = false;
  mc.time_origin_epoch_s = 12345.0;
  mc.bank_path = "bank.pkde";
  AttributionModel model(world.catalog.vocab, mc);
  model.init(5);
  const SpatialGridIndex index(world.catalog);
  TrainConfig cfg;
  cfg.epochs = 2;
  train(model, nullptr, world.trajs, world.catalog, index, cfg);

  const std::string dir = testutil::scratch_dir("ckpt");
  const std::string path = dir + "/model.pfmr";
  model.save_checkpoint(path);
  AttributionModel loaded = AttributionModel::load_checkpoint(path, world.catalog.vocab);

  CHECK(loaded.config().time_origin_epoch_s == 12345.0);
  CHECK(loaded.config().bank_path == "bank.pkde");
  CHECK(loaded.config().context_window == mc.context_window);
  CHECK_FALSE(loaded.config().kde_term);
  REQUIRE(loaded.params().tensor_count() == model.params().tensor_count());
  for (std::size_t i = 0; i < model.params().tensor_count(); ++i) {
    CHECK(loaded.params().tensor(i).name == model.params().tensor(i).name);
    CHECK((loaded.params().tensor(i).value - model.params().tensor(i).value)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }

  // predictions agree exactly on probe windows
  AttributionModel::Forward fa, fb;
  for (std::size_t t = 0; t < 10; ++t) {
    model.forward(world.trajs[0], t, world.catalog, fa);
    loaded.forward(world.trajs[0], t, world.catalog, fb);
    CHECK((fa.log_prior - fb.log_prior).cwiseAbs().maxCoeff() == 0.0);
  }

  // saving the loaded model reproduces the file byte for byte
  const std::string again = dir + "/model2.pfmr";
  loaded.save_checkpoint(again);
  CHECK(read_bytes(path) == read_bytes(again));
}

TEST_CASE("checkpoint failure modes carry their own error kinds", "[train]") {
  SmallWorld world;
  ModelConfig mc = small_config();
  mc.kde_term = false;
  AttributionModel model(world.catalog.vocab, mc);
  model.init(5);
  const std::string dir = testutil::scratch_dir("ckpt_err");
  const std::string path = dir + "/model.pfmr";
  model.save_checkpoint(path);
  const std::string good = read_bytes(path);

  CHECK(kind_of([&] {
          AttributionModel::load_checkpoint(dir + "/none.pfmr", world.catalog.vocab);
        }) == ErrorKind::io);

  write_bytes(path, good.substr(0, good.size() - 16));
  CHECK(kind_of([&] {
          AttributionModel::load_checkpoint(path, world.catalog.vocab);
        }) == ErrorKind::corrupt);

  std::string bad_version = good;
  bad_version[4] = 0x42;
  bad_version[5] = 0x00;
  write_bytes(path, bad_version);
  CHECK(kind_of([&] {
          AttributionModel::load_checkpoint(path, world.catalog.vocab);
        }) == ErrorKind::version_mismatch);

  write_bytes(path, good);
  const CategoryVocab other = CategoryVocab::from_names({"library", "museum"});
  CHECK(kind_of([&] { AttributionModel::load_checkpoint(path, other); }) ==
        ErrorKind::vocab_mismatch);
  CHECK_NOTHROW(AttributionModel::load_checkpoint(path, world.catalog.vocab));
}

TEST_CASE("analytic gradients survive a stratified finite-difference audit",
          "[train]") {
  // small beats slow here: one layer, 24-dim model, short clock
  SmallWorld world(2, 2);  // 4-stay trajectories, epochs within 2 days
  ModelConfig mc = small_config();
  AttributionModel model(world.catalog.vocab, mc);
  model.init(5);
  const SpatialGridIndex index(world.catalog);
  const KdeBank bank = fit_kde_bank(world.trajs, world.catalog);

  GradCheckOptions opts;
  opts.step = 1e-4;
  opts.sample_fraction = 0.05;
  opts.min_per_group = 25;
  opts.seed = 3;
  const GradCheckReport report =
      gradient_check(model, &bank, world.trajs, world.catalog, index, opts);

  INFO("worst tensor: " << report.worst_tensor << " analytic "
                        << report.worst_analytic << " numeric "
                        << report.worst_numeric);
  CHECK(report.n_checked >= 100);
  CHECK(report.max_rel_err < 1e-3);
  REQUIRE(report.group_max.count("prior_head") == 1);
  REQUIRE(report.group_max.count("time2vec") == 1);
  REQUIRE(report.group_max.count("space2vec") == 1);
  REQUIRE(report.group_max.count("attention") == 1);
  REQUIRE(report.group_max.count("categories") == 1);
  // Near-zero gradients bottom out at finite-difference roundoff against the
  // denominator floor, so every group shares the one meaningful bound.
  for (const auto& [group, worst] : report.group_max) {
    INFO("group " << group);
    CHECK(worst < 1e-3);
  }
  CHECK(report.elapsed_s > 0.0);
}
