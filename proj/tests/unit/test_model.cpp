#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "dcrn/model/network.hpp"
#include "dcrn/sim/dataset.hpp"

using namespace dcrn;
using namespace dcrn::model;
using ad::Graph;
using ad::Tensor;

namespace {

sim::Dataset tiny_dataset(std::size_t n = 6, std::size_t len = 6) {
  sim::SimConfig c;
  c.n_patients = n;
  c.max_length = len;
  c.tau = 2;
  c.seed = 77;
  c.splits = {1.0, 0.0, 0.0};
  return sim::generate_dataset(c);
}

std::vector<const sim::Trajectory*> pointers(const sim::Dataset& ds) {
  std::vector<const sim::Trajectory*> out;
  for (const auto& t : ds.trajectories) out.push_back(&t);
  return out;
}

ModelConfig small_config(Architecture arch = Architecture::kDcrn) {
  ModelConfig c;
  c.arch = arch;
  c.repr_size = 5;
  c.rnn_hidden = 4;
  c.fc_hidden = 6;
  c.factor_dim = 3;
  c.dropout = 0.0;
  return c;
}

void zero_all(ad::ParameterStore& ps) {
  for (std::size_t i = 0; i < ps.size(); ++i) ps.value(i).fill(0.0);
}

std::vector<Tensor> constant_plan(std::size_t batch, const std::vector<int>& plan) {
  std::vector<Tensor> out;
  for (int a : plan) out.push_back(Tensor::matrix(batch, 1, a));
  return out;
}

}  // namespace

TEST_CASE("config validation and json round trip") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  CHECK(model_config_from_json(to_json(c)) == c);
  c.dropout = 0.5;
  CHECK_THROWS(c.validate());
  c = small_config();
  c.factor_dim = 0;
  CHECK_THROWS(c.validate());
  CHECK(architecture_from_string("hg-t") == Architecture::kHgt);
  CHECK_THROWS(architecture_from_string("crn"));
}

TEST_CASE("normalizer uses the train split only") {
  sim::Dataset ds = tiny_dataset(10, 5);
  Normalizer n = Normalizer::fit(ds);
  double sum = 0, count = 0;
  for (const auto* t : ds.split(sim::Split::kTrain))
    for (double y : t->outcomes) {
      sum += y;
      count += 1;
    }
  CHECK(n.y_mean == doctest::Approx(sum / count).epsilon(1e-14));
  CHECK(n.y_raw(n.y(0.37)) == doctest::Approx(0.37).epsilon(1e-14));
  CHECK(normalizer_from_json(to_json(n)) == n);
}

TEST_CASE("encoder output contract") {
  sim::Dataset ds = tiny_dataset();
  const auto ptrs = pointers(ds);
  const ModelConfig cfg = small_config();
  ad::ParameterStore ps;
  init_parameters(ps, cfg, 3);
  SequenceBatch batch = make_batch(ptrs, Normalizer::fit(ds));

  SUBCASE("T - 1 bundles per trajectory") {
    Graph g(&ps);
    EncoderOutputs out = encoder_forward(g, cfg, batch, false);
    CHECK(out.steps.size() == batch.steps - 1);
    for (const auto& s : out.steps) {
      CHECK(s.y_hat.rows() == ptrs.size());
      CHECK(s.i.cols() == cfg.factor_dim);
      for (double p : s.a_ic.value().values()) CHECK((p > 0.0 && p < 1.0));
    }
  }
  SUBCASE("zero parameters give one-half propensities") {
    zero_all(ps);
    Graph g(&ps);
    EncoderOutputs out = encoder_forward(g, cfg, batch, false);
    for (const auto& s : out.steps) {
      for (double p : s.a_ic.value().values()) CHECK(p == 0.5);
      for (double p : s.a_c.value().values()) CHECK(p == 0.5);
    }
  }
  SUBCASE("permuting patients permutes outputs") {
    std::vector<const sim::Trajectory*> rev(ptrs.rbegin(), ptrs.rend());
    const Normalizer norm = Normalizer::fit(ds);
    Graph g1(&ps), g2(&ps);
    EncoderOutputs a = encoder_forward(g1, cfg, make_batch(ptrs, norm), false);
    EncoderOutputs b = encoder_forward(g2, cfg, make_batch(rev, norm), false);
    const std::size_t n = ptrs.size();
    for (std::size_t t = 0; t < a.steps.size(); ++t)
      for (std::size_t r = 0; r < n; ++r) {
        CHECK(a.steps[t].y_hat.value()[r] == b.steps[t].y_hat.value()[n - 1 - r]);
        CHECK(a.steps[t].a_ic.value()[r] == b.steps[t].a_ic.value()[n - 1 - r]);
      }
  }
  SUBCASE("causality: future inputs do not change past outputs") {
    SequenceBatch perturbed = batch;
    const std::size_t t0 = 3;
    for (std::size_t s = t0 + 1; s < perturbed.steps; ++s) {
      for (double& v : perturbed.x[s].values()) v += 1.5;
      for (double& v : perturbed.y[s].values()) v -= 2.0;
    }
    for (double& v : perturbed.a[t0 + 1].values()) v = 1.0 - v;
    Graph g1(&ps), g2(&ps);
    EncoderOutputs a = encoder_forward(g1, cfg, batch, false);
    EncoderOutputs b = encoder_forward(g2, cfg, perturbed, false);
    for (std::size_t t = 0; t <= t0; ++t) CHECK(a.steps[t].y_hat.value() == b.steps[t].y_hat.value());
    CHECK(a.steps[t0 + 1].y_hat.value() != b.steps[t0 + 1].y_hat.value());
  }
  SUBCASE("x perturbation reaches every factor through the shared recurrence") {
    SequenceBatch perturbed = batch;
    for (double& v : perturbed.x[1].values()) v += 0.5;
    Graph g1(&ps), g2(&ps);
    EncoderOutputs a = encoder_forward(g1, cfg, batch, false);
    EncoderOutputs b = encoder_forward(g2, cfg, perturbed, false);
    CHECK(a.steps[2].i.value() != b.steps[2].i.value());
    CHECK(a.steps[2].c.value() != b.steps[2].c.value());
    CHECK(a.steps[2].o.value() != b.steps[2].o.value());
  }
  SUBCASE("length-one trajectories are rejected") {
    sim::Trajectory t = ds.trajectories[0];
    t.covariates.resize(t.dim);
    t.treatments.resize(1);
    t.outcomes.resize(1);
    Graph g(&ps);
    CHECK_THROWS(encoder_forward(g, cfg, make_batch({&t}, Normalizer::fit(ds)), false));
  }
  SUBCASE("dropout requires an rng and changes training outputs only") {
    ModelConfig dcfg = cfg;
    dcfg.dropout = 0.3;
    Graph g(&ps);
    CHECK_THROWS(encoder_forward(g, dcfg, batch, true));
    std::mt19937_64 rng(1);
    Graph g1(&ps), g2(&ps), g3(&ps);
    EncoderOutputs a = encoder_forward(g1, dcfg, batch, true, &rng);
    EncoderOutputs b = encoder_forward(g2, dcfg, batch, false);
    EncoderOutputs c = encoder_forward(g3, cfg, batch, false);
    CHECK(a.steps[1].y_hat.value() != b.steps[1].y_hat.value());
    CHECK(b.steps[1].y_hat.value() == c.steps[1].y_hat.value());
  }
}

TEST_CASE("variable-length batches keep per-trajectory outputs") {
  sim::Dataset ds = tiny_dataset(3, 8);
  sim::Trajectory shorter = ds.trajectories[1];
  shorter.covariates.resize(5 * shorter.dim);
  shorter.treatments.resize(5);
  shorter.outcomes.resize(5);
  const ModelConfig cfg = small_config();
  ad::ParameterStore ps;
  init_parameters(ps, cfg, 2);
  const Normalizer norm = Normalizer::fit(ds);
  Graph g1(&ps), g2(&ps);
  EncoderOutputs mixed = encoder_forward(g1, cfg, make_batch({&ds.trajectories[0], &shorter}, norm), false);
  EncoderOutputs alone = encoder_forward(g2, cfg, make_batch({&shorter}, norm), false);
  CHECK(alone.steps.size() == 4);
  for (std::size_t t = 0; t < 4; ++t) CHECK(mixed.steps[t].y_hat.value()[1] == alone.steps[t].y_hat.value()[0]);
}

TEST_CASE("decoder contract") {
  sim::Dataset ds = tiny_dataset(4, 10);
  const auto ptrs = pointers(ds);
  const ModelConfig cfg = small_config();
  ad::ParameterStore ps;
  init_parameters(ps, cfg, 5);
  SequenceBatch batch = make_batch(ptrs, Normalizer::fit(ds));
  HistoryStates hs = encode_history(cfg, ps, batch);
  REQUIRE(hs.latent.size() == batch.steps);
  DecoderStart start = decoder_start(hs, batch, {{0, 3}, {1, 4}, {2, 2}, {3, 6}});

  SUBCASE("history states match the encoder recurrence") {
    // Phi at the cut equals the latent output of a shorter encoder run.
    sim::Trajectory prefix = ds.trajectories[1];
    prefix.covariates.resize(5 * prefix.dim);
    prefix.treatments.resize(5);
    prefix.outcomes.resize(5);
    HistoryStates short_hs = encode_history(cfg, ps, make_batch({&prefix}, Normalizer::fit(ds)));
    for (std::size_t k = 0; k < cfg.repr_size; ++k) CHECK(short_hs.latent[4][0].at(0, k) == start.latent[0].at(1, k));
    CHECK(start.y_last[1] == batch.y[4][1]);
  }
  SUBCASE("tau = 1 teacher forcing equals autoregression") {
    Graph g1(&ps), g2(&ps);
    auto plan = constant_plan(4, {1});
    auto a = decoder_forward(g1, cfg, start, plan, 1, DecodeMode::kTeacherForced);
    auto b = decoder_forward(g2, cfg, start, plan, 1, DecodeMode::kAutoregressive);
    CHECK(a.steps[0].y_hat.value() == b.steps[0].y_hat.value());
  }
  SUBCASE("teacher forcing feeds observed outcomes") {
    Graph g1(&ps), g2(&ps);
    auto plan = constant_plan(4, {0, 1, 0});
    std::vector<Tensor> observed = {Tensor::matrix(4, 1, 0.3), Tensor::matrix(4, 1, -0.2)};
    auto a = decoder_forward(g1, cfg, start, plan, 3, DecodeMode::kTeacherForced, &observed);
    auto b = decoder_forward(g2, cfg, start, plan, 3, DecodeMode::kAutoregressive);
    CHECK(a.steps[0].y_hat.value() == b.steps[0].y_hat.value());
    CHECK(a.steps[1].y_hat.value() != b.steps[1].y_hat.value());
    Graph g3(&ps);
    CHECK_THROWS(decoder_forward(g3, cfg, start, plan, 3, DecodeMode::kTeacherForced));
  }
  SUBCASE("plan length must equal tau") {
    Graph g(&ps);
    CHECK_THROWS(decoder_forward(g, cfg, start, constant_plan(4, {1, 0}), 3, DecodeMode::kAutoregressive));
  }
  SUBCASE("plans differing at the last step share earlier forecasts") {
    Graph g1(&ps), g2(&ps);
    auto a = decoder_forward(g1, cfg, start, constant_plan(4, {1, 0, 1, 0}), 4, DecodeMode::kAutoregressive);
    auto b = decoder_forward(g2, cfg, start, constant_plan(4, {1, 0, 1, 1}), 4, DecodeMode::kAutoregressive);
    for (std::size_t u = 0; u < 3; ++u) CHECK(a.steps[u].y_hat.value() == b.steps[u].y_hat.value());
    CHECK(a.steps[3].y_hat.value() != b.steps[3].y_hat.value());
  }
  SUBCASE("decoder gradients never reach encoder parameters") {
    Graph g(&ps);
    auto out = decoder_forward(g, cfg, start, constant_plan(4, {1, 1}), 2, DecodeMode::kAutoregressive);
    g.backward(ad::sum(ad::square(out.steps[1].y_hat)));
    CHECK(ps.grad_norm_squared("enc.") == 0.0);
    CHECK(ps.grad_norm_squared("dec.") > 0.0);
  }
}

TEST_CASE("impulse response rollout") {
  sim::Dataset ds = tiny_dataset(3, 8);
  const ModelConfig cfg = small_config();
  ad::ParameterStore ps;
  init_parameters(ps, cfg, 8);
  SequenceBatch batch = make_batch(pointers(ds), Normalizer::fit(ds));
  DecoderStart start = decoder_start(encode_history(cfg, ps, batch), batch, {{0, 5}, {1, 5}, {2, 5}});

  ImpulseResponse all_on = impulse_response_rollout(cfg, ps, start, 0, 4, 0.0);
  ImpulseResponse all_off = impulse_response_rollout(cfg, ps, start, 1, 4, 1.0);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(all_on.treatments[r] == std::vector<int>{0, 1, 1, 1});
    CHECK(all_off.treatments[r] == std::vector<int>{1, 0, 0, 0});
  }

  SUBCASE("a constant 0.9 propensity head continues with treatment") {
    ad::ParameterStore fixed = ps;
    fixed.value("dec.head_aic.w2").fill(0.0);
    fixed.value("dec.head_aic.b2")[0] = std::log(0.9 / 0.1);
    ImpulseResponse r = impulse_response_rollout(cfg, fixed, start, 0, 5, 0.5);
    for (const auto& p : r.propensity[0]) CHECK(p == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(r.treatments[1] == std::vector<int>{0, 1, 1, 1, 1});
  }
  SUBCASE("rollout equals decoding the thresholded plan") {
    ImpulseResponse r = impulse_response_rollout(cfg, ps, start, 1, 4, 0.5);
    for (std::size_t row = 0; row < 3; ++row) {
      DecoderStart one = decoder_start(encode_history(cfg, ps, batch), batch, {{row, 5}});
      std::vector<Tensor> plan;
      for (int a : r.treatments[row]) plan.push_back(Tensor::matrix(1, 1, a));
      Graph g(&ps);
      auto out = decoder_forward(g, cfg, one, plan, 4, DecodeMode::kAutoregressive);
      for (std::size_t u = 0; u < 4; ++u) {
        CHECK(out.steps[u].y_hat.value()[0] == doctest::Approx(r.outcomes[row][u]).epsilon(1e-13));
        CHECK(out.steps[u].a_ic.value()[0] == doctest::Approx(r.propensity[row][u]).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("hg-t architecture") {
  const ModelConfig cfg = small_config(Architecture::kHgt);
  ad::ParameterStore ps;
  init_parameters(ps, cfg, 4);
  const auto& names = ps.names();
  auto has = [&](const std::string& n) { return std::find(names.begin(), names.end(), n) != names.end(); };
  CHECK_FALSE(has("enc.rnn_phi.wx"));
  CHECK(has("enc.rnn_i.wx"));
  CHECK(has("enc.rnn_c.wx"));
  CHECK(has("enc.rnn_o.wx"));
  CHECK(has("dec.rnn_c.wx"));
  ad::ParameterStore dcrn_ps;
  init_parameters(dcrn_ps, small_config(), 4);
  CHECK(ps.scalar_count() > dcrn_ps.scalar_count());

  sim::Dataset ds = tiny_dataset();
  SequenceBatch batch = make_batch(pointers(ds), Normalizer::fit(ds));
  {
    Graph g(&dcrn_ps);
    CHECK_THROWS(hgt_forward(g, small_config(), batch, false));
  }
  SUBCASE("factors are built by separate recurrences") {
    ad::ParameterStore other = ps;
    for (const char* leaf : {"wx", "wh", "b"})
      for (double& v : other.value(std::string("enc.rnn_c.") + leaf).values()) v += 0.3;
    Graph g1(&ps), g2(&other);
    EncoderOutputs a = hgt_forward(g1, cfg, batch, false);
    EncoderOutputs b = hgt_forward(g2, cfg, batch, false);
    for (std::size_t t = 0; t < a.steps.size(); ++t) {
      CHECK(a.steps[t].i.value() == b.steps[t].i.value());
      CHECK(a.steps[t].o.value() == b.steps[t].o.value());
    }
    CHECK(a.steps[2].c.value() != b.steps[2].c.value());
  }
  SUBCASE("zero parameters give one-half propensities") {
    zero_all(ps);
    Graph g(&ps);
    for (const auto& s : hgt_forward(g, cfg, batch, false).steps) {
      for (double p : s.a_ic.value().values()) CHECK(p == 0.5);
      for (double p : s.a_c.value().values()) CHECK(p == 0.5);
    }
  }
  SUBCASE("decoder runs with three latent inputs") {
    DecoderStart start = decoder_start(encode_history(cfg, ps, batch), batch, {{0, 2}, {1, 3}});
    CHECK(start.latent.size() == 3);
    Graph g(&ps);
    auto out = decoder_forward(g, cfg, start, constant_plan(2, {1, 0}), 2, DecodeMode::kAutoregressive);
    CHECK(out.steps.size() == 2);
  }
}

TEST_CASE("model checkpoint round trip") {
  sim::Dataset ds = tiny_dataset();
  DcrnModel m = DcrnModel::create(small_config(), Normalizer::fit(ds), ds.meta.treated_fraction, 21);
  const auto path = std::filesystem::temp_directory_path() / "dcrn_model_test.json";
  save_model(path, m);
  DcrnModel back = load_model(path);
  CHECK(back.config == m.config);
  CHECK(back.normalizer == m.normalizer);
  CHECK(back.treated_rate == m.treated_rate);
  CHECK(back.params.names() == m.params.names());
  for (std::size_t i = 0; i < m.params.size(); ++i) CHECK(back.params.value(i) == m.params.value(i));

  ModelConfig bigger = small_config();
  bigger.repr_size = 7;
  ad::Checkpoint ck = ad::load_checkpoint(path);
  ck.header["model"] = to_json(bigger);
  CHECK_THROWS(model_from_checkpoint(ck));
  std::filesystem::remove(path);

  DcrnModel again = DcrnModel::create(small_config(), Normalizer::fit(ds), ds.meta.treated_fraction, 21);
  for (std::size_t i = 0; i < m.params.size(); ++i) CHECK(again.params.value(i) == m.params.value(i));
}
