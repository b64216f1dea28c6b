#include "dcrn/model/network.hpp"

#include <cmath>
#include <stdexcept>

namespace dcrn::model {

using ad::Graph;
using ad::LstmState;
using ad::Tensor;
using ad::Var;

std::string to_string(Factor f) {
  switch (f) {
    case Factor::kI:
      return "I";
    case Factor::kC:
      return "C";
    case Factor::kO:
      return "O";
  }
  return "I";
}

std::string block_prefix(Block b) { return b == Block::kEncoder ? "enc." : "dec."; }

std::string param_name(Block b, const std::string& component, const std::string& leaf) {
  return block_prefix(b) + component + "." + leaf;
}

std::vector<std::string> latent_components(const ModelConfig& config) {
  if (config.arch == Architecture::kDcrn) return {"rnn_phi"};
  return {"rnn_i", "rnn_c", "rnn_o"};
}

std::string latent_component_for(const ModelConfig& config, Factor f) {
  if (config.arch == Architecture::kDcrn) return "rnn_phi";
  return f == Factor::kI ? "rnn_i" : (f == Factor::kC ? "rnn_c" : "rnn_o");
}

std::string factor_component(Factor f) {
  return f == Factor::kI ? "fac_i" : (f == Factor::kC ? "fac_c" : "fac_o");
}

std::size_t latent_input_dim(const ModelConfig& config, Block b) {
  return b == Block::kEncoder ? config.covariate_dim : config.repr_size;
}

namespace {

std::size_t latent_index(const ModelConfig& config, Factor f) {
  return config.arch == Architecture::kDcrn ? 0 : static_cast<std::size_t>(f);
}

void glorot(Tensor& w, std::size_t fan_in, std::size_t fan_out, std::size_t col_begin,
            std::size_t col_end, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = col_begin; c < col_end; ++c) w.at(r, c) = u(rng);
}

void add_lstm(ad::ParameterStore& ps, Block b, const std::string& comp, std::size_t in,
              std::size_t hidden, std::mt19937_64& rng) {
  Tensor wx = Tensor::matrix(in, 4 * hidden);
  Tensor wh = Tensor::matrix(hidden, 4 * hidden);
  for (std::size_t gate = 0; gate < 4; ++gate) {
    glorot(wx, in, hidden, gate * hidden, (gate + 1) * hidden, rng);
    glorot(wh, hidden, hidden, gate * hidden, (gate + 1) * hidden, rng);
  }
  Tensor bias = Tensor::matrix(1, 4 * hidden);
  for (std::size_t j = hidden; j < 2 * hidden; ++j) bias[j] = 1.0;
  ps.add(param_name(b, comp, "wx"), std::move(wx));
  ps.add(param_name(b, comp, "wh"), std::move(wh));
  ps.add(param_name(b, comp, "b"), std::move(bias));
}

void add_fc2(ad::ParameterStore& ps, Block b, const std::string& comp, std::size_t in,
             std::size_t hidden, std::size_t out, std::mt19937_64& rng) {
  Tensor w1 = Tensor::matrix(in, hidden);
  Tensor w2 = Tensor::matrix(hidden, out);
  glorot(w1, in, hidden, 0, hidden, rng);
  glorot(w2, hidden, out, 0, out, rng);
  ps.add(param_name(b, comp, "w1"), std::move(w1));
  ps.add(param_name(b, comp, "b1"), Tensor::matrix(1, hidden));
  ps.add(param_name(b, comp, "w2"), std::move(w2));
  ps.add(param_name(b, comp, "b2"), Tensor::matrix(1, out));
}

struct ParamSource {
  Graph& g;
  Block block;
  bool trainable;

  Var get(const std::string& comp, const std::string& leaf) const {
    const std::string n = param_name(block, comp, leaf);
    return trainable ? g.parameter(n) : g.frozen(n);
  }
};

LstmState lstm(const ParamSource& p, const std::string& comp, Var x, LstmState prev) {
  return ad::lstm_cell(x, prev, p.get(comp, "wx"), p.get(comp, "wh"), p.get(comp, "b"));
}

Var fc2(const ParamSource& p, const std::string& comp, Var x) {
  Var h = ad::relu(ad::add(ad::matmul(x, p.get(comp, "w1")), p.get(comp, "b1")));
  return ad::add(ad::matmul(h, p.get(comp, "w2")), p.get(comp, "b2"));
}

LstmState zero_state(Graph& g, std::size_t batch, std::size_t hidden) {
  return {g.constant(Tensor::matrix(batch, hidden)), g.constant(Tensor::matrix(batch, hidden))};
}

struct DropoutCtx {
  double rate;
  bool training;
  std::mt19937_64* rng;

  Var operator()(Var v) const {
    if (!training || rate <= 0.0) return v;
    if (!rng) throw std::invalid_argument("dropout during training requires an rng");
    return ad::dropout(v, rate, true, *rng);
  }
};

// Fills factors and both propensity heads from the latent outputs.
void factors_and_heads(const ParamSource& p, const ModelConfig& config, const DropoutCtx& drop,
                       StepOutputs& out) {
  std::vector<Var> dropped;
  for (const Var& l : out.latent) dropped.push_back(drop(l));
  out.i = fc2(p, "fac_i", dropped[latent_index(config, Factor::kI)]);
  out.c = fc2(p, "fac_c", dropped[latent_index(config, Factor::kC)]);
  out.o = fc2(p, "fac_o", dropped[latent_index(config, Factor::kO)]);
  out.a_ic = ad::sigmoid(fc2(p, "head_aic", ad::concat({out.i, out.c})));
  out.a_c = ad::sigmoid(fc2(p, "head_ac", out.c));
}

Var outcome_head(const ParamSource& p, const StepOutputs& out, Var h_y, Var h_a, Var a_t,
                 const Var* prev_y) {
  std::vector<Var> parts = {out.c, out.o, h_y, h_a, a_t};
  if (prev_y) parts.push_back(*prev_y);
  return fc2(p, "head_y", ad::concat(parts));
}

void check_batch(const ModelConfig& config, const SequenceBatch& batch) {
  if (batch.steps == 0 || batch.x.size() != batch.steps) throw std::invalid_argument("encoder: empty batch");
  if (batch.x.front().cols() != config.covariate_dim) {
    throw ad::ShapeError("encoder: covariate width " + std::to_string(batch.x.front().cols()) +
                         " does not match model covariate_dim " + std::to_string(config.covariate_dim));
  }
}

// Runs the encoder recurrences for `n_steps` steps. Head outputs are built
// when `outs` is given; plain state tensors are recorded when `states` is.
void run_encoder(Graph& g, const ModelConfig& config, const SequenceBatch& batch, std::size_t n_steps,
                 bool training, std::mt19937_64* rng, bool trainable, EncoderOutputs* outs,
                 HistoryStates* states) {
  check_batch(config, batch);
  const ParamSource p{g, Block::kEncoder, trainable};
  const DropoutCtx drop{config.dropout, training, rng};
  const auto comps = latent_components(config);
  const std::size_t b = batch.batch;
  std::vector<LstmState> lat(comps.size(), zero_state(g, b, config.repr_size));
  LstmState sa = zero_state(g, b, config.rnn_hidden);
  LstmState sy = zero_state(g, b, config.rnn_hidden);
  const Var no_treatment = g.constant(Tensor::matrix(b, 1));

  for (std::size_t t = 0; t < n_steps; ++t) {
    const Var x = g.constant(batch.x[t]);
    for (std::size_t k = 0; k < comps.size(); ++k) lat[k] = lstm(p, comps[k], x, lat[k]);
    sa = lstm(p, "rnn_a", t == 0 ? no_treatment : g.constant(batch.a[t - 1]), sa);
    sy = lstm(p, "rnn_y", g.constant(batch.y[t]), sy);

    if (states) {
      std::vector<Tensor> l;
      for (const auto& s : lat) l.push_back(s.h.value());
      states->latent.push_back(std::move(l));
      states->a_h.push_back(sa.h.value());
      states->a_c.push_back(sa.c.value());
      states->y_h.push_back(sy.h.value());
      states->y_c.push_back(sy.c.value());
    }
    if (outs) {
      StepOutputs o;
      for (const auto& s : lat) o.latent.push_back(s.h);
      factors_and_heads(p, config, drop, o);
      o.y_hat = outcome_head(p, o, drop(sy.h), drop(sa.h), g.constant(batch.a[t]), nullptr);
      outs->steps.push_back(std::move(o));
    }
  }
}

}  // namespace

void init_parameters(ad::ParameterStore& params, const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t f = config.factor_dim, h = config.rnn_hidden, fc = config.fc_hidden;
  for (Block b : {Block::kEncoder, Block::kDecoder}) {
    for (const auto& comp : latent_components(config))
      add_lstm(params, b, comp, latent_input_dim(config, b), config.repr_size, rng);
    add_lstm(params, b, "rnn_a", 1, h, rng);
    add_lstm(params, b, "rnn_y", 1, h, rng);
    for (Factor fac : kFactors) add_fc2(params, b, factor_component(fac), config.repr_size, fc, f, rng);
    add_fc2(params, b, "head_aic", 2 * f, fc, 1, rng);
    add_fc2(params, b, "head_ac", f, fc, 1, rng);
    add_fc2(params, b, "head_y", 2 * f + 2 * h + (b == Block::kDecoder ? 2 : 1), fc, 1, rng);
  }
}

SequenceBatch make_batch(const std::vector<const sim::Trajectory*>& trajectories,
                         const Normalizer& norm) {
  if (trajectories.empty()) throw std::invalid_argument("make_batch: no trajectories");
  SequenceBatch b;
  b.batch = trajectories.size();
  const std::size_t d = trajectories.front()->dim;
  if (norm.x_mean.size() != d) {
    throw std::invalid_argument("make_batch: normalizer width " + std::to_string(norm.x_mean.size()) +
                                " does not match covariate width " + std::to_string(d));
  }
  for (const auto* t : trajectories) {
    if (t->dim != d) throw std::invalid_argument("make_batch: mixed covariate widths");
    b.steps = std::max(b.steps, t->length());
    b.lengths.push_back(t->length());
  }
  for (std::size_t s = 0; s < b.steps; ++s) {
    Tensor x = Tensor::matrix(b.batch, d);
    Tensor a = Tensor::matrix(b.batch, 1);
    Tensor y = Tensor::matrix(b.batch, 1);
    for (std::size_t r = 0; r < b.batch; ++r) {
      const auto* t = trajectories[r];
      if (s >= t->length()) continue;
      for (std::size_t k = 0; k < d; ++k) x.at(r, k) = norm.x(k, t->x(s, k));
      a[r] = t->treatments[s];
      y[r] = norm.y(t->outcomes[s]);
    }
    b.x.push_back(std::move(x));
    b.a.push_back(std::move(a));
    b.y.push_back(std::move(y));
  }
  return b;
}

EncoderOutputs encoder_forward(Graph& g, const ModelConfig& config, const SequenceBatch& batch,
                               bool training, std::mt19937_64* rng, bool trainable) {
  if (batch.steps < 2) throw std::invalid_argument("encoder: trajectories need at least 2 steps");
  EncoderOutputs out;
  run_encoder(g, config, batch, batch.steps - 1, training, rng, trainable, &out, nullptr);
  return out;
}

EncoderOutputs hgt_forward(Graph& g, const ModelConfig& config, const SequenceBatch& batch,
                           bool training, std::mt19937_64* rng, bool trainable) {
  if (config.arch != Architecture::kHgt) throw std::invalid_argument("hgt_forward: model is not hg-t");
  return encoder_forward(g, config, batch, training, rng, trainable);
}

HistoryStates encode_history(const ModelConfig& config, const ad::ParameterStore& params,
                             const SequenceBatch& batch) {
  Graph g(const_cast<ad::ParameterStore*>(&params), /*grad_enabled=*/false);
  HistoryStates states;
  run_encoder(g, config, batch, batch.steps, false, nullptr, false, nullptr, &states);
  return states;
}

DecoderStart decoder_start(const HistoryStates& states, const SequenceBatch& batch,
                           const std::vector<std::pair<std::size_t, std::size_t>>& row_cuts) {
  if (row_cuts.empty()) throw std::invalid_argument("decoder_start: no cut points");
  DecoderStart s;
  s.batch = row_cuts.size();
  auto gather = [&](const std::vector<Tensor>& per_step, Tensor& dst) {
    const std::size_t w = per_step.front().cols();
    dst = Tensor::matrix(s.batch, w);
    for (std::size_t k = 0; k < row_cuts.size(); ++k) {
      const auto [row, cut] = row_cuts[k];
      const Tensor& src = per_step.at(cut);
      std::copy(src.data() + row * w, src.data() + (row + 1) * w, dst.data() + k * w);
    }
  };
  for (const auto& [row, cut] : row_cuts) {
    if (row >= batch.batch || !batch.valid(row, cut)) {
      throw std::invalid_argument("decoder_start: cut " + std::to_string(cut) + " outside trajectory " +
                                  std::to_string(row));
    }
  }
  const std::size_t n_comp = states.latent.front().size();
  s.latent.resize(n_comp);
  for (std::size_t k = 0; k < n_comp; ++k) {
    std::vector<Tensor> per_step;
    for (const auto& l : states.latent) per_step.push_back(l[k]);
    gather(per_step, s.latent[k]);
  }
  gather(states.a_h, s.a_h);
  gather(states.a_c, s.a_c);
  gather(states.y_h, s.y_h);
  gather(states.y_c, s.y_c);
  gather(batch.y, s.y_last);
  return s;
}

namespace {

struct DecoderCarry {
  std::vector<LstmState> latent;
  std::vector<Var> latent_in;
  LstmState a;
  LstmState y;
  Var y_prev;
};

DecoderCarry start_carry(Graph& g, const ModelConfig& config, const DecoderStart& start) {
  const auto comps = latent_components(config);
  if (start.latent.size() != comps.size()) throw std::invalid_argument("decoder: latent component mismatch");
  DecoderCarry c;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    c.latent.push_back(zero_state(g, start.batch, config.repr_size));
    c.latent_in.push_back(g.constant(start.latent[k]));
  }
  c.a = {g.constant(start.a_h), g.constant(start.a_c)};
  c.y = {g.constant(start.y_h), g.constant(start.y_c)};
  c.y_prev = g.constant(start.y_last);
  return c;
}

// Advances the recurrences for step u and computes factors and propensity
// heads. `prev_a` is A_{cut+u-1} and is ignored at u = 0.
StepOutputs advance(const ParamSource& p, const ModelConfig& config, const DropoutCtx& drop,
                    DecoderCarry& carry, std::size_t u, const Tensor* prev_a) {
  const auto comps = latent_components(config);
  if (u > 0) {
    carry.a = lstm(p, "rnn_a", p.g.constant(*prev_a), carry.a);
    carry.y = lstm(p, "rnn_y", carry.y_prev, carry.y);
  }
  StepOutputs o;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    carry.latent[k] = lstm(p, comps[k], carry.latent_in[k], carry.latent[k]);
    carry.latent_in[k] = carry.latent[k].h;
    o.latent.push_back(carry.latent[k].h);
  }
  factors_and_heads(p, config, drop, o);
  return o;
}

}  // namespace

DecoderOutputs decoder_forward(Graph& g, const ModelConfig& config, const DecoderStart& start,
                               const std::vector<Tensor>& plan, std::size_t tau, DecodeMode mode,
                               const std::vector<Tensor>* observed, bool training, std::mt19937_64* rng,
                               bool trainable) {
  if (plan.size() != tau) {
    throw std::invalid_argument("decoder: plan length " + std::to_string(plan.size()) +
                                " does not match tau " + std::to_string(tau));
  }
  if (tau == 0) throw std::invalid_argument("decoder: tau must be positive");
  if (mode == DecodeMode::kTeacherForced && tau > 1 && (!observed || observed->size() + 1 < tau)) {
    throw std::invalid_argument("decoder: teacher forcing needs tau-1 observed outcomes");
  }
  const ParamSource p{g, Block::kDecoder, trainable};
  const DropoutCtx drop{config.dropout, training, rng};
  DecoderCarry carry = start_carry(g, config, start);
  DecoderOutputs out;
  for (std::size_t u = 0; u < tau; ++u) {
    if (plan[u].rows() != start.batch) throw ad::ShapeError("decoder: plan rows do not match batch");
    StepOutputs o = advance(p, config, drop, carry, u, u > 0 ? &plan[u - 1] : nullptr);
    o.y_hat = outcome_head(p, o, drop(carry.y.h), drop(carry.a.h), g.constant(plan[u]), &carry.y_prev);
    carry.y_prev = mode == DecodeMode::kTeacherForced && u + 1 < tau ? g.constant((*observed)[u]) : o.y_hat;
    out.steps.push_back(std::move(o));
  }
  return out;
}

ImpulseResponse impulse_response_rollout(const ModelConfig& config, const ad::ParameterStore& params,
                                         const DecoderStart& start, int first_treatment, std::size_t tau,
                                         double threshold) {
  if (first_treatment != 0 && first_treatment != 1) throw std::invalid_argument("impulse: treatment must be 0 or 1");
  Graph g(const_cast<ad::ParameterStore*>(&params), /*grad_enabled=*/false);
  const ParamSource p{g, Block::kDecoder, false};
  const DropoutCtx drop{0.0, false, nullptr};
  DecoderCarry carry = start_carry(g, config, start);
  const std::size_t b = start.batch;
  ImpulseResponse res;
  res.treatments.assign(b, {});
  res.propensity.assign(b, {});
  res.outcomes.assign(b, {});
  Tensor prev_a;
  for (std::size_t u = 0; u < tau; ++u) {
    StepOutputs o = advance(p, config, drop, carry, u, u > 0 ? &prev_a : nullptr);
    Tensor a = Tensor::matrix(b, 1);
    for (std::size_t r = 0; r < b; ++r) {
      const double prob = o.a_ic.value()[r];
      a[r] = u == 0 ? first_treatment : (prob > threshold ? 1.0 : 0.0);
      res.propensity[r].push_back(prob);
      res.treatments[r].push_back(static_cast<int>(a[r]));
    }
    o.y_hat = outcome_head(p, o, carry.y.h, carry.a.h, g.constant(a), &carry.y_prev);
    for (std::size_t r = 0; r < b; ++r) res.outcomes[r].push_back(o.y_hat.value()[r]);
    carry.y_prev = o.y_hat;
    prev_a = std::move(a);
  }
  return res;
}

DcrnModel DcrnModel::create(const ModelConfig& config, const Normalizer& norm, double treated_rate,
                            std::uint64_t seed) {
  config.validate();
  if (norm.x_mean.size() != config.covariate_dim) {
    throw std::invalid_argument("model: normalizer width does not match covariate_dim");
  }
  DcrnModel m;
  m.config = config;
  m.normalizer = norm;
  m.treated_rate = treated_rate;
  init_parameters(m.params, config, seed);
  return m;
}

nlohmann::ordered_json DcrnModel::header() const {
  return {{"kind", "dcrn-model"},
          {"model", to_json(config)},
          {"normalizer", to_json(normalizer)},
          {"treated_rate", treated_rate}};
}

void save_model(const std::filesystem::path& path, const DcrnModel& model) {
  ad::save_checkpoint(path, model.params, model.header());
}

DcrnModel model_from_checkpoint(const ad::Checkpoint& ckpt) {
  const auto& h = ckpt.header;
  if (!h.contains("kind") || h.at("kind") != "dcrn-model") {
    throw std::invalid_argument("checkpoint does not hold a dcrn model");
  }
  DcrnModel m;
  m.config = model_config_from_json(h.at("model"));
  m.normalizer = normalizer_from_json(h.at("normalizer"));
  m.treated_rate = h.at("treated_rate").get<double>();
  ad::ParameterStore reference;
  init_parameters(reference, m.config, 0);
  if (reference.names() != ckpt.params.names()) {
    throw std::invalid_argument("checkpoint parameters do not match the model config");
  }
  for (std::size_t i = 0; i < reference.size(); ++i) {
    if (!reference.value(i).same_shape(ckpt.params.value(i))) {
      throw std::invalid_argument("checkpoint parameter '" + reference.name(i) + "' has the wrong shape");
    }
  }
  m.params = ckpt.params;
  return m;
}

DcrnModel load_model(const std::filesystem::path& path) { return model_from_checkpoint(ad::load_checkpoint(path)); }

}  // namespace dcrn::model
