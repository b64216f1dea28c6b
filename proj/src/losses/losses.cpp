#include "dcrn/losses/losses.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace dcrn::loss {

using ad::Graph;
using ad::Tensor;
using ad::Var;
using model::Block;
using model::Factor;

void LossWeights::validate() const {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0) {
      throw std::invalid_argument(std::string("train.") + name + " must be a finite value >= 0");
    }
  };
  check(alpha, "alpha");
  check(beta, "beta");
  check(gamma, "gamma");
  check(l2, "l2");
}

double propensity_weight(int a, double a_c, double p_hat) {
  if (!(p_hat > 0.0 && p_hat < 1.0)) {
    throw std::invalid_argument("propensity_weight: marginal treated rate must lie in (0, 1), got " +
                                std::to_string(p_hat));
  }
  const double q = std::clamp(a_c, kPropensityFloor, kPropensityCeil);
  if (a == 1) return 1.0 + (p_hat / (1.0 - p_hat)) * ((1.0 - q) / q);
  return 1.0 + ((1.0 - p_hat) / p_hat) * (q / (1.0 - q));
}

Tensor propensity_weights(const Tensor& labels, const Tensor& a_c, double p_hat) {
  if (labels.size() != a_c.size()) throw ad::ShapeError("propensity_weights: length mismatch");
  Tensor w = Tensor::matrix(labels.size(), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) w[i] = propensity_weight(labels[i] > 0.5 ? 1 : 0, a_c[i], p_hat);
  return w;
}

Var loss_factual(Var y_hat, Var y, const Tensor& omega) {
  if (y_hat.value().size() == 0) throw std::invalid_argument("loss_factual: empty batch");
  if (y_hat.rows() != y.rows() || y_hat.cols() != y.cols() || omega.rows() != y_hat.rows()) {
    throw ad::ShapeError("loss_factual: prediction " + ad::to_string(y_hat.value().shape()) + ", target " +
                         ad::to_string(y.value().shape()) + ", weights " + ad::to_string(omega.shape()));
  }
  Graph& g = *y_hat.graph;
  return ad::mean(ad::mul(ad::square(ad::sub(y, y_hat)), g.constant(omega)));
}

namespace {

double squared_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t k = a.cols();
  double acc = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    const double d = a[i * k + c] - b[j * k + c];
    acc += d * d;
  }
  return acc;
}

double kernel_mean_value(const Tensor& x, const Tensor& y, double inv_two_bw2) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < y.rows(); ++j) acc += std::exp(-squared_distance(x, i, y, j) * inv_two_bw2);
  return acc / static_cast<double>(x.rows() * y.rows());
}

Var kernel_mean(Var x, Var y, double inv_two_bw2) {
  const double k = static_cast<double>(x.cols());
  Var sqx = ad::scale(ad::mean_cols(ad::square(x)), k);
  Var sqy = ad::transpose(ad::scale(ad::mean_cols(ad::square(y)), k));
  Var d = ad::add(ad::add(ad::scale(ad::matmul(x, ad::transpose(y)), -2.0), sqx), sqy);
  return ad::mean(ad::exp(ad::scale(d, -inv_two_bw2)));
}

}  // namespace

double mmd_bandwidth(const Tensor& a, const Tensor& b) {
  std::vector<const Tensor*> src;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    src.push_back(&a);
    idx.push_back(i);
  }
  for (std::size_t i = 0; i < b.rows(); ++i) {
    src.push_back(&b);
    idx.push_back(i);
  }
  std::vector<double> dist;
  for (std::size_t i = 0; i < src.size(); ++i)
    for (std::size_t j = i + 1; j < src.size(); ++j)
      dist.push_back(std::sqrt(squared_distance(*src[i], idx[i], *src[j], idx[j])));
  if (dist.empty()) return 1.0;
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  double median = dist[mid];
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (median + lower);
  }
  return median > 0.0 ? median : 1.0;
}

Var mmd(Var a, Var b, double bandwidth) {
  if (!(bandwidth > 0.0)) throw std::invalid_argument("mmd: bandwidth must be positive");
  if (a.cols() != b.cols()) throw ad::ShapeError("mmd: samples have different widths");
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  Var kaa = kernel_mean(a, a, inv);
  Var kbb = kernel_mean(b, b, inv);
  Var kab = kernel_mean(a, b, inv);
  return ad::sub(ad::add(kaa, kbb), ad::scale(kab, 2.0));
}

double mmd_value(const Tensor& a, const Tensor& b, double bandwidth) {
  if (a.rows() == 0 || b.rows() == 0 || a.size() == 0 || b.size() == 0) return 0.0;
  if (a.cols() != b.cols()) throw ad::ShapeError("mmd: samples have different widths");
  const double bw = bandwidth > 0.0 ? bandwidth : mmd_bandwidth(a, b);
  const double inv = 1.0 / (2.0 * bw * bw);
  return kernel_mean_value(a, a, inv) + kernel_mean_value(b, b, inv) - 2.0 * kernel_mean_value(a, b, inv);
}

Var loss_ce(Var prob, Var labels) {
  if (prob.rows() != labels.rows() || prob.cols() != labels.cols()) {
    throw ad::ShapeError("loss_ce: probability and label shapes differ");
  }
  Graph& g = *prob.graph;
  Var p = ad::clamp(prob, kProbabilityClamp, 1.0 - kProbabilityClamp);
  Var q = ad::add_scalar(ad::scale(p, -1.0), 1.0);
  Tensor neg = labels.value();
  for (double& v : neg.values()) v = 1.0 - v;
  Var ll = ad::add(ad::mul(ad::log(p), labels), ad::mul(ad::log(q), g.constant(neg)));
  return ad::scale(ad::mean(ll), -1.0);
}

Var influence_chain(const std::vector<Var>& weights) {
  if (weights.empty()) throw std::invalid_argument("influence_chain: empty chain");
  Var m = ad::abs(weights.front());
  for (std::size_t k = 1; k < weights.size(); ++k) {
    if (m.cols() != weights[k].rows()) {
      throw ad::ShapeError("influence_chain: link " + std::to_string(k) + " expects " +
                           std::to_string(m.cols()) + " rows, got " + ad::to_string(weights[k].value().shape()));
    }
    m = ad::matmul(m, ad::abs(weights[k]));
  }
  return ad::transpose(ad::mean_cols(m));
}

Var influence_var(Graph& g, const model::ModelConfig& config, Block block, Factor f, InfluenceSource source,
                  bool trainable) {
  auto get = [&](const std::string& comp, const std::string& leaf) {
    const std::string n = model::param_name(block, comp, leaf);
    return trainable ? g.parameter(n) : g.frozen(n);
  };
  const std::string fac = model::factor_component(f);
  std::vector<Var> chain;
  if (source == InfluenceSource::kCovariates) {
    if (block != Block::kEncoder) throw std::invalid_argument("influence: covariate source exists only in the encoder");
    Var wx = get(model::latent_component_for(config, f), "wx");
    const std::size_t h = config.repr_size;
    // Gate blocks are made absolute individually and summed.
    Var gates = ad::abs(ad::slice_cols(wx, 0, h));
    for (std::size_t k = 1; k < 4; ++k) gates = ad::add(gates, ad::abs(ad::slice_cols(wx, k * h, (k + 1) * h)));
    chain.push_back(gates);
  }
  chain.push_back(get(fac, "w1"));
  chain.push_back(get(fac, "w2"));
  return influence_chain(chain);
}

Tensor influence_vector(const ad::ParameterStore& params, const model::ModelConfig& config, Block block, Factor f,
                        InfluenceSource source) {
  Graph g(const_cast<ad::ParameterStore*>(&params), /*grad_enabled=*/false);
  return influence_var(g, config, block, f, source, false).value();
}

Var loss_orthogonal(Var w_i, Var w_c, Var w_o) {
  if (w_i.value().size() != w_c.value().size() || w_i.value().size() != w_o.value().size()) {
    throw ad::ShapeError("loss_orthogonal: influence vectors differ in length");
  }
  return ad::add(ad::add(ad::sum(ad::mul(w_i, w_c)), ad::sum(ad::mul(w_i, w_o))), ad::sum(ad::mul(w_o, w_c)));
}

Var total_loss(const LossComponents& parts, const LossWeights& weights) {
  const std::pair<const char*, Var> named[] = {
      {"L_Y", parts.l_y}, {"L_D", parts.l_d}, {"L_C", parts.l_c}, {"L_O", parts.l_o}, {"L2", parts.reg}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v.value().item())) throw std::runtime_error(std::string("non-finite loss component ") + name);
  }
  Var total = parts.l_y;
  total = ad::add(total, ad::scale(parts.l_d, weights.alpha));
  total = ad::add(total, ad::scale(parts.l_c, weights.beta));
  total = ad::add(total, ad::scale(parts.l_o, weights.gamma));
  total = ad::add(total, ad::scale(parts.reg, weights.l2));
  return total;
}

BlockLoss block_loss(Graph& g, const model::ModelConfig& config, Block block,
                     const std::vector<model::StepOutputs>& steps, const std::vector<StepTargets>& targets,
                     double treated_rate, const BlockLossOptions& options, bool trainable) {
  if (steps.size() != targets.size()) throw std::invalid_argument("block_loss: steps and targets differ in count");
  std::vector<Var> yh, yt, pic, pc, lab;
  std::vector<std::pair<Var, const StepTargets*>> per_step_o;
  for (std::size_t s = 0; s < steps.size(); ++s) {
    const auto& st = steps[s];
    const auto& tg = targets[s];
    if (tg.rows.empty()) continue;
    const bool all = tg.rows.size() == st.y_hat.rows();
    auto pick = [&](Var v) { return all ? v : ad::gather_rows(v, tg.rows); };
    auto pick_t = [&](const Tensor& t) {
      if (all) return t;
      Tensor out = Tensor::matrix(tg.rows.size(), t.cols());
      for (std::size_t k = 0; k < tg.rows.size(); ++k)
        for (std::size_t c = 0; c < t.cols(); ++c) out.at(k, c) = t.at(tg.rows[k], c);
      return out;
    };
    yh.push_back(pick(st.y_hat));
    yt.push_back(g.constant(pick_t(tg.y_next)));
    pic.push_back(pick(st.a_ic));
    pc.push_back(pick(st.a_c));
    lab.push_back(g.constant(pick_t(tg.a)));
    per_step_o.emplace_back(pick(st.o), &tg);
  }
  if (yh.empty()) throw std::invalid_argument("block_loss: no valid samples");

  Var y_hat = ad::concat_rows(yh);
  Var y = ad::concat_rows(yt);
  Var p_ic = ad::concat_rows(pic);
  Var p_c = ad::concat_rows(pc);
  Var labels = ad::concat_rows(lab);

  BlockLoss out;
  out.samples = y_hat.rows();
  Tensor omega;
  if (options.frozen) {
    omega = options.frozen->omega;
  } else if (options.unit_weights) {
    omega = Tensor::matrix(out.samples, 1, 1.0);
  } else {
    omega = propensity_weights(labels.value(), p_c.value(), treated_rate);
  }
  if (options.record) options.record->omega = omega;
  out.parts.l_y = loss_factual(y_hat, y, omega);
  out.parts.l_c = ad::add(loss_ce(p_ic, labels), loss_ce(p_c, labels));

  // Outcome-factor balance between treated and untreated rows, per step.
  std::vector<Var> mmds;
  std::size_t bw_index = 0;
  for (std::size_t s = 0; s < per_step_o.size(); ++s) {
    const auto& [o, tg] = per_step_o[s];
    std::vector<std::size_t> treated, control;
    for (std::size_t k = 0; k < o.rows(); ++k) {
      const std::size_t row = tg->rows.size() == tg->a.rows() ? k : tg->rows[k];
      (tg->a[row] > 0.5 ? treated : control).push_back(k);
    }
    if (treated.empty() || control.empty()) continue;
    Var ot = ad::gather_rows(o, treated);
    Var oc = ad::gather_rows(o, control);
    double bw;
    if (options.frozen) {
      bw = options.frozen->bandwidths.at(bw_index);
    } else {
      bw = mmd_bandwidth(ot.value(), oc.value());
    }
    ++bw_index;
    if (options.record) options.record->bandwidths.push_back(bw);
    mmds.push_back(mmd(ot, oc, bw));
  }
  if (mmds.empty()) {
    out.parts.l_d = g.constant(Tensor::scalar(0.0));
  } else {
    Var acc = mmds.front();
    for (std::size_t k = 1; k < mmds.size(); ++k) acc = ad::add(acc, mmds[k]);
    out.parts.l_d = ad::scale(acc, 1.0 / static_cast<double>(mmds.size()));
  }

  const auto source = block == Block::kEncoder ? InfluenceSource::kCovariates : InfluenceSource::kRepresentation;
  out.parts.l_o = loss_orthogonal(influence_var(g, config, block, Factor::kI, source, trainable),
                                  influence_var(g, config, block, Factor::kC, source, trainable),
                                  influence_var(g, config, block, Factor::kO, source, trainable));

  const std::string prefix = model::block_prefix(block);
  Var reg = g.constant(Tensor::scalar(0.0));
  ad::ParameterStore* store = g.store();
  if (!store) throw std::logic_error("block_loss: graph has no parameter store");
  for (const auto& name : store->names()) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    reg = ad::add(reg, ad::sum(ad::square(trainable ? g.parameter(name) : g.frozen(name))));
  }
  out.parts.reg = reg;
  out.total = total_loss(out.parts, options.weights);
  return out;
}

std::vector<StepTargets> encoder_targets(const model::SequenceBatch& batch) {
  std::vector<StepTargets> out;
  for (std::size_t t = 0; t + 1 < batch.steps; ++t) {
    StepTargets tg;
    tg.y_next = batch.y[t + 1];
    tg.a = batch.a[t];
    for (std::size_t r = 0; r < batch.batch; ++r)
      if (t + 1 < batch.lengths[r]) tg.rows.push_back(r);
    out.push_back(std::move(tg));
  }
  return out;
}

InfluenceTable influence_table(const ad::ParameterStore& params, const model::ModelConfig& config,
                               const std::vector<std::string>& covariate_names) {
  if (covariate_names.size() != config.covariate_dim) {
    throw std::invalid_argument("influence_table: expected " + std::to_string(config.covariate_dim) +
                                " covariate names");
  }
  InfluenceTable t;
  t.names = covariate_names;
  std::array<Tensor, 3> vec;
  for (std::size_t k = 0; k < 3; ++k)
    vec[k] = influence_vector(params, config, Block::kEncoder, model::kFactors[k], InfluenceSource::kCovariates);
  for (std::size_t d = 0; d < covariate_names.size(); ++d) {
    std::array<double, 3> raw{vec[0][d], vec[1][d], vec[2][d]};
    const double total = raw[0] + raw[1] + raw[2];
    std::array<double, 3> share{};
    for (std::size_t k = 0; k < 3; ++k) share[k] = total > 0.0 ? raw[k] / total : 1.0 / 3.0;
    t.raw.push_back(raw);
    t.normalized.push_back(share);
  }
  return t;
}

void write_influence_csv(const std::filesystem::path& path, const InfluenceTable& table,
                         const std::vector<std::string>& comment) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  for (const auto& line : comment) out << "# " << line << '\n';
  out << "covariate,I,C,O,I_share,C_share,O_share\n";
  for (std::size_t d = 0; d < table.names.size(); ++d) {
    out << table.names[d];
    for (double v : table.raw[d]) out << ',' << v;
    for (double v : table.normalized[d]) out << ',' << v;
    out << '\n';
  }
}

}  // namespace dcrn::loss
