#include "dcrn/training/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

#include "dcrn/autodiff/adam.hpp"
#include "dcrn/autodiff/checkpoint.hpp"

namespace dcrn::train {

using ad::Graph;
using ad::Tensor;
using model::Block;
using model::DcrnModel;
using RowCut = std::pair<std::size_t, std::size_t>;

namespace {

// Stream tags for make_stream; distinct from the simulator's.
constexpr std::uint64_t kEncoderStream = 101;
constexpr std::uint64_t kDecoderStream = 102;
constexpr std::uint64_t kTrialSeedStream = 201;
constexpr std::uint64_t kTrialSampleStream = 202;

constexpr std::size_t kEvalChunk = 1024;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::vector<const sim::Trajectory*> usable(const std::vector<const sim::Trajectory*>& in, std::size_t min_len) {
  std::vector<const sim::Trajectory*> out;
  for (const auto* t : in)
    if (t->length() >= min_len) out.push_back(t);
  return out;
}

double elapsed(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

std::vector<Tensor> snapshot(const ad::ParameterStore& ps) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < ps.size(); ++i) out.push_back(ps.value(i));
  return out;
}

void restore(ad::ParameterStore& ps, const std::vector<Tensor>& values, const std::vector<std::size_t>& indices) {
  for (std::size_t i : indices) ps.value(i) = values[i];
}

// Column of batch x 1 values taken from step tensors at (row, cut + offset).
Tensor gather_steps(const std::vector<Tensor>& steps, const std::vector<RowCut>& cuts, std::size_t offset) {
  Tensor out = Tensor::matrix(cuts.size(), 1);
  for (std::size_t k = 0; k < cuts.size(); ++k) out[k] = steps[cuts[k].second + offset][cuts[k].first];
  return out;
}

struct DecoderInputs {
  std::vector<Tensor> plan, observed;
  std::vector<loss::StepTargets> targets;
};

DecoderInputs decoder_inputs(const model::SequenceBatch& batch, const std::vector<RowCut>& cuts, std::size_t tau) {
  DecoderInputs in;
  std::vector<std::size_t> all(cuts.size());
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t u = 0; u < tau; ++u) {
    in.plan.push_back(gather_steps(batch.a, cuts, u));
    Tensor y_next = gather_steps(batch.y, cuts, u + 1);
    if (u + 1 < tau) in.observed.push_back(y_next);
    in.targets.push_back({y_next, in.plan.back(), all});
  }
  return in;
}

// Sums component values over batches for the epoch record.
struct EpochAccumulator {
  double l_y = 0, l_d = 0, l_c = 0, l_o = 0, reg = 0, total = 0;
  std::size_t batches = 0;

  void add(const loss::BlockLoss& bl) {
    l_y += bl.parts.l_y.value().item();
    l_d += bl.parts.l_d.value().item();
    l_c += bl.parts.l_c.value().item();
    l_o += bl.parts.l_o.value().item();
    reg += bl.parts.reg.value().item();
    total += bl.total.value().item();
    ++batches;
  }
  EpochRecord record(std::size_t epoch, double val) const {
    const double n = static_cast<double>(std::max<std::size_t>(batches, 1));
    return {epoch, l_y / n, l_d / n, l_c / n, l_o / n, reg / n, total / n, val};
  }
};

// Early stopping bookkeeping shared by both blocks.
class EarlyStop {
 public:
  explicit EarlyStop(std::size_t patience) : patience_(patience) {}
  /// Returns true when `val` is a new best.
  bool update(double val) {
    if (val < best_) {
      best_ = val;
      since_ = 0;
      return true;
    }
    ++since_;
    return false;
  }
  bool should_stop() const { return since_ > 0 && since_ >= patience_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t since_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

template <class Fn>
auto with_context(const std::string& where, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const std::runtime_error& e) {
    throw TrainingError(where + ": " + e.what());
  }
}

std::string at(const char* block, std::size_t epoch, std::size_t batch) {
  return std::string(block) + " epoch " + std::to_string(epoch) + " batch " + std::to_string(batch);
}

void check_rate(double p) {
  require(p > 0.0 && p < 1.0, "treated rate must lie in (0, 1), got " + std::to_string(p));
}

}  // namespace

void SearchRanges::validate() const {
  require(lr_min > 0 && lr_min <= lr_max, "search learning-rate range is empty or non-positive");
  require(encoder_batch_min >= 1 && encoder_batch_min <= encoder_batch_max, "search encoder batch range is empty");
  require(decoder_batch_min >= 1 && decoder_batch_min <= decoder_batch_max, "search decoder batch range is empty");
  require(rnn_hidden_min >= 1 && rnn_hidden_min <= rnn_hidden_max, "search rnn_hidden range is empty");
  require(repr_min >= 1 && repr_min <= repr_max, "search repr range is empty");
  require(fc_hidden_min >= 1 && fc_hidden_min <= fc_hidden_max, "search fc_hidden range is empty");
  require(dropout_min >= 0 && dropout_min <= dropout_max && dropout_max < 1, "search dropout range is invalid");
  require(weight_min >= 0 && weight_min <= weight_max, "search loss-weight range is invalid");
}

void TrainConfig::validate() const {
  auto lr_ok = [](double lr) { return lr >= 1e-4 && lr <= 1e-2; };
  auto batch_ok = [](std::size_t b) { return b >= 16 && b <= 512; };
  require(lr_ok(encoder_lr), "train.encoder_lr must lie in [1e-4, 1e-2]");
  require(lr_ok(decoder_lr), "train.decoder_lr must lie in [1e-4, 1e-2]");
  require(batch_ok(encoder_batch), "train.encoder_batch must lie in [16, 512]");
  require(batch_ok(decoder_batch), "train.decoder_batch must lie in [16, 512]");
  require(max_epochs >= 1, "train.max_epochs must be >= 1");
  require(tau >= 1, "train.tau must be >= 1");
  require(std::isfinite(clip_norm) && clip_norm >= 0, "train.clip_norm must be a finite value >= 0");
  weights.validate();
  search.validate();
}

void write_report_csv(const std::filesystem::path& path, const TrainReport& report,
                      const std::vector<std::string>& comment) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  for (const auto& line : comment) out << "# " << line << '\n';
  out << "epoch,L_Y,L_D,L_C,L_O,L2,total,val_mse\n";
  for (const auto& e : report.epochs) {
    out << e.epoch << ',' << e.l_y << ',' << e.l_d << ',' << e.l_c << ',' << e.l_o << ',' << e.reg << ','
        << e.total << ',' << e.val_mse << '\n';
  }
}

DcrnModel make_model(const sim::Dataset& dataset, const model::ModelConfig& config, std::uint64_t seed) {
  model::ModelConfig cfg = config;
  cfg.covariate_dim = dataset.dim();
  double treated = 0, steps = 0;
  for (const auto* t : dataset.split(sim::Split::kTrain))
    for (int a : t->treatments) {
      treated += a;
      steps += 1;
    }
  require(steps > 0, "dataset has no training trajectories");
  return DcrnModel::create(cfg, model::Normalizer::fit(dataset), treated / steps, seed);
}

std::vector<RowCut> decoder_cuts(const std::vector<const sim::Trajectory*>& trajectories, std::size_t tau) {
  std::vector<RowCut> out;
  for (std::size_t r = 0; r < trajectories.size(); ++r) {
    const std::size_t len = trajectories[r]->length();
    for (std::size_t c = 1; c + tau + 1 <= len; ++c) out.emplace_back(r, c);
  }
  return out;
}

double encoder_mse(const DcrnModel& m, const std::vector<const sim::Trajectory*>& trajectories) {
  const auto ptrs = usable(trajectories, 2);
  require(!ptrs.empty(), "encoder_mse: no trajectory with at least two steps");
  auto* store = const_cast<ad::ParameterStore*>(&m.params);
  double sse = 0, n = 0;
  for (std::size_t lo = 0; lo < ptrs.size(); lo += kEvalChunk) {
    std::vector<const sim::Trajectory*> chunk(ptrs.begin() + static_cast<std::ptrdiff_t>(lo),
                                              ptrs.begin() + static_cast<std::ptrdiff_t>(std::min(ptrs.size(), lo + kEvalChunk)));
    const model::SequenceBatch batch = model::make_batch(chunk, m.normalizer);
    Graph g(store, false);
    const auto out = model::encoder_forward(g, m.config, batch, false, nullptr, false);
    for (std::size_t t = 0; t < out.steps.size(); ++t) {
      const Tensor& pred = out.steps[t].y_hat.value();
      for (std::size_t r = 0; r < batch.batch; ++r) {
        if (!batch.valid(r, t + 1)) continue;
        const double d = m.normalizer.y_raw(pred[r]) - chunk[r]->outcomes[t + 1];
        sse += d * d;
        n += 1;
      }
    }
  }
  return sse / n;
}

double decoder_mse(const DcrnModel& m, const std::vector<const sim::Trajectory*>& trajectories, std::size_t tau) {
  const model::SequenceBatch batch = model::make_batch(trajectories, m.normalizer);
  const auto cuts = decoder_cuts(trajectories, tau);
  require(!cuts.empty(), "decoder_mse: tau = " + std::to_string(tau) + " leaves no cut point");
  const model::HistoryStates hs = model::encode_history(m.config, m.params, batch);
  auto* store = const_cast<ad::ParameterStore*>(&m.params);
  double sse = 0, n = 0;
  for (std::size_t lo = 0; lo < cuts.size(); lo += kEvalChunk) {
    std::vector<RowCut> chunk(cuts.begin() + static_cast<std::ptrdiff_t>(lo),
                              cuts.begin() + static_cast<std::ptrdiff_t>(std::min(cuts.size(), lo + kEvalChunk)));
    const DecoderInputs in = decoder_inputs(batch, chunk, tau);
    const model::DecoderStart start = model::decoder_start(hs, batch, chunk);
    Graph g(store, false);
    const auto out = model::decoder_forward(g, m.config, start, in.plan, tau, model::DecodeMode::kAutoregressive,
                                            nullptr, false, nullptr, false);
    for (std::size_t u = 0; u < tau; ++u) {
      const Tensor& pred = out.steps[u].y_hat.value();
      for (std::size_t k = 0; k < chunk.size(); ++k) {
        const auto [row, cut] = chunk[k];
        const double d = m.normalizer.y_raw(pred[k]) - trajectories[row]->outcomes[cut + u + 1];
        sse += d * d;
        n += 1;
      }
    }
  }
  return sse / n;
}

TrainReport train_encoder(DcrnModel& m, const sim::Dataset& dataset, const TrainConfig& config) {
  config.validate();
  check_rate(m.treated_rate);
  const auto start_time = std::chrono::steady_clock::now();
  const auto train = usable(dataset.split(sim::Split::kTrain), 2);
  const auto val = usable(dataset.split(sim::Split::kVal), 2);
  require(!train.empty(), "train_encoder: no training trajectory with at least two steps");
  require(!val.empty(), "train_encoder: no validation trajectory with at least two steps");

  std::mt19937_64 rng = sim::make_stream(config.seed, kEncoderStream, 0);
  ad::Adam adam(m.params, {.learning_rate = config.encoder_lr}, {model::block_prefix(Block::kEncoder)});
  loss::BlockLossOptions opt{.weights = config.weights, .unit_weights = config.unit_weights};

  TrainReport report;
  report.block = "encoder";
  EarlyStop stop(config.patience);
  std::vector<Tensor> best = snapshot(m.params);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochAccumulator acc;
    for (std::size_t lo = 0, b = 0; lo < order.size(); lo += config.encoder_batch, ++b) {
      std::vector<const sim::Trajectory*> ptrs;
      for (std::size_t k = lo; k < std::min(order.size(), lo + config.encoder_batch); ++k)
        ptrs.push_back(train[order[k]]);
      const model::SequenceBatch batch = model::make_batch(ptrs, m.normalizer);
      m.params.zero_grad();
      Graph g(&m.params);
      with_context(at("encoder", epoch, b), [&] {
        const auto out = model::encoder_forward(g, m.config, batch, true, &rng);
        const auto bl = loss::block_loss(g, m.config, Block::kEncoder, out.steps, loss::encoder_targets(batch),
                                         m.treated_rate, opt);
        g.backward(bl.total);
        if (config.clip_norm > 0) ad::clip_grad_norm(m.params, adam.managed(), config.clip_norm);
        adam.step(m.params);
        acc.add(bl);
        return 0;
      });
      ++report.updates;
    }
    const double v = encoder_mse(m, val);
    if (!std::isfinite(v)) throw TrainingError(at("encoder", epoch, 0) + ": non-finite validation MSE");
    report.epochs.push_back(acc.record(epoch, v));
    if (stop.update(v)) {
      report.best_epoch = epoch;
      best = snapshot(m.params);
    }
    if (stop.should_stop()) break;
  }
  restore(m.params, best, adam.managed());
  report.best_val_mse = stop.best();
  report.wall_seconds = elapsed(start_time);
  return report;
}

TrainReport train_decoder(DcrnModel& m, const sim::Dataset& dataset, const TrainConfig& config) {
  config.validate();
  check_rate(m.treated_rate);
  const auto start_time = std::chrono::steady_clock::now();
  const std::size_t tau = config.tau;
  const auto train = usable(dataset.split(sim::Split::kTrain), tau + 2);
  const auto val = usable(dataset.split(sim::Split::kVal), tau + 2);
  require(!train.empty(), "train_decoder: tau = " + std::to_string(tau) +
                              " must be below the length of some training trajectory minus one");
  require(!val.empty(), "train_decoder: tau = " + std::to_string(tau) +
                            " must be below the length of some validation trajectory minus one");

  const std::string enc_prefix = model::block_prefix(Block::kEncoder);
  TrainReport report;
  report.block = "decoder";
  report.encoder_checksum_before = ad::parameter_checksum(m.params, enc_prefix);

  // The encoder is frozen, so history states are computed once.
  const model::SequenceBatch batch = model::make_batch(train, m.normalizer);
  const model::HistoryStates hs = model::encode_history(m.config, m.params, batch);
  auto cuts = decoder_cuts(train, tau);

  std::mt19937_64 rng = sim::make_stream(config.seed, kDecoderStream, 0);
  ad::Adam adam(m.params, {.learning_rate = config.decoder_lr}, {model::block_prefix(Block::kDecoder)});
  loss::BlockLossOptions opt{.weights = config.weights, .unit_weights = config.unit_weights};
  EarlyStop stop(config.patience);
  std::vector<Tensor> best = snapshot(m.params);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(cuts.begin(), cuts.end(), rng);
    EpochAccumulator acc;
    for (std::size_t lo = 0, b = 0; lo < cuts.size(); lo += config.decoder_batch, ++b) {
      const std::vector<RowCut> sub(cuts.begin() + static_cast<std::ptrdiff_t>(lo),
                                    cuts.begin() + static_cast<std::ptrdiff_t>(std::min(cuts.size(), lo + config.decoder_batch)));
      const DecoderInputs in = decoder_inputs(batch, sub, tau);
      const model::DecoderStart start = model::decoder_start(hs, batch, sub);
      m.params.zero_grad();
      Graph g(&m.params);
      with_context(at("decoder", epoch, b), [&] {
        const auto out = model::decoder_forward(g, m.config, start, in.plan, tau, model::DecodeMode::kTeacherForced,
                                                &in.observed, true, &rng);
        const auto bl = loss::block_loss(g, m.config, Block::kDecoder, out.steps, in.targets, m.treated_rate, opt);
        g.backward(bl.total);
        const double enc_norm = std::sqrt(m.params.grad_norm_squared(enc_prefix));
        report.max_encoder_grad_norm = std::max(report.max_encoder_grad_norm, enc_norm);
        if (enc_norm != 0.0) {
          throw std::logic_error(at("decoder", epoch, b) + ": encoder received gradient norm " +
                                 std::to_string(enc_norm));
        }
        if (config.clip_norm > 0) ad::clip_grad_norm(m.params, adam.managed(), config.clip_norm);
        adam.step(m.params);
        acc.add(bl);
        return 0;
      });
      ++report.updates;
    }
    const double v = decoder_mse(m, val, tau);
    if (!std::isfinite(v)) throw TrainingError(at("decoder", epoch, 0) + ": non-finite validation MSE");
    report.epochs.push_back(acc.record(epoch, v));
    if (stop.update(v)) {
      report.best_epoch = epoch;
      best = snapshot(m.params);
    }
    if (stop.should_stop()) break;
  }
  restore(m.params, best, adam.managed());
  report.best_val_mse = stop.best();
  report.encoder_checksum_after = ad::parameter_checksum(m.params, enc_prefix);
  if (report.encoder_checksum_after != report.encoder_checksum_before) {
    throw std::logic_error("train_decoder: encoder parameters changed");
  }
  report.wall_seconds = elapsed(start_time);
  return report;
}

TrainedModel train_model(const sim::Dataset& dataset, const model::ModelConfig& model_config,
                         const TrainConfig& config) {
  TrainedModel out{make_model(dataset, model_config, config.seed), {}, {}};
  out.encoder = train_encoder(out.model, dataset, config);
  out.decoder = train_decoder(out.model, dataset, config);
  return out;
}

void sample_trial(const SearchRanges& r, std::mt19937_64& rng, model::ModelConfig& m, TrainConfig& t) {
  auto log_uniform = [&](double lo, double hi) {
    return std::exp(std::uniform_real_distribution<double>(std::log(lo), std::log(hi))(rng));
  };
  auto uniform_int = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  // Clamp guards the closed upper end against rounding in exp(log(hi)).
  t.encoder_lr = std::clamp(log_uniform(r.lr_min, r.lr_max), r.lr_min, r.lr_max);
  t.decoder_lr = std::clamp(log_uniform(r.lr_min, r.lr_max), r.lr_min, r.lr_max);
  t.encoder_batch = uniform_int(r.encoder_batch_min, r.encoder_batch_max);
  t.decoder_batch = uniform_int(r.decoder_batch_min, r.decoder_batch_max);
  m.rnn_hidden = uniform_int(r.rnn_hidden_min, r.rnn_hidden_max);
  m.repr_size = uniform_int(r.repr_min, r.repr_max);
  m.fc_hidden = uniform_int(r.fc_hidden_min, r.fc_hidden_max);
  m.dropout = uniform(r.dropout_min, r.dropout_max);
  t.weights.alpha = uniform(r.weight_min, r.weight_max);
  t.weights.beta = uniform(r.weight_min, r.weight_max);
  t.weights.gamma = uniform(r.weight_min, r.weight_max);
}

bool in_ranges(const SearchRanges& r, const model::ModelConfig& m, const TrainConfig& t) {
  auto in = [](auto v, auto lo, auto hi) { return v >= lo && v <= hi; };
  return in(t.encoder_lr, r.lr_min, r.lr_max) && in(t.decoder_lr, r.lr_min, r.lr_max) &&
         in(t.encoder_batch, r.encoder_batch_min, r.encoder_batch_max) &&
         in(t.decoder_batch, r.decoder_batch_min, r.decoder_batch_max) &&
         in(m.rnn_hidden, r.rnn_hidden_min, r.rnn_hidden_max) && in(m.repr_size, r.repr_min, r.repr_max) &&
         in(m.fc_hidden, r.fc_hidden_min, r.fc_hidden_max) && in(m.dropout, r.dropout_min, r.dropout_max) &&
         in(t.weights.alpha, r.weight_min, r.weight_max) && in(t.weights.beta, r.weight_min, r.weight_max) &&
         in(t.weights.gamma, r.weight_min, r.weight_max);
}

SearchResult random_search(const sim::Dataset& dataset, const model::ModelConfig& base_model,
                           const TrainConfig& base_train, std::size_t n_trials, std::uint64_t seed,
                           std::size_t jobs) {
  require(n_trials >= 1, "random_search: n_trials must be >= 1");
  base_train.search.validate();
  std::vector<Trial> trials(n_trials);
  for (std::size_t i = 0; i < n_trials; ++i) {
    Trial& tr = trials[i];
    tr.index = i;
    tr.seed = sim::make_stream(seed, kTrialSeedStream, i)();
    tr.model = base_model;
    tr.train = base_train;
    std::mt19937_64 rng = sim::make_stream(seed, kTrialSampleStream, i);
    sample_trial(base_train.search, rng, tr.model, tr.train);
    tr.train.seed = tr.seed;
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n_trials; i = next++) {
      Trial& tr = trials[i];
      try {
        TrainedModel tm = train_model(dataset, tr.model, tr.train);
        tr.encoder_val_mse = tm.encoder.best_val_mse;
        tr.val_mse = tm.decoder.best_val_mse;
      } catch (const std::exception& e) {
        tr.error = e.what();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(jobs, 1, n_trials);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < n_threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  SearchResult result;
  result.leaderboard = trials;
  std::stable_sort(result.leaderboard.begin(), result.leaderboard.end(), [](const Trial& a, const Trial& b) {
    if (a.error.empty() != b.error.empty()) return a.error.empty();
    return a.error.empty() && a.val_mse < b.val_mse;
  });
  if (!result.leaderboard.front().error.empty()) {
    std::string msg = "random_search: all " + std::to_string(n_trials) + " trials failed";
    for (const auto& tr : trials) msg += "; trial " + std::to_string(tr.index) + ": " + tr.error;
    throw TrainingError(msg);
  }
  result.best = result.leaderboard.front();
  return result;
}

void write_leaderboard_csv(const std::filesystem::path& path, const SearchResult& result,
                           const std::vector<std::string>& comment) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  for (const auto& line : comment) out << "# " << line << '\n';
  out << "rank,trial,seed,encoder_lr,decoder_lr,encoder_batch,decoder_batch,rnn_hidden,repr_size,fc_hidden,"
         "dropout,alpha,beta,gamma,encoder_val_mse,val_mse,error\n";
  for (std::size_t k = 0; k < result.leaderboard.size(); ++k) {
    const Trial& t = result.leaderboard[k];
    std::string err = t.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << k + 1 << ',' << t.index << ',' << t.seed << ',' << t.train.encoder_lr << ',' << t.train.decoder_lr << ','
        << t.train.encoder_batch << ',' << t.train.decoder_batch << ',' << t.model.rnn_hidden << ','
        << t.model.repr_size << ',' << t.model.fc_hidden << ',' << t.model.dropout << ',' << t.train.weights.alpha
        << ',' << t.train.weights.beta << ',' << t.train.weights.gamma << ',' << t.encoder_val_mse << ','
        << t.val_mse << ',' << err << '\n';
  }
}

}  // namespace dcrn::train
