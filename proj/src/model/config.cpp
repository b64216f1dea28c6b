#include "dcrn/model/config.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dcrn::model {

std::string to_string(Architecture arch) { return arch == Architecture::kDcrn ? "dcrn" : "hg-t"; }

Architecture architecture_from_string(const std::string& s) {
  if (s == "dcrn") return Architecture::kDcrn;
  if (s == "hg-t" || s == "hgt") return Architecture::kHgt;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected dcrn or hg-t)");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("model.") + name + " must be >= 1");
  };
  positive(covariate_dim, "covariate_dim");
  positive(repr_size, "repr_size");
  positive(rnn_hidden, "rnn_hidden");
  positive(fc_hidden, "fc_hidden");
  positive(factor_dim, "factor_dim");
  if (!(dropout >= 0.0 && dropout <= 0.4)) throw std::invalid_argument("model.dropout must lie in [0, 0.4]");
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"arch", to_string(c.arch)},         {"covariate_dim", c.covariate_dim},
          {"repr_size", c.repr_size},          {"rnn_hidden", c.rnn_hidden},
          {"fc_hidden", c.fc_hidden},          {"factor_dim", c.factor_dim},
          {"dropout", c.dropout}};
}

ModelConfig model_config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  c.arch = architecture_from_string(j.at("arch").get<std::string>());
  c.covariate_dim = j.at("covariate_dim").get<std::size_t>();
  c.repr_size = j.at("repr_size").get<std::size_t>();
  c.rnn_hidden = j.at("rnn_hidden").get<std::size_t>();
  c.fc_hidden = j.at("fc_hidden").get<std::size_t>();
  c.factor_dim = j.at("factor_dim").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.validate();
  return c;
}

Normalizer Normalizer::identity(std::size_t dim) {
  Normalizer n;
  n.x_mean.assign(dim, 0.0);
  n.x_std.assign(dim, 1.0);
  return n;
}

Normalizer Normalizer::fit(const sim::Dataset& dataset) {
  const std::size_t d = dataset.dim();
  Normalizer n = identity(d);
  std::vector<double> sx(d, 0.0), sxx(d, 0.0);
  double sy = 0.0, syy = 0.0, count = 0.0;
  for (const auto* t : dataset.split(sim::Split::kTrain)) {
    for (std::size_t s = 0; s < t->length(); ++s) {
      for (std::size_t k = 0; k < d; ++k) {
        sx[k] += t->x(s, k);
        sxx[k] += t->x(s, k) * t->x(s, k);
      }
      sy += t->outcomes[s];
      syy += t->outcomes[s] * t->outcomes[s];
      count += 1.0;
    }
  }
  if (count == 0.0) throw std::invalid_argument("normalizer: train split is empty");
  auto spread = [count](double s, double ss) {
    const double m = s / count;
    const double var = std::max(0.0, ss / count - m * m);
    const double sd = std::sqrt(var);
    return sd > 1e-12 ? sd : 1.0;
  };
  for (std::size_t k = 0; k < d; ++k) {
    n.x_mean[k] = sx[k] / count;
    n.x_std[k] = spread(sx[k], sxx[k]);
  }
  n.y_mean = sy / count;
  n.y_std = spread(sy, syy);
  return n;
}

nlohmann::ordered_json to_json(const Normalizer& n) {
  return {{"x_mean", n.x_mean}, {"x_std", n.x_std}, {"y_mean", n.y_mean}, {"y_std", n.y_std}};
}

Normalizer normalizer_from_json(const nlohmann::ordered_json& j) {
  Normalizer n;
  n.x_mean = j.at("x_mean").get<std::vector<double>>();
  n.x_std = j.at("x_std").get<std::vector<double>>();
  n.y_mean = j.at("y_mean").get<double>();
  n.y_std = j.at("y_std").get<double>();
  if (n.x_mean.size() != n.x_std.size()) throw std::invalid_argument("normalizer: length mismatch");
  return n;
}

}  // namespace dcrn::model
