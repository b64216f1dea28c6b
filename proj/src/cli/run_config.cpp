#include "dcrn/cli/run_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

namespace dcrn::cli {

namespace {

// One field list drives parsing, YAML dumping and JSON dumping.
template <class V>
void visit(RunConfig& c, V& v) {
  v.field("seed", c.seed);
  v.section("sim", [&] {
    v.field("zeta", c.sim.zeta);
    v.field("n_patients", c.sim.n_patients);
    v.field("max_length", c.sim.max_length);
    v.field("tau", c.sim.tau);
    v.field("n_test_patients", c.sim.n_test_patients);
    v.section("noise", [&] {
      v.field("enabled", c.sim.noise.enabled);
      v.field("rho_variance", c.sim.noise.rho_variance);
      v.field("kappa_variance", c.sim.noise.kappa_variance);
      v.field("ar_coef_variance", c.sim.noise.ar_coef_variance);
    });
    v.section("splits", [&] {
      v.field("train", c.sim.splits.train);
      v.field("val", c.sim.splits.val);
      v.field("test", c.sim.splits.test);
    });
  });
  v.section("model", [&] {
    v.field("arch", c.model.arch);
    v.field("repr_size", c.model.repr_size);
    v.field("rnn_hidden", c.model.rnn_hidden);
    v.field("fc_hidden", c.model.fc_hidden);
    v.field("factor_dim", c.model.factor_dim);
    v.field("dropout", c.model.dropout);
  });
  v.section("train", [&] {
    auto& t = c.train;
    v.field("encoder_lr", t.encoder_lr);
    v.field("decoder_lr", t.decoder_lr);
    v.field("encoder_batch", t.encoder_batch);
    v.field("decoder_batch", t.decoder_batch);
    v.field("max_epochs", t.max_epochs);
    v.field("patience", t.patience);
    v.field("tau", t.tau);
    v.field("alpha", t.weights.alpha);
    v.field("beta", t.weights.beta);
    v.field("gamma", t.weights.gamma);
    v.field("l2", t.weights.l2);
    v.field("unit_weights", t.unit_weights);
    v.field("clip_norm", t.clip_norm);
    v.section("search", [&] {
      auto& s = t.search;
      v.field("lr_min", s.lr_min);
      v.field("lr_max", s.lr_max);
      v.field("encoder_batch_min", s.encoder_batch_min);
      v.field("encoder_batch_max", s.encoder_batch_max);
      v.field("decoder_batch_min", s.decoder_batch_min);
      v.field("decoder_batch_max", s.decoder_batch_max);
      v.field("rnn_hidden_min", s.rnn_hidden_min);
      v.field("rnn_hidden_max", s.rnn_hidden_max);
      v.field("repr_min", s.repr_min);
      v.field("repr_max", s.repr_max);
      v.field("fc_hidden_min", s.fc_hidden_min);
      v.field("fc_hidden_max", s.fc_hidden_max);
      v.field("dropout_min", s.dropout_min);
      v.field("dropout_max", s.dropout_max);
      v.field("weight_min", s.weight_min);
      v.field("weight_max", s.weight_max);
    });
  });
  v.section("eval", [&] {
    auto& e = c.eval;
    v.field("zetas", e.zetas);
    v.field("taus", e.taus);
    v.field("models", e.models);
    v.field("n_seeds", e.n_seeds);
    v.field("plan_taus", e.plan_taus);
    v.field("plan_patients", e.plan_patients);
    v.field("plan_one_hot", e.plan_one_hot);
    v.field("influence_zeta", e.influence_zeta);
    v.field("search_trials", c.search_trials);
  });
}

std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, r.ptr);
  // Keep a decimal point so the value reads back as a float.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

class Loader {
 public:
  explicit Loader(YAML::Node root) { frames_.push_back({std::move(root), "", {}}); }

  void section(const char* name, const std::function<void()>& body) {
    Frame& f = frames_.back();
    f.known.insert(name);
    const YAML::Node child = f.node[name];
    const std::string path = join(f.path, name);
    if (!child.IsDefined() || child.IsNull()) return;
    if (!child.IsMap()) throw ConfigError(path + ": expected a mapping");
    frames_.push_back({child, path, {}});
    body();
    finish();
  }

  template <class T>
  void field(const char* name, T& out) {
    Frame& f = frames_.back();
    f.known.insert(name);
    const YAML::Node n = f.node[name];
    if (!n.IsDefined() || n.IsNull()) return;
    read(n, join(f.path, name), out);
  }

  void finish() {
    Frame& f = frames_.back();
    for (const auto& kv : f.node) {
      const std::string key = kv.first.as<std::string>();
      if (!f.known.count(key)) throw ConfigError(join(f.path, key) + ": unknown key");
    }
    frames_.pop_back();
  }

 private:
  struct Frame {
    YAML::Node node;
    std::string path;
    std::set<std::string> known;
  };
  std::vector<Frame> frames_;

  static std::string join(const std::string& a, const std::string& b) { return a.empty() ? b : a + "." + b; }

  static std::string scalar(const YAML::Node& n, const std::string& path, const char* what) {
    if (!n.IsScalar()) throw ConfigError(path + ": expected " + what);
    return n.Scalar();
  }

  static void read(const YAML::Node& n, const std::string& path, double& out) {
    const std::string s = scalar(n, path, "a number");
    double v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
      throw ConfigError(path + ": expected a number, got '" + s + "'");
    }
    out = v;
  }
  static void read(const YAML::Node& n, const std::string& path, std::uint64_t& out) {
    const std::string s = scalar(n, path, "a non-negative integer");
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw ConfigError(path + ": expected a non-negative integer, got '" + s + "'");
    }
    out = v;
  }
  static void read(const YAML::Node& n, const std::string& path, bool& out) {
    const std::string s = scalar(n, path, "true or false");
    if (s == "true") {
      out = true;
    } else if (s == "false") {
      out = false;
    } else {
      throw ConfigError(path + ": expected true or false, got '" + s + "'");
    }
  }
  static void read(const YAML::Node& n, const std::string& path, std::string& out) {
    out = scalar(n, path, "a string");
  }
  static void read(const YAML::Node& n, const std::string& path, model::Architecture& out) {
    const std::string s = scalar(n, path, "an architecture name");
    try {
      out = model::architecture_from_string(s);
    } catch (const std::exception&) {
      throw ConfigError(path + ": unknown architecture '" + s + "' (expected dcrn or hg-t)");
    }
  }
  template <class T>
  static void read(const YAML::Node& n, const std::string& path, std::vector<T>& out) {
    if (!n.IsSequence()) throw ConfigError(path + ": expected a list");
    std::vector<T> v(n.size());
    for (std::size_t i = 0; i < n.size(); ++i) read(n[i], path + "[" + std::to_string(i) + "]", v[i]);
    out = std::move(v);
  }
};

class YamlDumper {
 public:
  YamlDumper() { out_ << YAML::BeginMap; }

  void section(const char* name, const std::function<void()>& body) {
    out_ << YAML::Key << name << YAML::Value << YAML::BeginMap;
    body();
    out_ << YAML::EndMap;
  }
  template <class T>
  void field(const char* name, const T& v) {
    out_ << YAML::Key << name << YAML::Value;
    put(v);
  }
  std::string text() {
    out_ << YAML::EndMap;
    return std::string(out_.c_str()) + "\n";
  }

 private:
  YAML::Emitter out_;
  void put(double v) { out_ << shortest(v); }
  void put(std::uint64_t v) { out_ << v; }
  void put(bool v) { out_ << (v ? "true" : "false"); }
  void put(const std::string& v) { out_ << YAML::DoubleQuoted << v; }
  void put(model::Architecture a) { out_ << model::to_string(a); }
  template <class T>
  void put(const std::vector<T>& v) {
    out_ << YAML::Flow << YAML::BeginSeq;
    for (const auto& x : v) put(x);
    out_ << YAML::EndSeq;
  }
};

class JsonDumper {
 public:
  void section(const char* name, const std::function<void()>& body) {
    stack_.push_back(nlohmann::ordered_json::object());
    body();
    auto obj = std::move(stack_.back());
    stack_.pop_back();
    stack_.back()[name] = std::move(obj);
  }
  template <class T>
  void field(const char* name, const T& v) {
    stack_.back()[name] = value(v);
  }
  nlohmann::ordered_json result() { return stack_.front(); }

 private:
  std::vector<nlohmann::ordered_json> stack_{nlohmann::ordered_json::object()};
  static nlohmann::ordered_json value(model::Architecture a) { return model::to_string(a); }
  template <class T>
  static nlohmann::ordered_json value(const T& v) {
    return v;
  }
};

}  // namespace

void RunConfig::apply_seed() {
  sim.seed = seed;
  train.seed = seed;
}

void RunConfig::validate() const {
  try {
    sim.validate();
    model.validate();
    train.validate();
    eval.validate();
    for (std::size_t tau : eval.taus) {
      if (tau >= sim.max_length) {
        throw std::invalid_argument("eval.taus entries must be below sim.max_length");
      }
    }
    if (search_trials == 0) throw std::invalid_argument("eval.search_trials must be >= 1");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

bool operator==(const RunConfig& a, const RunConfig& b) { return config_to_json(a) == config_to_json(b); }

RunConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("yaml: ") + e.what());
  }
  RunConfig c;
  if (root.IsNull()) return c;
  if (!root.IsMap()) throw ConfigError("top level: expected a mapping of sections");
  Loader loader(root);
  visit(c, loader);
  loader.finish();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const RunConfig& config) {
  RunConfig c = config;
  YamlDumper d;
  visit(c, d);
  return d.text();
}

nlohmann::ordered_json config_to_json(const RunConfig& config) {
  RunConfig c = config;
  JsonDumper d;
  visit(c, d);
  return d.result();
}

std::string config_hash(const RunConfig& config) {
  const std::string text = config_to_json(config).dump();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    static const char* digits = "0123456789abcdef";
    hex << digits[digest[i] >> 4] << digits[digest[i] & 15];
  }
  return hex.str();
}

}  // namespace dcrn::cli
