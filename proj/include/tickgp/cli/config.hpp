#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "tickgp/core/errors.hpp"

namespace tickgp {

struct ConfigKey {
  std::string name;  // section.key
  std::string default_value;
  std::string doc;
};

/// Every recognised key with its default. The order is the order of the resolved echo.
inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = {
      {"model.type", "tick", "se | conv | tick | deep-conv | deep-tick"},
      {"model.depth", "1", "number of GP layers (deep-* models need >= 2)"},
      {"model.num_inducing", "200", "inducing patches of the final layer"},
      {"model.hidden_inducing", "384", "inducing patches of each hidden layer"},
      {"model.patch_size", "5", "final-layer patch side (ignored by se)"},
      {"model.hidden_patch_size", "5", "hidden-layer patch side (odd)"},
      {"model.weights", "true", "learned patch weights on the final summation"},
      {"model.tick_all_layers", "false", "location kernel on hidden layers of deep-tick"},
      {"model.shared_inducing", "true", "classification heads share one set of inducing patches"},
      {"model.patch_kernel", "se", "se | matern32"},
      {"model.location_kernel", "matern32", "se | matern32"},
      {"model.patch_variance", "1.0", "initial patch-kernel variance"},
      {"model.hidden_patch_variance", "1e-6", "initial patch-kernel variance of hidden layers"},
      {"model.patch_lengthscale", "1.0", "initial patch-kernel lengthscale"},
      {"model.location_lengthscale", "3.0", "initial location-kernel lengthscale (pixels)"},
      {"model.weight_init", "1.0", "initial value of every patch weight"},
      {"model.final_q_scale", "1.0", "initial S_chol = scale * I on the final layer"},
      {"model.hidden_q_scale", "0.001", "initial S_chol = scale * I on hidden layers"},
      {"model.jitter", "1e-6", "diagonal jitter on Kuu and sampled covariances"},
      {"model.sampling", "marginal", "hidden-layer sampling: marginal | full"},
      {"model.likelihood", "softmax", "softmax (classification) | gaussian (labels as real targets)"},
      {"model.noise_variance", "0.1", "initial noise variance of the gaussian likelihood"},
      {"data.format", "idx", "idx | cifar10"},
      {"data.train_images", "data/mnist/train-images-idx3-ubyte", "training images (IDX)"},
      {"data.train_labels", "data/mnist/train-labels-idx1-ubyte", "training labels (IDX)"},
      {"data.test_images", "data/mnist/t10k-images-idx3-ubyte", "test images (IDX)"},
      {"data.test_labels", "data/mnist/t10k-labels-idx1-ubyte", "test labels (IDX)"},
      {"data.cifar_train", "", "comma-separated CIFAR-10 binary batches (format = cifar10)"},
      {"data.cifar_test", "", "CIFAR-10 test batch (format = cifar10)"},
      {"data.classes", "", "comma-separated class subset, relabelled in order; empty keeps all"},
      {"data.train_size", "0", "keep the first n training images after subsetting (0 = all)"},
      {"data.test_size", "0", "keep the first n test images after subsetting (0 = all)"},
      {"train.batch_size", "128", "minibatch size"},
      {"train.steps", "1000", "optimizer steps"},
      {"train.schedule", "inverse-time", "inverse-time | exponential | constant"},
      {"train.lr", "0.01", "initial learning rate"},
      {"train.decay_tau", "10000", "inverse-time: lr / (1 + t / tau)"},
      {"train.decay_factor", "4", "exponential: lr * factor^-floor(t / every)"},
      {"train.decay_every", "50000", "exponential decay period (steps)"},
      {"train.adam_beta1", "0.9", "Adam beta1"},
      {"train.adam_beta2", "0.999", "Adam beta2"},
      {"train.adam_epsilon", "1e-8", "Adam epsilon"},
      {"train.seed", "0", "seed for initialization, minibatch order and sampling"},
      {"train.eval_interval", "0", "evaluate on the test set every n steps (0 = off)"},
      {"train.checkpoint_interval", "0", "checkpoint every n steps (the final step is always saved)"},
      {"train.train_samples", "1", "Monte-Carlo samples per training step"},
      {"train.eval_samples", "5", "Monte-Carlo samples for predictive probabilities"},
      {"train.clip_norm", "0", "global gradient-norm clip (0 = off)"},
      {"train.warm_start", "", "checkpoint of a shallower deep model to initialize from"},
      {"bench.switch_step", "0", "bench-sampling: switch hidden layers to full covariance at this step"},
      {"output.dir", "runs/default", "output directory"},
  };
  return keys;
}

/// Resolved key=value configuration.
class Config {
 public:
  Config() {
    for (const auto& k : config_schema()) values_[k.name] = k.default_value;
  }

  static Config parse(const std::string& text, const std::string& origin = "<config>") {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
      boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    Config c;
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError(origin + ": key '" + section + "' is outside a section");
      for (const auto& [key, v] : body) c.set(section + "." + key, v.get_value<std::string>());
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t pos = 0;
      double v = std::stod(s, &pos);
      if (pos == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "': '" + s + "' is not a number");
  }

  std::size_t count(const std::string& key) const {
    const auto& s = str(key);
    if (!s.empty() && s.find_first_not_of("0123456789") == std::string::npos) {
      try {
        return std::stoull(s);
      } catch (const std::exception&) {
      }
    }
    throw ConfigError("config key '" + key + "': '" + s + "' is not a non-negative integer");
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + key + "': '" + s + "' is not a boolean");
  }

  std::vector<int> int_list(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item.erase(0, item.find_first_not_of(" \t"));
      item.erase(item.find_last_not_of(" \t") + 1);
      if (item.empty()) continue;
      try {
        std::size_t pos = 0;
        out.push_back(std::stoi(item, &pos));
        if (pos != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + item + "' is not an integer");
      }
    }
    return out;
  }

  std::vector<std::string> string_list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item.erase(0, item.find_first_not_of(" \t"));
      item.erase(item.find_last_not_of(" \t") + 1);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  /// Every key, defaults materialized, grouped by section in schema order.
  std::string resolved() const {
    std::ostringstream os;
    std::string section;
    for (const auto& k : config_schema()) {
      const auto dot = k.name.find('.');
      const std::string s = k.name.substr(0, dot);
      if (s != section) {
        os << (section.empty() ? "" : "\n") << '[' << s << "]\n";
        section = s;
      }
      os << k.name.substr(dot + 1) << " = " << values_.at(k.name) << '\n';
    }
    return os.str();
  }

 private:
  std::map<std::string, std::string> values_;
};

/// Human-readable reference of every key, its default and meaning.
inline std::string config_reference() {
  std::ostringstream os;
  std::string section;
  for (const auto& k : config_schema()) {
    const auto dot = k.name.find('.');
    const std::string s = k.name.substr(0, dot);
    if (s != section) {
      os << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    os << "; " << k.doc << '\n' << k.name.substr(dot + 1) << " = " << k.default_value << '\n';
  }
  return os.str();
}

}  // namespace tickgp
