#pragma once

#include "partcraft/archive.hpp"
#include "partcraft/autodiff.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace partcraft {

/// AdamW with decoupled weight decay, keyed by parameter name so its state
/// survives a checkpoint round trip.
class AdamW {
 public:
  struct Options {
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  AdamW() = default;
  explicit AdamW(Options options) : options_(options) {}

  const Options& options() const { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  long step_count() const { return step_; }

  /// Applies one update to every trainable parameter using its grad.
  void step(const std::vector<ad::Parameter*>& params) {
    ++step_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    const double lr = options_.learning_rate;
    for (ad::Parameter* p : params) {
      if (!p->trainable) continue;
      auto& st = state_[p->name];
      if (st.m.size() == 0) {
        st.m = Matrix::Zero(p->value.rows(), p->value.cols());
        st.v = Matrix::Zero(p->value.rows(), p->value.cols());
      }
      st.m = options_.beta1 * st.m + (1.0 - options_.beta1) * p->grad;
      st.v = options_.beta2 * st.v + (1.0 - options_.beta2) * p->grad.cwiseProduct(p->grad);
      p->value *= 1.0 - lr * options_.weight_decay;
      p->value.array() -= lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + options_.eps);
    }
  }

  void write(Archive& archive, const std::string& prefix) const {
    archive.meta["optimizer"] = {{"step", step_},
                                 {"learning_rate", options_.learning_rate},
                                 {"weight_decay", options_.weight_decay},
                                 {"beta1", options_.beta1},
                                 {"beta2", options_.beta2},
                                 {"eps", options_.eps}};
    for (const auto& [name, st] : state_) {
      archive.tensors[prefix + name + ".m"] = st.m;
      archive.tensors[prefix + name + ".v"] = st.v;
    }
  }

  static AdamW read(const Archive& archive, const std::string& prefix) {
    const auto& meta = archive.meta.at("optimizer");
    Options o;
    o.learning_rate = meta.at("learning_rate").get<double>();
    o.weight_decay = meta.at("weight_decay").get<double>();
    o.beta1 = meta.at("beta1").get<double>();
    o.beta2 = meta.at("beta2").get<double>();
    o.eps = meta.at("eps").get<double>();
    AdamW opt(o);
    opt.step_ = meta.at("step").get<long>();
    for (const auto& [name, m] : archive.tensors) {
      if (name.rfind(prefix, 0) != 0 || name.size() < prefix.size() + 2) continue;
      const std::string key = name.substr(prefix.size());
      const std::string suffix = key.substr(key.size() - 2);
      const std::string pname = key.substr(0, key.size() - 2);
      if (suffix == ".m") opt.state_[pname].m = m;
      if (suffix == ".v") opt.state_[pname].v = m;
    }
    return opt;
  }

 private:
  struct Moments {
    Matrix m, v;
  };

  Options options_;
  long step_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace partcraft
