#pragma once

#include <string>
#include <vector>

#include "refex/tensor.hpp"

namespace refex {

template <typename S>
struct AdamParams {
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  S weight_decay = S(0);  // decoupled, applied as p -= lr * wd * p
};

// Named view of one learnable tensor and its gradient.
template <typename S>
struct ParamRef {
  std::string name;
  Mat<S>* value = nullptr;
  const Mat<S>* grad = nullptr;
};

template <typename S>
class AdamState {
 public:
  long step_count() const { return t_; }

  // Bias-corrected Adam update. Moment slots are lazily shaped on first use;
  // a non-finite gradient aborts with the offending parameter named.
  void step(const std::vector<ParamRef<S>>& params, const AdamParams<S>& hp) {
    if (slots_.empty()) {
      slots_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        slots_[i].m = Mat<S>::Zero(params[i].value->rows(), params[i].value->cols());
        slots_[i].v = Mat<S>::Zero(params[i].value->rows(), params[i].value->cols());
      }
    }
    if (slots_.size() != params.size()) throw contract_violation("adam_step: parameter count changed");
    ++t_;
    const S bc1 = S(1) - std::pow(hp.beta1, S(t_));
    const S bc2 = S(1) - std::pow(hp.beta2, S(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      const Mat<S>& g = *params[i].grad;
      if (!g.allFinite()) throw numerical_error("adam_step: non-finite gradient in " + params[i].name);
      Slot& s = slots_[i];
      s.m = hp.beta1 * s.m + (S(1) - hp.beta1) * g;
      s.v = hp.beta2 * s.v + (S(1) - hp.beta2) * g.cwiseProduct(g);
      if (hp.weight_decay != S(0)) params[i].value->array() -= hp.lr * hp.weight_decay * params[i].value->array();
      params[i].value->array() -= hp.lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + hp.eps);
    }
  }

 private:
  struct Slot {
    Mat<S> m, v;
  };
  std::vector<Slot> slots_;
  long t_ = 0;
};

}  // namespace refex
