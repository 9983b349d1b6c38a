#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#if defined(__SSE2__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

#include "refex/errors.hpp"
#include "refex/rng.hpp"

namespace refex {

// Saturated attention rows underflow to subnormals, which stall the FPU by
// orders of magnitude. Hot loops flush them to zero; the flag is restored on
// scope exit so verification paths keep full IEEE semantics.
class ScopedDenormalFlush {
 public:
#if defined(__SSE2__)
  ScopedDenormalFlush()
      : ftz_(_MM_GET_FLUSH_ZERO_MODE()), daz_(_MM_GET_DENORMALS_ZERO_MODE()) {
    _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
    _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
  }
  ~ScopedDenormalFlush() {
    _MM_SET_FLUSH_ZERO_MODE(ftz_);
    _MM_SET_DENORMALS_ZERO_MODE(daz_);
  }

 private:
  unsigned int ftz_, daz_;
#else
  ScopedDenormalFlush() = default;
#endif
  ScopedDenormalFlush(const ScopedDenormalFlush&) = delete;
  ScopedDenormalFlush& operator=(const ScopedDenormalFlush&) = delete;
};

// Training runs in float, verification in double; everything numeric is
// templated on the scalar so both share one code path.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

namespace detail {
inline void check_shapes(Eigen::Index ar, Eigen::Index ac, Eigen::Index br, Eigen::Index bc, const char* op) {
  if (ac != br)
    throw contract_violation(std::string(op) + ": shape mismatch (" + std::to_string(ar) + "x" + std::to_string(ac) +
                             ") * (" + std::to_string(br) + "x" + std::to_string(bc) + ")");
}
}  // namespace detail

template <typename S>
Mat<S> matmul(const Mat<S>& a, const Mat<S>& b) {
  detail::check_shapes(a.rows(), a.cols(), b.rows(), b.cols(), "matmul");
  return a * b;
}

// Row-wise softmax with per-row max subtraction.
template <typename S>
Mat<S> softmax_rows(const Mat<S>& scores) {
  Mat<S> p(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const S m = scores.row(i).maxCoeff();
    p.row(i) = (scores.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// dS = P .* (dP - rowwise_dot(dP, P))
template <typename S>
Mat<S> softmax_rows_backward(const Mat<S>& p, const Mat<S>& dp) {
  Mat<S> ds(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const S dot = p.row(i).dot(dp.row(i));
    ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
  }
  return ds;
}

// -log softmax(logits)[target]; optional gradient = softmax(logits) - onehot.
template <typename S>
S cross_entropy(const Eigen::Ref<const Vec<S>>& logits, int target, Vec<S>* dlogits = nullptr) {
  if (target < 0 || target >= logits.size()) throw contract_violation("cross_entropy: target out of range");
  const S m = logits.maxCoeff();
  Vec<S> e = (logits.array() - m).exp();
  const S z = e.sum();
  if (dlogits) {
    *dlogits = e / z;
    (*dlogits)(target) -= S(1);
  }
  return std::log(z) - (logits(target) - m);
}

// --- reverse-mode tape -------------------------------------------------------
//
// Records the closed set of primitives the model needs and replays them in
// exact reverse order on backward(). Node storage is reused across reset()
// calls, so re-recording the same graph every example allocates nothing after
// warmup.

template <typename S>
class Tape {
 public:
  enum class Op : uint8_t {
    input,
    param,
    matmul,      // C = A B
    matmul_ta,   // C = A^T B
    matmul_tb,   // C = A B^T
    add,         // C = A + B, same shape
    add_cols,    // C = A; C[:, start : start+B.cols] += B
    scale,       // C = c A
    softmax_rows,
    sum_cols,    // 1 x count row of column sums over a column segment
    vconcat,     // rows stacked
  };

  void reset() { used_ = 0; }

  int input(const Mat<S>& v) { return leaf(Op::input, v, nullptr).id; }
  int param(const Mat<S>& v, const char* name) { return leaf(Op::param, v, name).id; }

  int matmul(int a, int b) {
    detail::check_shapes(val(a).rows(), val(a).cols(), val(b).rows(), val(b).cols(), "tape.matmul");
    Node& n = push(Op::matmul, a, b);
    n.value.noalias() = val(a) * val(b);
    return n.id;
  }

  // C = A^T B with A: d x m, B: d x n.
  int matmul_ta(int a, int b) {
    detail::check_shapes(val(a).cols(), val(a).rows(), val(b).rows(), val(b).cols(), "tape.matmul_ta");
    Node& n = push(Op::matmul_ta, a, b);
    n.value.noalias() = val(a).transpose() * val(b);
    return n.id;
  }

  // C = A B^T with A: m x d, B: n x d.
  int matmul_tb(int a, int b) {
    detail::check_shapes(val(a).rows(), val(a).cols(), val(b).cols(), val(b).rows(), "tape.matmul_tb");
    Node& n = push(Op::matmul_tb, a, b);
    n.value.noalias() = val(a) * val(b).transpose();
    return n.id;
  }

  int add(int a, int b) {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw contract_violation("tape.add: shape mismatch");
    Node& n = push(Op::add, a, b);
    n.value = val(a) + val(b);
    return n.id;
  }

  int add_cols(int a, int b, int start) {
    if (val(b).rows() != val(a).rows() || start + val(b).cols() > val(a).cols())
      throw contract_violation("tape.add_cols: block out of range");
    Node& n = push(Op::add_cols, a, b);
    n.start = start;
    n.count = static_cast<int>(val(b).cols());
    n.value = val(a);
    n.value.middleCols(start, n.count) += val(b);
    return n.id;
  }

  int scale(int a, S c) {
    Node& n = push(Op::scale, a, -1);
    n.scalar = c;
    n.value = val(a) * c;
    return n.id;
  }

  int softmax_rows(int a) {
    Node& n = push(Op::softmax_rows, a, -1);
    n.value = refex::softmax_rows<S>(val(a));
    return n.id;
  }

  int sum_cols(int a, int start, int count) {
    if (start < 0 || start + count > val(a).cols()) throw contract_violation("tape.sum_cols: segment out of range");
    Node& n = push(Op::sum_cols, a, -1);
    n.start = start;
    n.count = count;
    n.value = val(a).middleCols(start, count).colwise().sum();
    return n.id;
  }

  int vconcat(const std::vector<int>& parts) {
    if (parts.empty()) throw contract_violation("tape.vconcat: no parts");
    if (parts.size() == 1) return parts[0];
    Eigen::Index rows = 0;
    for (int p : parts) rows += val(p).rows();
    Node& n = push(Op::vconcat, -1, -1);
    n.args.assign(parts.begin(), parts.end());
    n.value.resize(rows, val(parts[0]).cols());
    Eigen::Index at = 0;
    for (int p : parts) {
      n.value.middleRows(at, val(p).rows()) = val(p);
      at += val(p).rows();
    }
    return n.id;
  }

  const Mat<S>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Mat<S>& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }

  // Seeds d(out) and walks the recorded ops in reverse.
  void backward(int out, const Mat<S>& seed) {
    if (seed.rows() != val(out).rows() || seed.cols() != val(out).cols())
      throw contract_violation("tape.backward: seed shape mismatch");
    for (int i = 0; i < used_; ++i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      n.grad.setZero(n.value.rows(), n.value.cols());
    }
    nodes_[static_cast<size_t>(out)].grad = seed;

    for (int i = used_ - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      const Mat<S>& g = n.grad;
      switch (n.op) {
        case Op::input:
        case Op::param: break;
        case Op::matmul:
          gref(n.a).noalias() += g * val(n.b).transpose();
          gref(n.b).noalias() += val(n.a).transpose() * g;
          break;
        case Op::matmul_ta:
          gref(n.a).noalias() += val(n.b) * g.transpose();
          gref(n.b).noalias() += val(n.a) * g;
          break;
        case Op::matmul_tb:
          gref(n.a).noalias() += g * val(n.b);
          gref(n.b).noalias() += g.transpose() * val(n.a);
          break;
        case Op::add:
          gref(n.a) += g;
          gref(n.b) += g;
          break;
        case Op::add_cols:
          gref(n.a) += g;
          gref(n.b) += g.middleCols(n.start, n.count);
          break;
        case Op::scale: gref(n.a) += g * n.scalar; break;
        case Op::softmax_rows: gref(n.a) += softmax_rows_backward(n.value, g); break;
        case Op::sum_cols:
          for (int j = 0; j < n.count; ++j) gref(n.a).col(n.start + j).array() += g(0, j);
          break;
        case Op::vconcat: {
          Eigen::Index at = 0;
          for (int p : n.args) {
            gref(p) += g.middleRows(at, val(p).rows());
            at += val(p).rows();
          }
          break;
        }
      }
    }
  }

 private:
  struct Node {
    Op op{};
    int id = -1;
    int a = -1, b = -1;
    int start = 0, count = 0;
    S scalar{};
    std::vector<int> args;
    const char* name = nullptr;
    Mat<S> value, grad;
  };

  Mat<S>& gref(int id) { return nodes_[static_cast<size_t>(id)].grad; }

  Node& push(Op op, int a, int b) {
    if (used_ == static_cast<int>(nodes_.size())) nodes_.emplace_back();
    Node& n = nodes_[static_cast<size_t>(used_)];
    n.op = op;
    n.id = used_++;
    n.a = a;
    n.b = b;
    n.args.clear();
    n.name = nullptr;
    return n;
  }

  Node& leaf(Op op, const Mat<S>& v, const char* name) {
    Node& n = push(op, -1, -1);
    n.value = v;
    n.name = name;
    return n;
  }

  std::vector<Node> nodes_;
  int used_ = 0;
};

// --- finite-difference gradient checking --------------------------------------

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  long coords_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  double max_rel_err = 0.0;
  std::string worst_param;

  bool passed(double tolerance) const { return max_rel_err < tolerance; }
};

// Central differences (h default 1e-5) on a random coordinate sample of each
// parameter against the supplied analytic gradient. Relative error uses a
// small floor so exactly-zero gradients compare cleanly.
inline GradCheckReport grad_check(const std::vector<std::pair<std::string, MatD*>>& params,
                                  const std::vector<std::pair<std::string, const MatD*>>& analytic,
                                  const std::function<double()>& loss_fn, double sample_fraction = 0.1,
                                  uint64_t seed = 0, double h = 1e-5) {
  if (params.size() != analytic.size()) throw contract_violation("grad_check: param/grad list size mismatch");
  GradCheckReport report;
  StreamRng rng(seed, 0xfd);
  for (size_t p = 0; p < params.size(); ++p) {
    MatD& w = *params[p].second;
    const MatD& g = *analytic[p].second;
    if (w.rows() != g.rows() || w.cols() != g.cols())
      throw contract_violation("grad_check: gradient shape mismatch for " + params[p].first);
    GradCheckEntry entry;
    entry.param = params[p].first;
    const long total = static_cast<long>(w.size());
    long want = static_cast<long>(std::ceil(sample_fraction * static_cast<double>(total)));
    want = std::max<long>(1, std::min(want, total));
    for (long s = 0; s < want; ++s) {
      const long idx = static_cast<long>(rng.below(static_cast<uint32_t>(total)));
      double* coeff = w.data() + idx;
      const double saved = *coeff;
      *coeff = saved + h;
      const double up = loss_fn();
      *coeff = saved - h;
      const double down = loss_fn();
      *coeff = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double exact = *(g.data() + idx);
      const double abs_err = std::abs(numeric - exact);
      const double rel = abs_err / std::max({std::abs(numeric), std::abs(exact), 1e-4});
      entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      ++entry.coords_checked;
    }
    if (entry.max_rel_err >= report.max_rel_err) {
      report.max_rel_err = entry.max_rel_err;
      report.worst_param = entry.param;
    }
    report.params.push_back(std::move(entry));
  }
  return report;
}

}  // namespace refex
