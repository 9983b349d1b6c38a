#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "refex/datagen.hpp"
#include "refex/domain.hpp"
#include "refex/optim.hpp"
#include "refex/tensor.hpp"

namespace refex {

// --- fixed sparse embeddings ---------------------------------------------
//
// Command tokens are one-hot on command-attribute dimensions; a grid-object
// token is the sum of its world-attribute indicators; the empty token puts
// the same total mass (2 or 3) on a dedicated dimension so <1, x> is uniform
// across every grid slot.
class EmbeddingTable {
 public:
  static EmbeddingTable make(Variant variant);

  Variant variant() const { return variant_; }
  int d_model() const { return static_cast<int>(e_.rows()); }
  int vocab_size() const { return static_cast<int>(e_.cols()); }
  int command_slots() const { return command_slots_; }
  int seq_len() const { return command_slots_ + kGridCells; }
  int grid_token_sum() const { return grid_token_sum_; }  // <1, x> on grid tokens: 2 or 3

  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::string>& dims() const { return dims_; }
  const MatD& matrix() const { return e_; }
  const MatF& matrix_f() const { return ef_; }

  int token_id(const std::string& token) const;  // contract violation on unknown token
  int object_token_id(const WorldObject& obj) const;
  int empty_id() const { return empty_id_; }
  int grid_token_begin() const { return grid_begin_; }  // object tokens + empty live at ids >= this
  bool is_command_token(int id) const { return id < grid_begin_; }

  // Command tokens first (padded template for three-attr-rel), then the 36
  // grid slots in cell order, each its object token or the empty token.
  std::vector<int> encode(const Example& example) const;

  template <typename S>
  const Mat<S>& matrix_as() const {
    if constexpr (std::is_same_v<S, float>)
      return ef_;
    else
      return e_;
  }

 private:
  Variant variant_{};
  int command_slots_ = 0;
  int grid_begin_ = 0;
  int empty_id_ = 0;
  int grid_token_sum_ = 0;
  std::vector<std::string> tokens_;
  std::vector<std::string> dims_;
  std::map<std::string, int> ids_;
  MatD e_;
  MatF ef_;
};

// --- model ------------------------------------------------------------------

struct ModelConfig {
  Variant variant = Variant::two_attr;
  int layers = 1;
  int heads = 1;
  int d_qk = 0;  // 0 means d_model
  bool scale_scores = false;

  bool use_positional() const { return variant == Variant::three_attr_rel; }
  int effective_d_qk(const EmbeddingTable& table) const { return d_qk > 0 ? d_qk : table.d_model(); }
  void validate() const;
};

template <typename S>
struct AttentionHead {
  Mat<S> w_q, w_k, w_v;  // d_qk x d_model
};

template <typename S>
struct AttentionLayer {
  std::vector<AttentionHead<S>> heads;
  Mat<S> w_o;  // d_model x heads*d_qk
};

// Q/K/V/O per layer plus the positional table are the only learnable state.
template <typename S>
struct ModelWeights {
  ModelConfig config;
  std::vector<AttentionLayer<S>> layers;
  Mat<S> pos;  // d_model x 8, command slots only; 0x0 when unused

  template <typename T>
  ModelWeights<T> cast() const {
    ModelWeights<T> out;
    out.config = config;
    out.layers.reserve(layers.size());
    for (const auto& layer : layers) {
      AttentionLayer<T> l;
      for (const auto& h : layer.heads) l.heads.push_back({h.w_q.template cast<T>(), h.w_k.template cast<T>(), h.w_v.template cast<T>()});
      l.w_o = layer.w_o.template cast<T>();
      out.layers.push_back(std::move(l));
    }
    out.pos = pos.template cast<T>();
    return out;
  }
};

template <typename S>
ModelWeights<S> zero_weights(const ModelConfig& config, const EmbeddingTable& table) {
  ModelWeights<S> w;
  w.config = config;
  const int d = table.d_model();
  const int dqk = config.effective_d_qk(table);
  for (int l = 0; l < config.layers; ++l) {
    AttentionLayer<S> layer;
    for (int h = 0; h < config.heads; ++h)
      layer.heads.push_back({Mat<S>::Zero(dqk, d), Mat<S>::Zero(dqk, d), Mat<S>::Zero(dqk, d)});
    layer.w_o = Mat<S>::Zero(d, config.heads * dqk);
    w.layers.push_back(std::move(layer));
  }
  if (config.use_positional()) w.pos = Mat<S>::Zero(d, kRelCommandSlots);
  return w;
}

template <typename S>
ModelWeights<S> init_weights(const ModelConfig& config, const EmbeddingTable& table, uint64_t seed,
                             double init_std = 0.1) {
  ModelWeights<S> w = zero_weights<S>(config, table);
  uint64_t stream = 0;
  const auto fill = [&](Mat<S>& m) {
    StreamRng rng(seed, 0xabc0 + stream++);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<S>(rng.gauss() * init_std);
  };
  for (auto& layer : w.layers) {
    for (auto& h : layer.heads) {
      fill(h.w_q);
      fill(h.w_k);
      fill(h.w_v);
    }
    fill(layer.w_o);
  }
  if (w.pos.size() > 0) fill(w.pos);
  return w;
}

// Canonical parameter order: per layer its heads' w_q/w_k/w_v, then w_o;
// positional table last. Checkpoints, Adam and grad checks all follow it.
template <typename S, typename Fn>
void for_each_param(ModelWeights<S>& w, Fn&& fn) {
  for (size_t l = 0; l < w.layers.size(); ++l) {
    for (size_t h = 0; h < w.layers[l].heads.size(); ++h) {
      const std::string base = "l" + std::to_string(l) + ".h" + std::to_string(h) + ".";
      fn(base + "w_q", w.layers[l].heads[h].w_q);
      fn(base + "w_k", w.layers[l].heads[h].w_k);
      fn(base + "w_v", w.layers[l].heads[h].w_v);
    }
    fn("l" + std::to_string(l) + ".w_o", w.layers[l].w_o);
  }
  if (w.pos.size() > 0) fn(std::string("pos"), w.pos);
}

template <typename S, typename Fn>
void for_each_param(const ModelWeights<S>& w, Fn&& fn) {
  for_each_param(const_cast<ModelWeights<S>&>(w), [&](const std::string& name, Mat<S>& m) {
    fn(name, static_cast<const Mat<S>&>(m));
  });
}

// --- forward ------------------------------------------------------------------

template <typename S>
struct ForwardTrace {
  Mat<S> x0;                              // d x n token embeddings (positional included)
  std::vector<std::vector<Mat<S>>> attn;  // [layer][head] n x n row-stochastic maps
  std::vector<Mat<S>> residuals;          // [layer] d x n streams after each block
  Vec<S> logits;                          // 36
};

int predict_from_logits(std::span<const float> logits);
int predict_from_logits(std::span<const double> logits);

template <typename S>
Vec<S> forward(const ModelWeights<S>& w, const EmbeddingTable& table, std::span<const int> tokens,
               ForwardTrace<S>* trace = nullptr);

// --- batched loss + gradients ---------------------------------------------------

struct EncodedExample {
  std::vector<int> tokens;
  int target = -1;
};

std::vector<EncodedExample> encode_dataset(const EmbeddingTable& table, std::span<const Example> examples);

template <typename S>
S loss_and_grads(const ModelWeights<S>& w, const EmbeddingTable& table, std::span<const EncodedExample> batch,
                 ModelWeights<S>& grads, int threads = 1);

template <typename S>
S loss_and_grads(const ModelWeights<S>& w, const EmbeddingTable& table, std::span<const Example> batch,
                 ModelWeights<S>& grads, int threads = 1) {
  const auto encoded = encode_dataset(table, batch);
  return loss_and_grads<S>(w, table, std::span<const EncodedExample>(encoded), grads, threads);
}

// Mean cross-entropy only (no gradients); the probe function for grad checks.
double batch_loss(const ModelWeights<double>& w, const EmbeddingTable& table, std::span<const EncodedExample> batch);

// Central-difference check of loss_and_grads over every learnable tensor,
// in double precision.
GradCheckReport model_grad_check(ModelWeights<double>& w, const EmbeddingTable& table,
                                 std::span<const Example> batch, double sample_fraction = 0.1, uint64_t seed = 0);

// --- evaluation -----------------------------------------------------------------

struct ErrorCase {
  long index = 0;
  int predicted = -1;
  int target = -1;
};

struct TagScore {
  long correct = 0;
  long count = 0;
  double accuracy() const { return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count); }
};

struct EvalReport {
  long count = 0;
  long correct = 0;
  double accuracy = 0.0;
  std::map<SplitTag, TagScore> by_tag;
  std::vector<ErrorCase> errors;
};

EvalReport evaluate_predictions(std::span<const int> predictions, std::span<const Example> examples);
std::vector<int> predict_all(const ModelWeights<float>& w, const EmbeddingTable& table,
                             std::span<const Example> examples, int threads = 1);
EvalReport evaluate(const ModelWeights<float>& w, const EmbeddingTable& table, std::span<const Example> examples,
                    int threads = 1);

// --- training --------------------------------------------------------------------

struct TrainOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 128;
  int max_epochs = 60;
  int patience = 10;  // epochs without compositional-val improvement before stopping
  double init_std = 0.1;
  uint64_t seed = 0;
  int threads = 1;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_random = 0.0;
  std::map<SplitTag, double> val_splits;
  double val_compositional = 0.0;
};

struct TrainResult {
  ModelWeights<float> weights;  // best-compositional-val snapshot
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val = 0.0;
};

TrainResult train(const ModelConfig& config, const EmbeddingTable& table, const DatasetBundle& bundle,
                  const TrainOptions& opts);

// CSV log: epoch,loss,val_random,val_A1,val_A2,val_A3,val_A4 (blank when n/a).
std::string training_log_csv(const std::vector<EpochLog>& log, Variant variant);

// --- template implementations ----------------------------------------------------

template <typename S>
Vec<S> forward(const ModelWeights<S>& w, const EmbeddingTable& table, std::span<const int> tokens,
               ForwardTrace<S>* trace) {
  const int n = table.seq_len();
  if (static_cast<int>(tokens.size()) != n) throw contract_violation("forward: token sequence length mismatch");
  const int d = table.d_model();
  const Mat<S>& e = table.matrix_as<S>();

  Mat<S> x(d, n);
  for (int i = 0; i < n; ++i) x.col(i) = e.col(tokens[static_cast<size_t>(i)]);
  if (w.pos.size() > 0) x.middleCols(0, table.command_slots()) += w.pos;

  if (trace) {
    trace->x0 = x;
    trace->attn.assign(w.layers.size(), {});
    trace->residuals.clear();
  }

  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(w.config.effective_d_qk(table)));
  Mat<S> concat(static_cast<int>(w.layers.empty() ? 0 : w.layers[0].heads.size()) * w.config.effective_d_qk(table), n);
  for (size_t l = 0; l < w.layers.size(); ++l) {
    const auto& layer = w.layers[l];
    const int dqk = static_cast<int>(layer.heads[0].w_q.rows());
    concat.resize(static_cast<Eigen::Index>(layer.heads.size()) * dqk, n);
    for (size_t h = 0; h < layer.heads.size(); ++h) {
      const auto& head = layer.heads[h];
      Mat<S> q = head.w_q * x;
      Mat<S> k = head.w_k * x;
      Mat<S> v = head.w_v * x;
      Mat<S> scores = q.transpose() * k;
      if (w.config.scale_scores) scores *= inv_sqrt;
      Mat<S> attn = softmax_rows<S>(scores);
      concat.middleRows(static_cast<Eigen::Index>(h) * dqk, dqk).noalias() = v * attn.transpose();
      if (trace) trace->attn[l].push_back(std::move(attn));
    }
    x += layer.w_o * concat;
    if (!x.allFinite())
      throw numerical_error("forward: non-finite activation in layer " + std::to_string(l));
    if (trace) trace->residuals.push_back(x);
  }

  Vec<S> logits = x.middleCols(table.command_slots(), kGridCells).colwise().sum().transpose();
  if (trace) trace->logits = logits;
  return logits;
}

namespace detail {

// Tape-recorded forward + cross-entropy for one example; gradients accumulate
// into `grads`. Returns the loss.
template <typename S>
S backprop_example(Tape<S>& tape, const ModelWeights<S>& w, const EmbeddingTable& table, const EncodedExample& ex,
                   ModelWeights<S>& grads) {
  tape.reset();
  const int n = table.seq_len();
  const int d = table.d_model();
  const Mat<S>& e = table.matrix_as<S>();

  Mat<S> x0(d, n);
  for (int i = 0; i < n; ++i) x0.col(i) = e.col(ex.tokens[static_cast<size_t>(i)]);

  int x = tape.input(x0);
  int pos_id = -1;
  if (w.pos.size() > 0) {
    pos_id = tape.param(w.pos, "pos");
    x = tape.add_cols(x, pos_id, 0);
  }

  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(w.config.effective_d_qk(table)));
  std::vector<std::vector<std::array<int, 3>>> head_ids(w.layers.size());
  std::vector<int> wo_ids(w.layers.size());

  for (size_t l = 0; l < w.layers.size(); ++l) {
    const auto& layer = w.layers[l];
    std::vector<int> outs;
    for (size_t h = 0; h < layer.heads.size(); ++h) {
      const auto& head = layer.heads[h];
      const int wq = tape.param(head.w_q, "w_q");
      const int wk = tape.param(head.w_k, "w_k");
      const int wv = tape.param(head.w_v, "w_v");
      head_ids[l].push_back({wq, wk, wv});
      const int q = tape.matmul(wq, x);
      const int k = tape.matmul(wk, x);
      const int v = tape.matmul(wv, x);
      int scores = tape.matmul_ta(q, k);
      if (w.config.scale_scores) scores = tape.scale(scores, inv_sqrt);
      const int attn = tape.softmax_rows(scores);
      outs.push_back(tape.matmul_tb(v, attn));
    }
    const int cat = tape.vconcat(outs);
    const int wo = tape.param(layer.w_o, "w_o");
    wo_ids[l] = wo;
    x = tape.add(x, tape.matmul(wo, cat));
  }

  const int logits_id = tape.sum_cols(x, table.command_slots(), kGridCells);
  Vec<S> logits = tape.val(logits_id).transpose();
  Vec<S> dlogits;
  const S loss = cross_entropy<S>(logits, ex.target, &dlogits);
  tape.backward(logits_id, dlogits.transpose());

  for (size_t l = 0; l < w.layers.size(); ++l) {
    for (size_t h = 0; h < w.layers[l].heads.size(); ++h) {
      grads.layers[l].heads[h].w_q += tape.grad(head_ids[l][h][0]);
      grads.layers[l].heads[h].w_k += tape.grad(head_ids[l][h][1]);
      grads.layers[l].heads[h].w_v += tape.grad(head_ids[l][h][2]);
    }
    grads.layers[l].w_o += tape.grad(wo_ids[l]);
  }
  if (pos_id >= 0) grads.pos += tape.grad(pos_id);
  return loss;
}

}  // namespace detail

// True when g mirrors w tensor-for-tensor (names and shapes).
template <typename S>
bool same_param_shapes(const ModelWeights<S>& w, const ModelWeights<S>& g) {
  std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> a, b;
  for_each_param(w, [&](const std::string& n, const Mat<S>& m) { a.push_back({n, {m.rows(), m.cols()}}); });
  for_each_param(g, [&](const std::string& n, const Mat<S>& m) { b.push_back({n, {m.rows(), m.cols()}}); });
  return a == b;
}

// Mean cross-entropy over the batch with gradients for every learnable
// tensor. Sharding is by fixed index ranges and shard gradients are reduced
// in shard order, so output is reproducible bit-for-bit at a fixed thread
// count. An already-shaped `grads` is zeroed in place, keeping its storage
// (and any outstanding ParamRef pointers) valid.
template <typename S>
S loss_and_grads(const ModelWeights<S>& w, const EmbeddingTable& table, std::span<const EncodedExample> batch,
                 ModelWeights<S>& grads, int threads) {
  if (batch.empty()) throw contract_violation("loss_and_grads: empty batch");
  if (same_param_shapes(w, grads)) {
    for_each_param(grads, [](const std::string&, Mat<S>& m) { m.setZero(); });
    grads.config = w.config;
  } else {
    grads = zero_weights<S>(w.config, table);
  }

  const int t = std::max(1, std::min<int>(threads, static_cast<int>(batch.size())));
  std::vector<ModelWeights<S>> shard_grads(static_cast<size_t>(t));
  std::vector<S> shard_loss(static_cast<size_t>(t), S(0));

  const auto run_shard = [&](int shard) {
    const ScopedDenormalFlush ftz;
    const size_t lo = batch.size() * static_cast<size_t>(shard) / static_cast<size_t>(t);
    const size_t hi = batch.size() * static_cast<size_t>(shard + 1) / static_cast<size_t>(t);
    ModelWeights<S>& g = shard_grads[static_cast<size_t>(shard)];
    g = zero_weights<S>(w.config, table);
    Tape<S> tape;
    S loss = S(0);
    for (size_t i = lo; i < hi; ++i) loss += detail::backprop_example(tape, w, table, batch[i], g);
    shard_loss[static_cast<size_t>(shard)] = loss;
  };

  if (t == 1) {
    run_shard(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(t - 1));
    for (int shard = 1; shard < t; ++shard) pool.emplace_back(run_shard, shard);
    run_shard(0);
    for (auto& th : pool) th.join();
  }

  S loss = S(0);
  const S inv = S(1) / static_cast<S>(batch.size());
  for (int shard = 0; shard < t; ++shard) {
    loss += shard_loss[static_cast<size_t>(shard)];
    ModelWeights<S>& g = shard_grads[static_cast<size_t>(shard)];
    for (size_t l = 0; l < grads.layers.size(); ++l) {
      for (size_t h = 0; h < grads.layers[l].heads.size(); ++h) {
        grads.layers[l].heads[h].w_q += g.layers[l].heads[h].w_q;
        grads.layers[l].heads[h].w_k += g.layers[l].heads[h].w_k;
        grads.layers[l].heads[h].w_v += g.layers[l].heads[h].w_v;
      }
      grads.layers[l].w_o += g.layers[l].w_o;
    }
    if (grads.pos.size() > 0) grads.pos += g.pos;
  }
  for_each_param(grads, [&](const std::string&, Mat<S>& m) { m *= inv; });
  return loss * inv;
}

}  // namespace refex
