#include "refex/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace refex {

namespace {

const char* color_names[] = {"red", "green", "blue"};
const char* shape_names[] = {"square", "circle", "cylinder"};

}  // namespace

EmbeddingTable EmbeddingTable::make(Variant variant) {
  EmbeddingTable t;
  t.variant_ = variant;

  // dimension layout
  std::vector<std::string>& dims = t.dims_;
  const bool has_size = variant != Variant::two_attr;
  const bool rel = variant == Variant::three_attr_rel;
  int cmd_size_at = -1, cmd_color_at = -1, cmd_shape_at = -1;
  int same_at = -1, rel_kind_at = -1, pad_at = -1;
  int world_size_at = -1, world_color_at = -1, world_shape_at = -1, empty_at = -1;

  if (has_size) {
    cmd_size_at = static_cast<int>(dims.size());
    dims.push_back("small");
    dims.push_back("big");
  }
  cmd_color_at = static_cast<int>(dims.size());
  for (const char* c : color_names) dims.push_back(c);
  cmd_shape_at = static_cast<int>(dims.size());
  for (const char* s : shape_names) dims.push_back(s);
  if (rel) {
    same_at = static_cast<int>(dims.size());
    dims.push_back("same");
    rel_kind_at = static_cast<int>(dims.size());
    dims.push_back("rel_size");
    dims.push_back("rel_color");
    dims.push_back("rel_shape");
    pad_at = static_cast<int>(dims.size());
    dims.push_back("pad");
  }
  if (has_size) {
    world_size_at = static_cast<int>(dims.size());
    for (int k = kMinSize; k <= kMaxSize; ++k) dims.push_back("world_size_" + std::to_string(k));
  }
  world_color_at = static_cast<int>(dims.size());
  for (const char* c : color_names) dims.push_back(std::string("world_") + c);
  world_shape_at = static_cast<int>(dims.size());
  for (const char* s : shape_names) dims.push_back(std::string("world_") + s);
  empty_at = static_cast<int>(dims.size());
  dims.push_back("empty");

  const int d = static_cast<int>(dims.size());
  t.grid_token_sum_ = has_size ? 3 : 2;

  // vocabulary: command tokens, then grid-object tokens, then empty
  std::vector<std::pair<std::string, std::vector<std::pair<int, double>>>> cols;
  if (has_size) {
    cols.push_back({"small", {{cmd_size_at, 1.0}}});
    cols.push_back({"big", {{cmd_size_at + 1, 1.0}}});
  }
  for (int c = 0; c < kNumColors; ++c) cols.push_back({color_names[c], {{cmd_color_at + c, 1.0}}});
  for (int s = 0; s < kNumShapes; ++s) cols.push_back({shape_names[s], {{cmd_shape_at + s, 1.0}}});
  if (rel) {
    cols.push_back({"same", {{same_at, 1.0}}});
    cols.push_back({"size", {{rel_kind_at, 1.0}}});
    cols.push_back({"color", {{rel_kind_at + 1, 1.0}}});
    cols.push_back({"shape", {{rel_kind_at + 2, 1.0}}});
    cols.push_back({kPadToken, {{pad_at, 1.0}}});
  }

  t.grid_begin_ = static_cast<int>(cols.size());
  t.command_slots_ = rel ? kRelCommandSlots : (has_size ? 3 : 2);

  const auto add_object_cols = [&](std::optional<int> size) {
    for (int c = 0; c < kNumColors; ++c) {
      for (int s = 0; s < kNumShapes; ++s) {
        WorldObject obj{static_cast<Color>(c), static_cast<Shape>(s), size};
        std::vector<std::pair<int, double>> entries{{world_color_at + c, 1.0}, {world_shape_at + s, 1.0}};
        if (size) entries.push_back({world_size_at + (*size - kMinSize), 1.0});
        cols.push_back({object_token(obj), std::move(entries)});
      }
    }
  };
  if (has_size) {
    for (int k = kMinSize; k <= kMaxSize; ++k) add_object_cols(k);
  } else {
    add_object_cols(std::nullopt);
  }

  t.empty_id_ = static_cast<int>(cols.size());
  cols.push_back({"empty", {{empty_at, static_cast<double>(t.grid_token_sum_)}}});

  t.e_ = MatD::Zero(d, static_cast<Eigen::Index>(cols.size()));
  for (size_t j = 0; j < cols.size(); ++j) {
    t.tokens_.push_back(cols[j].first);
    t.ids_[cols[j].first] = static_cast<int>(j);
    for (const auto& [row, v] : cols[j].second) t.e_(row, static_cast<Eigen::Index>(j)) = v;
  }
  t.ef_ = t.e_.cast<float>();
  return t;
}

int EmbeddingTable::token_id(const std::string& token) const {
  const auto it = ids_.find(token);
  if (it == ids_.end()) throw contract_violation("unknown token '" + token + "' for variant " + to_string(variant_));
  return it->second;
}

int EmbeddingTable::object_token_id(const WorldObject& obj) const { return token_id(object_token(obj)); }

std::vector<int> EmbeddingTable::encode(const Example& example) const {
  if (example.world.variant != variant_)
    throw contract_violation("encode: example variant " + to_string(example.world.variant) +
                             " does not match table variant " + to_string(variant_));
  std::vector<int> out;
  out.reserve(static_cast<size_t>(seq_len()));
  for (const std::string& tok : command_tokens(example.command)) out.push_back(token_id(tok));
  for (int cell = 0; cell < kGridCells; ++cell) {
    const auto it = example.world.cells.find(cell);
    out.push_back(it == example.world.cells.end() ? empty_id_ : object_token_id(it->second));
  }
  return out;
}

void ModelConfig::validate() const {
  if (layers < 1 || layers > 2) throw config_error("model: layers must be 1 or 2");
  if (heads < 1) throw config_error("model: heads must be at least 1");
  if (d_qk < 0) throw config_error("model: d_qk must be positive (or 0 for d_model)");
}

int predict_from_logits(std::span<const float> logits) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(logits.size()); ++i)
    if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
  return best;
}

int predict_from_logits(std::span<const double> logits) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(logits.size()); ++i)
    if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(best)]) best = i;
  return best;
}

std::vector<EncodedExample> encode_dataset(const EmbeddingTable& table, std::span<const Example> examples) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const Example& ex : examples) out.push_back({table.encode(ex), ex.target});
  return out;
}

double batch_loss(const ModelWeights<double>& w, const EmbeddingTable& table, std::span<const EncodedExample> batch) {
  if (batch.empty()) throw contract_violation("batch_loss: empty batch");
  double sum = 0.0;
  for (const EncodedExample& ex : batch) {
    const VecD logits = forward<double>(w, table, ex.tokens);
    sum += cross_entropy<double>(logits, ex.target);
  }
  return sum / static_cast<double>(batch.size());
}

GradCheckReport model_grad_check(ModelWeights<double>& w, const EmbeddingTable& table, std::span<const Example> batch,
                                 double sample_fraction, uint64_t seed) {
  const auto encoded = encode_dataset(table, batch);
  ModelWeights<double> grads = zero_weights<double>(w.config, table);
  (void)loss_and_grads<double>(w, table, encoded, grads, 1);

  std::vector<std::pair<std::string, MatD*>> params;
  std::vector<std::pair<std::string, const MatD*>> analytic;
  for_each_param(w, [&](const std::string& name, MatD& m) { params.push_back({name, &m}); });
  for_each_param(grads, [&](const std::string& name, MatD& m) {
    analytic.push_back({name, static_cast<const MatD*>(&m)});
  });
  const auto loss_fn = [&]() { return batch_loss(w, table, encoded); };
  return grad_check(params, analytic, loss_fn, sample_fraction, seed);
}

EvalReport evaluate_predictions(std::span<const int> predictions, std::span<const Example> examples) {
  if (predictions.size() != examples.size()) throw contract_violation("evaluate: prediction count mismatch");
  EvalReport r;
  r.count = static_cast<long>(examples.size());
  for (size_t i = 0; i < examples.size(); ++i) {
    const bool hit = predictions[i] == examples[i].target;
    if (hit)
      ++r.correct;
    else
      r.errors.push_back({static_cast<long>(i), predictions[i], examples[i].target});
    for (SplitTag t : examples[i].tags) {
      auto& score = r.by_tag[t];
      ++score.count;
      if (hit) ++score.correct;
    }
  }
  r.accuracy = r.count == 0 ? 0.0 : static_cast<double>(r.correct) / static_cast<double>(r.count);
  return r;
}

std::vector<int> predict_all(const ModelWeights<float>& w, const EmbeddingTable& table,
                             std::span<const Example> examples, int threads) {
  std::vector<int> preds(examples.size(), -1);
  const int t = std::max(1, std::min<int>(threads, static_cast<int>(std::max<size_t>(1, examples.size()))));
  const auto run_shard = [&](int shard) {
    const ScopedDenormalFlush ftz;
    const size_t lo = examples.size() * static_cast<size_t>(shard) / static_cast<size_t>(t);
    const size_t hi = examples.size() * static_cast<size_t>(shard + 1) / static_cast<size_t>(t);
    for (size_t i = lo; i < hi; ++i) {
      const auto tokens = table.encode(examples[i]);
      const VecF logits = forward<float>(w, table, tokens);
      preds[i] = predict_from_logits(std::span<const float>(logits.data(), static_cast<size_t>(logits.size())));
    }
  };
  if (t == 1) {
    run_shard(0);
  } else {
    std::vector<std::thread> pool;
    for (int shard = 1; shard < t; ++shard) pool.emplace_back(run_shard, shard);
    run_shard(0);
    for (auto& th : pool) th.join();
  }
  return preds;
}

EvalReport evaluate(const ModelWeights<float>& w, const EmbeddingTable& table, std::span<const Example> examples,
                    int threads) {
  return evaluate_predictions(predict_all(w, table, examples, threads), examples);
}

namespace {

// Validation metrics over the unrestricted val draw. The per-split subsets
// mirror the split-test definition: only examples carrying exactly that
// held-out tag count, so one broken pattern cannot pollute another split's
// reading.
struct ValMetrics {
  double random = 0.0;
  std::map<SplitTag, double> splits;
  double compositional = 0.0;
};

ValMetrics val_metrics(const ModelWeights<float>& w, const EmbeddingTable& table, std::span<const Example> val,
                       const std::set<SplitTag>& holdout, int threads) {
  const std::vector<int> preds = predict_all(w, table, val, threads);
  ValMetrics m;
  long correct = 0;
  std::map<SplitTag, std::pair<long, long>> per_tag;
  for (size_t i = 0; i < val.size(); ++i) {
    const bool hit = preds[i] == val[i].target;
    if (hit) ++correct;
    SplitTag only{};
    int held = 0;
    for (SplitTag t : holdout) {
      if (val[i].tags.contains(t)) {
        only = t;
        ++held;
      }
    }
    if (held == 1) {
      auto& [c, n] = per_tag[only];
      ++n;
      if (hit) ++c;
    }
  }
  m.random = val.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(val.size());
  double sum = 0.0;
  int n = 0;
  for (const auto& [tag, cn] : per_tag) {
    if (cn.second == 0) continue;
    m.splits[tag] = static_cast<double>(cn.first) / static_cast<double>(cn.second);
    sum += m.splits[tag];
    ++n;
  }
  m.compositional = n == 0 ? m.random : sum / n;
  return m;
}

}  // namespace

TrainResult train(const ModelConfig& config, const EmbeddingTable& table, const DatasetBundle& bundle,
                  const TrainOptions& opts) {
  config.validate();
  if (bundle.spec.variant != config.variant)
    throw contract_violation("train: bundle variant does not match model variant");
  if (bundle.train.empty() || bundle.val.empty()) throw contract_violation("train: empty train or val set");

  const auto encoded = encode_dataset(table, bundle.train);
  ModelWeights<float> weights = init_weights<float>(config, table, opts.seed, opts.init_std);

  AdamState<float> adam;
  const AdamParams<float> hp{static_cast<float>(opts.lr), static_cast<float>(opts.beta1),
                             static_cast<float>(opts.beta2), static_cast<float>(opts.eps)};

  ModelWeights<float> grads = zero_weights<float>(config, table);
  std::vector<ParamRef<float>> refs;
  {
    std::vector<std::pair<std::string, Mat<float>*>> gptrs;
    for_each_param(grads, [&](const std::string& name, Mat<float>& m) { gptrs.push_back({name, &m}); });
    size_t i = 0;
    for_each_param(weights, [&](const std::string& name, Mat<float>& m) {
      refs.push_back({name, &m, gptrs[i++].second});
    });
  }

  TrainResult result;
  result.best_val = -1.0;
  const size_t n_train = encoded.size();
  std::vector<uint32_t> order(n_train);

  for (int epoch = 1; epoch <= opts.max_epochs; ++epoch) {
    // deterministic shuffle keyed by (seed, epoch)
    StreamRng shuffle_rng(opts.seed, 0x5f00000 + static_cast<uint64_t>(epoch));
    for (size_t i = 0; i < n_train; ++i) order[i] = static_cast<uint32_t>(i);
    for (size_t i = n_train; i > 1; --i) {
      const size_t j = shuffle_rng.below(static_cast<uint32_t>(i));
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    long steps = 0;
    std::vector<EncodedExample> batch;
    batch.reserve(static_cast<size_t>(opts.batch_size));
    for (size_t at = 0; at < n_train; at += static_cast<size_t>(opts.batch_size)) {
      const size_t end = std::min(n_train, at + static_cast<size_t>(opts.batch_size));
      batch.clear();
      for (size_t i = at; i < end; ++i) batch.push_back(encoded[order[i]]);
      const float loss = loss_and_grads<float>(weights, table, batch, grads, opts.threads);
      if (!std::isfinite(loss))
        throw numerical_error("train: loss diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(steps));
      adam.step(refs, hp);
      loss_sum += loss;
      ++steps;
    }

    const ValMetrics val = val_metrics(weights, table, bundle.val, bundle.spec.holdout, opts.threads);
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(std::max<long>(1, steps));
    log.val_random = val.random;
    log.val_splits = val.splits;
    log.val_compositional = val.compositional;
    result.log.push_back(log);

    if (log.val_compositional > result.best_val) {
      result.best_val = log.val_compositional;
      result.best_epoch = epoch;
      result.weights = weights;
    } else if (epoch - result.best_epoch >= opts.patience) {
      break;
    }
  }
  if (result.best_epoch == 0) {
    result.weights = weights;  // never evaluated better than -1: keep last
    result.best_epoch = static_cast<int>(result.log.size());
  }
  return result;
}

std::string training_log_csv(const std::vector<EpochLog>& log, Variant) {
  std::ostringstream out;
  out << "epoch,loss,val_random";
  for (SplitTag t : {SplitTag::A1, SplitTag::A2, SplitTag::A3, SplitTag::A4}) out << ",val_" << to_string(t);
  out << "\n";
  out.precision(9);
  for (const EpochLog& e : log) {
    out << e.epoch << "," << e.train_loss << "," << e.val_random;
    for (SplitTag t : {SplitTag::A1, SplitTag::A2, SplitTag::A3, SplitTag::A4}) {
      out << ",";
      const auto it = e.val_splits.find(t);
      if (it != e.val_splits.end()) out << it->second;
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace refex
