#pragma once

#include <string>
#include <vector>

#include "refex/checkpoint.hpp"
#include "refex/interpret.hpp"
#include "refex/model.hpp"

namespace refex {

// Presets own their seeds so a reproduction is one command with no flag
// archaeology.
inline constexpr uint64_t kTable6DataSeed = 1006;
inline constexpr uint64_t kA1DataSeed = 103;
inline constexpr uint64_t kA1TrainSeed = 5;
inline constexpr uint64_t kConstructionDataSeed = 53;

// The modified training distribution: green-square distractors reduced by 75%.
inline constexpr double kModifiedDistractorScale = 0.25;

// Training restarts are ordinary random restarts selected by compositional
// validation accuracy (never by test).
struct RestartOptions {
  int restarts = 4;
  double target_val = 0.9995;  // stop the restart loop once validation clears this
};

struct RestartResult {
  TrainResult result;
  int attempts = 0;
  uint64_t chosen_seed = 0;
};

RestartResult train_with_restarts(const ModelConfig& config, const EmbeddingTable& table, const DatasetBundle& bundle,
                                  const TrainOptions& opts, const RestartOptions& restarts);

// --- Target-accuracy comparison rows ------------------------------------------

struct SplitResult {
  std::string name;       // "R", "A1", ...
  double accuracy = 0.0;
  double paper = 0.0;     // reported value, percent/100
  double lo = 0.0;        // accepted band
  double hi = 1.0;

  bool passed() const { return accuracy >= lo && accuracy <= hi; }
};

struct Table6Row {
  Variant variant = Variant::two_attr;
  int layers = 1;
  std::vector<SplitResult> results;
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val = 0.0;
  int attempts = 0;

  bool passed() const {
    for (const auto& r : results)
      if (!r.passed()) return false;
    return !results.empty();
  }
};

// Trains one Table-6 configuration at the modified distribution and evaluates
// every applicable split. Artifacts (best.ckpt, log.csv, row.json) land in
// `artifact_dir`; when row.json already exists there the cached row is
// returned instead of retraining.
Table6Row run_table6_row(Variant variant, int layers, const std::string& artifact_dir, int threads);

std::vector<Table6Row> reproduce_table6(const std::string& out_dir, int threads);
std::string table6_markdown(const std::vector<Table6Row>& rows);
std::string table6_csv(const std::vector<Table6Row>& rows);

// --- distractor-frequency intervention ----------------------------------------

struct A1DistractorReport {
  double accuracy_full = 0.0;     // A1 accuracy trained at scale 1.0
  double accuracy_reduced = 0.0;  // A1 accuracy trained at scale 0.25
  double random_reduced = 0.0;
  bool passed() const { return accuracy_reduced >= 0.995 && accuracy_reduced > accuracy_full; }
};

A1DistractorReport reproduce_a1_distractor(const std::string& out_dir, int threads);

// --- explicit construction validation ------------------------------------------

struct ConstructionReport {
  struct VariantResult {
    Variant variant;
    std::vector<SplitResult> results;  // lo = hi = 1.0: exact perfection required
    bool passed() const {
      for (const auto& r : results)
        if (r.accuracy != 1.0) return false;
      return !results.empty();
    }
  };
  std::vector<VariantResult> variants;
  bool passed() const {
    for (const auto& v : variants)
      if (!v.passed()) return false;
    return !variants.empty();
  }
};

ConstructionReport reproduce_construction(const std::string& out_dir, int threads);

// JSON round-trip for row caching and reports.
std::string table6_row_to_json(const Table6Row& row);
Table6Row table6_row_from_json(const std::string& json);

}  // namespace refex
