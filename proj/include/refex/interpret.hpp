#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "refex/model.hpp"

namespace refex {

// Vocabulary-level query-key table: m(a, b) = <W_Q E[:,a], W_K E[:,b]>.
// Rows are queries, columns are keys.
struct VocabMatrix {
  MatD m;
  std::vector<std::string> labels;
  int layer = 0;
  int head = 0;
};

// Zero positional offset by default; pass query_slot/key_slot >= 0 to add the
// positional column for that command slot (three-attr-rel only).
VocabMatrix extract_M(const ModelWeights<double>& w, const EmbeddingTable& table, int layer = 0, int head = 0,
                      int query_slot = -1, int key_slot = -1);

// Per-token scalar s[t] = <1, W_o W_V E[:,t]> for one layer; head < 0 sums
// all heads of the layer (the value entering the logit identity). Multi-layer
// models get a per-layer reading, which only approximates their computation.
VecD extract_s(const ModelWeights<double>& w, const EmbeddingTable& table, int layer = 0, int head = -1);

// +1 when the command-token entries of s are non-negative on average, else
// -1. Runs that converge to negative s flip the reading of M jointly.
double command_s_sign(const VecD& s, const EmbeddingTable& table);

// --- logit decomposition -----------------------------------------------------

struct DecompositionRow {
  int position = 0;  // key index in the token sequence
  int head = 0;
  std::string token;
  double alpha = 0.0;
  double s = 0.0;
  double summand = 0.0;  // alpha * s
  bool is_command = false;
};

struct CellDecomposition {
  int cell = 0;
  std::string token;
  double baseline = 0.0;  // <1, x_i>
  std::vector<DecompositionRow> rows;
  double total = 0.0;  // baseline + sum of summands; equals logit to 1e-5
  double logit = 0.0;
  int large_command_summands = 0;
  std::string classification;  // "full match" / "partial match" / "no match"
};

struct DecompositionReport {
  std::vector<CellDecomposition> cells;
  int predicted = -1;
  int target = -1;

  std::string to_json() const;
};

// Exact per-cell expansion L_i = <1,x_i> + sum_j alpha_ij s_j for one-layer
// models (any head count; rows carry the head index). A command summand is
// "large" when it reaches half the example's maximum command summand, after
// s-sign normalization.
DecompositionReport decompose_logits(const ModelWeights<double>& w, const EmbeddingTable& table,
                                     const Example& example);

// --- explicit weight construction ----------------------------------------------

// Bilinear match table B and readout vector w, factorized into a legal
// one-layer one-head model: W_K = I, W_Q = B^T, W_V = I, W_o = (1/d) 1 w^T.
struct ConstructionParams {
  Variant variant = Variant::two_attr;
  double gamma_attr = 5.0;  // color/shape match strength
  double gamma_size = 4.0;  // size-ramp strength
  double sigma = 1.0;       // command-token s value

  void validate() const;
};

MatD construction_bilinear(const ConstructionParams& params, const EmbeddingTable& table);
VecD construction_readout(const ConstructionParams& params, const EmbeddingTable& table);
ModelWeights<float> build_construction(const ConstructionParams& params);

// --- learned-vs-construct agreement ---------------------------------------------

struct AgreementReport {
  std::map<std::string, double> column_spearman;  // per command-key column, grid-token queries only
  double mean_spearman = 0.0;
  double top1_agreement = 0.0;
  double learned_sign = 1.0;
};

AgreementReport compare_learned_vs_construct(const ModelWeights<double>& learned,
                                             const ModelWeights<double>& construct, const EmbeddingTable& table,
                                             std::span<const Example> test_set);

// Spearman rank correlation with average ranks on ties; 0 when either side is
// constant.
double spearman(std::span<const double> a, std::span<const double> b);

// The testable form of the "darker cells" claim: within each color/shape
// command-key column, every matching grid query exceeds every non-matching
// one (after sign normalization).
bool m_column_ordering_holds(const VocabMatrix& m, const EmbeddingTable& table, double sign,
                             std::string* why = nullptr);

// Size-word columns: per-size mean of grid-query entries is strictly monotone
// (increasing for "big", decreasing for "small").
bool m_size_ramp_holds(const VocabMatrix& m, const EmbeddingTable& table, double sign, std::string* why = nullptr);

// --- heatmap export ---------------------------------------------------------------

enum class HeatmapFormat { csv, pgm, svg };

// csv: labeled grid at 6 significant digits. pgm: binary P5, min -> white,
// max -> black, constant matrices map to mid-gray. svg: self-contained.
void export_heatmap(const MatD& m, const std::vector<std::string>& row_labels,
                    const std::vector<std::string>& col_labels, const std::string& path, HeatmapFormat format);

}  // namespace refex
