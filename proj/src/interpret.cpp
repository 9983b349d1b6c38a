#include "refex/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace refex {

using ordered_json = nlohmann::ordered_json;

namespace {

const AttentionHead<double>& head_at(const ModelWeights<double>& w, int layer, int head) {
  if (layer < 0 || layer >= static_cast<int>(w.layers.size()))
    throw contract_violation("layer index " + std::to_string(layer) + " out of range");
  const auto& l = w.layers[static_cast<size_t>(layer)];
  if (head < 0 || head >= static_cast<int>(l.heads.size()))
    throw contract_violation("head index " + std::to_string(head) + " out of range");
  return l.heads[static_cast<size_t>(head)];
}

int dim_index(const EmbeddingTable& table, const std::string& name) {
  const auto& dims = table.dims();
  const auto it = std::find(dims.begin(), dims.end(), name);
  if (it == dims.end()) throw contract_violation("unknown embedding dimension '" + name + "'");
  return static_cast<int>(it - dims.begin());
}

}  // namespace

VocabMatrix extract_M(const ModelWeights<double>& w, const EmbeddingTable& table, int layer, int head,
                      int query_slot, int key_slot) {
  const auto& h = head_at(w, layer, head);
  MatD eq = table.matrix();
  MatD ek = table.matrix();
  if (query_slot >= 0) {
    if (w.pos.size() == 0 || query_slot >= w.pos.cols()) throw contract_violation("query slot out of range");
    eq.colwise() += VecD(w.pos.col(query_slot));
  }
  if (key_slot >= 0) {
    if (w.pos.size() == 0 || key_slot >= w.pos.cols()) throw contract_violation("key slot out of range");
    ek.colwise() += VecD(w.pos.col(key_slot));
  }
  VocabMatrix out;
  out.m = (h.w_q * eq).transpose() * (h.w_k * ek);
  out.labels = table.tokens();
  out.layer = layer;
  out.head = head;
  return out;
}

VecD extract_s(const ModelWeights<double>& w, const EmbeddingTable& table, int layer, int head) {
  if (layer < 0 || layer >= static_cast<int>(w.layers.size()))
    throw contract_violation("layer index out of range");
  const auto& l = w.layers[static_cast<size_t>(layer)];
  const int dqk = static_cast<int>(l.heads[0].w_q.rows());
  VecD s = VecD::Zero(table.vocab_size());
  const VecD ones = VecD::Ones(table.d_model());
  for (int h = 0; h < static_cast<int>(l.heads.size()); ++h) {
    if (head >= 0 && h != head) continue;
    const MatD wo_block = l.w_o.middleCols(static_cast<Eigen::Index>(h) * dqk, dqk);
    // s[t] = 1^T W_o W_v x_t, evaluated for the whole vocabulary at once
    s += (ones.transpose() * wo_block * l.heads[static_cast<size_t>(h)].w_v * table.matrix()).transpose();
  }
  return s;
}

double command_s_sign(const VecD& s, const EmbeddingTable& table) {
  double sum = 0.0;
  for (int t = 0; t < table.grid_token_begin(); ++t) sum += s(t);
  return sum < 0.0 ? -1.0 : 1.0;
}

// --- decomposition ------------------------------------------------------------

DecompositionReport decompose_logits(const ModelWeights<double>& w, const EmbeddingTable& table,
                                     const Example& example) {
  if (w.config.layers != 1 || w.layers.size() != 1)
    throw contract_violation("decompose_logits: defined for 1-layer models");
  if (example.world.variant != w.config.variant)
    throw contract_violation("decompose_logits: example variant does not match model");

  const auto tokens = table.encode(example);
  ForwardTrace<double> trace;
  forward<double>(w, table, tokens, &trace);

  const int n = table.seq_len();
  const int cmd = table.command_slots();
  const auto& layer = w.layers[0];
  const int heads = static_cast<int>(layer.heads.size());
  const int dqk = static_cast<int>(layer.heads[0].w_q.rows());
  const VecD ones = VecD::Ones(table.d_model());

  // Per-slot s values from the actual input embeddings (positional included),
  // so the expansion is exact for every variant.
  MatD s_by_slot(heads, n);
  for (int h = 0; h < heads; ++h) {
    const MatD wo_block = layer.w_o.middleCols(static_cast<Eigen::Index>(h) * dqk, dqk);
    s_by_slot.row(h) = ones.transpose() * wo_block * layer.heads[static_cast<size_t>(h)].w_v * trace.x0;
  }

  const VecD s_vocab = extract_s(w, table, 0);
  const double sign = command_s_sign(s_vocab, table);

  DecompositionReport report;
  report.target = example.target;
  report.predicted = predict_from_logits(std::span<const double>(trace.logits.data(), kGridCells));

  // First pass: collect command summands to fix the "large" threshold.
  double max_command = 0.0;
  for (int c = 0; c < kGridCells; ++c) {
    const int i = cmd + c;
    for (int j = 0; j < cmd; ++j) {
      double sum_heads = 0.0;
      for (int h = 0; h < heads; ++h) sum_heads += trace.attn[0][static_cast<size_t>(h)](i, j) * s_by_slot(h, j);
      max_command = std::max(max_command, sign * sum_heads);
    }
  }
  const double large_threshold = 0.5 * max_command;

  for (int c = 0; c < kGridCells; ++c) {
    const int i = cmd + c;
    CellDecomposition cell;
    cell.cell = c;
    cell.token = table.tokens()[static_cast<size_t>(tokens[static_cast<size_t>(i)])];
    cell.baseline = trace.x0.col(i).sum();
    cell.logit = trace.logits(c);
    double total = cell.baseline;
    for (int j = 0; j < n; ++j) {
      double command_summand = 0.0;
      for (int h = 0; h < heads; ++h) {
        DecompositionRow row;
        row.position = j;
        row.head = h;
        row.token = table.tokens()[static_cast<size_t>(tokens[static_cast<size_t>(j)])];
        row.alpha = trace.attn[0][static_cast<size_t>(h)](i, j);
        row.s = s_by_slot(h, j);
        row.summand = row.alpha * row.s;
        row.is_command = j < cmd;
        total += row.summand;
        if (row.is_command) command_summand += row.summand;
        cell.rows.push_back(std::move(row));
      }
      if (j < cmd && max_command > 0.0 && sign * command_summand >= large_threshold) ++cell.large_command_summands;
    }
    cell.total = total;
    cell.classification = cell.large_command_summands == 0 ? "no match"
                          : cell.large_command_summands >= cmd ? "full match"
                                                               : "partial match";
    report.cells.push_back(std::move(cell));
  }
  return report;
}

std::string DecompositionReport::to_json() const {
  ordered_json j;
  j["predicted"] = predicted;
  j["target"] = target;
  ordered_json cells_json = ordered_json::array();
  for (const CellDecomposition& cell : cells) {
    ordered_json c;
    c["cell"] = cell.cell;
    c["token"] = cell.token;
    c["baseline"] = cell.baseline;
    c["logit"] = cell.logit;
    c["total"] = cell.total;
    c["large_command_summands"] = cell.large_command_summands;
    c["classification"] = cell.classification;
    ordered_json rows = ordered_json::array();
    for (const DecompositionRow& row : cell.rows) {
      ordered_json r;
      r["position"] = row.position;
      r["head"] = row.head;
      r["token"] = row.token;
      r["alpha"] = row.alpha;
      r["s"] = row.s;
      r["summand"] = row.summand;
      r["is_command"] = row.is_command;
      rows.push_back(std::move(r));
    }
    c["rows"] = std::move(rows);
    cells_json.push_back(std::move(c));
  }
  j["cells"] = std::move(cells_json);
  return j.dump(2);
}

// --- construction ---------------------------------------------------------------

void ConstructionParams::validate() const {
  if (variant == Variant::three_attr_rel)
    throw contract_violation("build_construction: no construction exists for three-attr-rel");
  if (gamma_attr <= 0.0 || sigma == 0.0) throw config_error("construction: gamma_attr and sigma must be nonzero");
  if (variant == Variant::three_attr && gamma_size <= 0.0)
    throw config_error("construction: gamma_size must be positive for three-attr");
}

MatD construction_bilinear(const ConstructionParams& params, const EmbeddingTable& table) {
  params.validate();
  const int d = table.d_model();
  MatD b = MatD::Zero(d, d);
  for (Color c : {Color::red, Color::green, Color::blue}) {
    const std::string name = to_string(c);
    b(dim_index(table, "world_" + name), dim_index(table, name)) = params.gamma_attr;
  }
  for (Shape s : {Shape::square, Shape::circle, Shape::cylinder}) {
    const std::string name = to_string(s);
    b(dim_index(table, "world_" + name), dim_index(table, name)) = params.gamma_attr;
  }
  if (params.variant == Variant::three_attr) {
    const int big = dim_index(table, "big");
    const int small = dim_index(table, "small");
    for (int k = kMinSize; k <= kMaxSize; ++k) {
      const int row = dim_index(table, "world_size_" + std::to_string(k));
      b(row, big) = params.gamma_size * static_cast<double>(k - kMinSize) / static_cast<double>(kMaxSize - kMinSize);
      b(row, small) = params.gamma_size * static_cast<double>(kMaxSize - k) / static_cast<double>(kMaxSize - kMinSize);
    }
  }
  return b;
}

VecD construction_readout(const ConstructionParams& params, const EmbeddingTable& table) {
  params.validate();
  VecD w = VecD::Zero(table.d_model());
  std::vector<std::string> command_dims = {"red", "green", "blue", "square", "circle", "cylinder"};
  if (params.variant == Variant::three_attr) {
    command_dims.push_back("small");
    command_dims.push_back("big");
  }
  for (const std::string& name : command_dims) w(dim_index(table, name)) = params.sigma;
  return w;
}

ModelWeights<float> build_construction(const ConstructionParams& params) {
  params.validate();
  const EmbeddingTable table = EmbeddingTable::make(params.variant);
  const int d = table.d_model();
  const MatD b = construction_bilinear(params, table);
  const VecD w = construction_readout(params, table);

  ModelConfig config;
  config.variant = params.variant;
  config.layers = 1;
  config.heads = 1;
  config.d_qk = d;

  ModelWeights<float> out = zero_weights<float>(config, table);
  out.layers[0].heads[0].w_q = b.transpose().cast<float>();
  out.layers[0].heads[0].w_k = MatF::Identity(d, d);
  out.layers[0].heads[0].w_v = MatF::Identity(d, d);
  out.layers[0].w_o = (VecD::Ones(d) * w.transpose() / static_cast<double>(d)).cast<float>();
  return out;
}

// --- agreement -------------------------------------------------------------------

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw contract_violation("spearman: length mismatch");
  const auto ranks = [](std::span<const double> v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
    std::vector<double> r(n);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va < 1e-12 || vb < 1e-12) return 0.0;
  return cov / std::sqrt(va * vb);
}

AgreementReport compare_learned_vs_construct(const ModelWeights<double>& learned,
                                             const ModelWeights<double>& construct, const EmbeddingTable& table,
                                             std::span<const Example> test_set) {
  if (learned.config.variant != construct.config.variant)
    throw contract_violation("compare: variant mismatch");
  if (learned.config.layers != 1 || construct.config.layers != 1 || learned.config.heads != 1 ||
      construct.config.heads != 1)
    throw contract_violation("compare: both models must be 1-layer 1-head");

  AgreementReport report;
  const VocabMatrix ml = extract_M(learned, table);
  const VocabMatrix mc = extract_M(construct, table);
  report.learned_sign = command_s_sign(extract_s(learned, table), table);

  const int grid_begin = table.grid_token_begin();
  const int v = table.vocab_size();
  double sum = 0.0;
  int cols = 0;
  for (int key = 0; key < grid_begin; ++key) {
    std::vector<double> a, b;
    a.reserve(static_cast<size_t>(v - grid_begin));
    b.reserve(static_cast<size_t>(v - grid_begin));
    for (int q = grid_begin; q < v; ++q) {
      a.push_back(report.learned_sign * ml.m(q, key));
      b.push_back(mc.m(q, key));
    }
    const double rho = spearman(a, b);
    report.column_spearman[table.tokens()[static_cast<size_t>(key)]] = rho;
    sum += rho;
    ++cols;
  }
  report.mean_spearman = cols == 0 ? 0.0 : sum / cols;

  long agree = 0;
  for (const Example& ex : test_set) {
    const auto tokens = table.encode(ex);
    const VecD ll = forward<double>(learned, table, tokens);
    const VecD lc = forward<double>(construct, table, tokens);
    const int pl = predict_from_logits(std::span<const double>(ll.data(), kGridCells));
    const int pc = predict_from_logits(std::span<const double>(lc.data(), kGridCells));
    if (pl == pc) ++agree;
  }
  report.top1_agreement = test_set.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(test_set.size());
  return report;
}

// --- ordering properties ----------------------------------------------------------

namespace {

bool object_matches_key(const std::string& object_token, const std::string& key) {
  // object tokens look like "red_circle" or "2_red_circle"
  std::vector<std::string> parts;
  std::stringstream ss(object_token);
  std::string item;
  while (std::getline(ss, item, '_')) parts.push_back(item);
  return std::find(parts.begin(), parts.end(), key) != parts.end();
}

}  // namespace

bool m_column_ordering_holds(const VocabMatrix& m, const EmbeddingTable& table, double sign, std::string* why) {
  const int grid_begin = table.grid_token_begin();
  for (int key = 0; key < grid_begin; ++key) {
    const std::string& key_token = table.tokens()[static_cast<size_t>(key)];
    if (!parse_color(key_token) && !parse_shape(key_token)) continue;  // size/relation words handled separately
    double min_match = std::numeric_limits<double>::infinity();
    double max_other = -std::numeric_limits<double>::infinity();
    std::string min_tok, max_tok;
    for (int q = grid_begin; q < table.vocab_size(); ++q) {
      const std::string& qt = table.tokens()[static_cast<size_t>(q)];
      const double value = sign * m.m(q, key);
      const bool match = q != table.empty_id() && object_matches_key(qt, key_token);
      if (match && value < min_match) {
        min_match = value;
        min_tok = qt;
      }
      if (!match && value > max_other) {
        max_other = value;
        max_tok = qt;
      }
    }
    if (!(min_match > max_other)) {
      if (why)
        *why = "column '" + key_token + "': matching query '" + min_tok + "' (" + std::to_string(min_match) +
               ") does not exceed non-matching '" + max_tok + "' (" + std::to_string(max_other) + ")";
      return false;
    }
  }
  return true;
}

bool m_size_ramp_holds(const VocabMatrix& m, const EmbeddingTable& table, double sign, std::string* why) {
  if (table.variant() != Variant::three_attr && table.variant() != Variant::three_attr_rel) return true;
  for (const char* key_token : {"small", "big"}) {
    const int key = table.token_id(key_token);
    std::array<double, 4> mean{};
    std::array<int, 4> count{};
    for (int q = table.grid_token_begin(); q < table.vocab_size(); ++q) {
      if (q == table.empty_id()) continue;
      const std::string& qt = table.tokens()[static_cast<size_t>(q)];
      const int k = qt[0] - '0';
      mean[static_cast<size_t>(k - 1)] += sign * m.m(q, key);
      ++count[static_cast<size_t>(k - 1)];
    }
    for (int k = 0; k < 4; ++k) mean[static_cast<size_t>(k)] /= std::max(1, count[static_cast<size_t>(k)]);
    for (int k = 0; k + 1 < 4; ++k) {
      const bool ok = std::string(key_token) == "big" ? mean[static_cast<size_t>(k)] < mean[static_cast<size_t>(k + 1)]
                                                      : mean[static_cast<size_t>(k)] > mean[static_cast<size_t>(k + 1)];
      if (!ok) {
        if (why)
          *why = std::string("size ramp broken in column '") + key_token + "' between sizes " + std::to_string(k + 1) +
                 " and " + std::to_string(k + 2);
        return false;
      }
    }
  }
  return true;
}

// --- heatmaps ----------------------------------------------------------------------

namespace {

std::string format_g6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

void export_heatmap(const MatD& m, const std::vector<std::string>& row_labels,
                    const std::vector<std::string>& col_labels, const std::string& path, HeatmapFormat format) {
  if (!m.allFinite()) throw contract_violation("export_heatmap: non-finite matrix");
  if (static_cast<Eigen::Index>(row_labels.size()) != m.rows() ||
      static_cast<Eigen::Index>(col_labels.size()) != m.cols())
    throw contract_violation("export_heatmap: label count mismatch");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open for writing: " + path);

  if (format == HeatmapFormat::csv) {
    for (const std::string& c : col_labels) out << ',' << c;
    out << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      out << row_labels[static_cast<size_t>(r)];
      for (Eigen::Index c = 0; c < m.cols(); ++c) out << ',' << format_g6(m(r, c));
      out << '\n';
    }
  } else {
    const double lo = m.minCoeff();
    const double hi = m.maxCoeff();
    const bool degenerate = hi - lo < 1e-300;
    // darker = higher convention: min -> 255 (white), max -> 0 (black)
    const auto shade = [&](double v) -> int {
      if (degenerate) return 128;
      return static_cast<int>(std::lround(255.0 * (1.0 - (v - lo) / (hi - lo))));
    };
    if (format == HeatmapFormat::pgm) {
      out << "P5\n" << m.cols() << " " << m.rows() << "\n255\n";
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) out.put(static_cast<char>(shade(m(r, c))));
    } else {
      const int cell = 22;
      const int left = 130, top = 110;
      const int width = left + cell * static_cast<int>(m.cols()) + 10;
      const int height = top + cell * static_cast<int>(m.rows()) + 10;
      out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
      out << "<style>text{font-family:monospace;font-size:9px;}</style>\n";
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const int x = left + cell * static_cast<int>(c) + cell / 2;
        out << "<text x=\"" << x << "\" y=\"" << top - 6 << "\" transform=\"rotate(-60 " << x << " " << top - 6
            << ")\">" << col_labels[static_cast<size_t>(c)] << "</text>\n";
      }
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        out << "<text x=\"4\" y=\"" << top + cell * static_cast<int>(r) + cell / 2 + 4 << "\">"
            << row_labels[static_cast<size_t>(r)] << "</text>\n";
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          const int g = shade(m(r, c));
          out << "<rect x=\"" << left + cell * static_cast<int>(c) << "\" y=\"" << top + cell * static_cast<int>(r)
              << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(" << g << ',' << g << ',' << g
              << ")\"><title>" << row_labels[static_cast<size_t>(r)] << " / " << col_labels[static_cast<size_t>(c)]
              << " = " << format_g6(m(r, c)) << "</title></rect>\n";
        }
      }
      out << "</svg>\n";
    }
  }
  if (!out) throw data_error("write failed: " + path);
}

}  // namespace refex
