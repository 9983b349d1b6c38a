// Acceptance suite: one criterion per invocation, pass/fail line per criterion.
// Trained artifacts are cached under --cache so criteria sharing a model do
// not retrain it.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "refex/reproduce.hpp"

using namespace refex;
namespace fs = std::filesystem;

namespace {

#ifndef REFEX_SOURCE_DIR
#error "REFEX_SOURCE_DIR must be defined by the build"
#endif

struct Args {
  int criterion = 0;
  std::string cache = "acceptance_cache";
  int threads = 2;
};

bool g_pass = true;
std::vector<std::string> g_notes;

void check(bool ok, const std::string& what) {
  std::printf("  %-6s %s\n", ok ? "ok" : "FAIL", what.c_str());
  if (!ok) g_pass = false;
}

void check_band(double value, double lo, double hi, const std::string& what) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s = %.4f (accepted [%.3f, %.3f])", what.c_str(), value, lo, hi);
  check(value >= lo && value <= hi, buf);
}

std::string shipped_checkpoint(Variant v) {
  return std::string(REFEX_SOURCE_DIR) + "/assets/checkpoints/" + to_string(v) + "-l1.ckpt";
}

// --- criteria 1-3: target-accuracy reproduction ---------------------------------

void criterion_table6_row(Variant variant, int layers, const Args& args) {
  const std::string dir = args.cache + "/table6/" + to_string(variant) + "-l" + std::to_string(layers);
  const Table6Row row = run_table6_row(variant, layers, dir, args.threads);
  for (const auto& r : row.results)
    check_band(r.accuracy, r.lo, r.hi, to_string(variant) + " L" + std::to_string(layers) + " " + r.name);
}

void criterion1(const Args& args) { criterion_table6_row(Variant::two_attr, 1, args); }
void criterion2(const Args& args) { criterion_table6_row(Variant::three_attr, 1, args); }

void criterion3(const Args& args) {
  criterion_table6_row(Variant::three_attr_rel, 2, args);
  criterion_table6_row(Variant::three_attr_rel, 1, args);
}

// --- criterion 4: construction perfection ----------------------------------------

void criterion4(const Args& args) {
  const ConstructionReport report = reproduce_construction(args.cache + "/construction", args.threads);
  for (const auto& v : report.variants) {
    for (const auto& r : v.results) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "construction %s %s = %.6f (exact 1.0 required)",
                    to_string(v.variant).c_str(), r.name.c_str(), r.accuracy);
      check(r.accuracy == 1.0, buf);
    }
  }
}

// --- criterion 5: distractor-frequency intervention -------------------------------

void criterion5(const Args& args) {
  const std::string summary = args.cache + "/a1-distractor/summary.json";
  A1DistractorReport report;
  if (fs::exists(summary)) {
    std::ifstream in(summary);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto at = [&](const char* key) {
      const auto pos = text.find(key);
      return std::stod(text.substr(text.find(':', pos) + 1));
    };
    report.accuracy_full = at("a1_accuracy_scale_1.0");
    report.accuracy_reduced = at("a1_accuracy_scale_0.25");
  } else {
    report = reproduce_a1_distractor(args.cache + "/a1-distractor", args.threads);
  }
  check_band(report.accuracy_reduced, 0.995, 1.0, "A1 accuracy at distractor scale 0.25");
  char buf[160];
  std::snprintf(buf, sizeof(buf), "scale-0.25 A1 (%.4f) strictly exceeds scale-1.0 A1 (%.4f)",
                report.accuracy_reduced, report.accuracy_full);
  check(report.accuracy_reduced > report.accuracy_full, buf);
}

// --- criterion 6: logit-identity property ------------------------------------------

double max_identity_error(const ModelWeights<double>& w, const EmbeddingTable& table,
                          const std::vector<Example>& examples) {
  double worst = 0.0;
  for (const Example& ex : examples) {
    const DecompositionReport report = decompose_logits(w, table, ex);
    for (const auto& cell : report.cells) worst = std::max(worst, std::abs(cell.total - cell.logit));
  }
  return worst;
}

void criterion6(const Args&) {
  double worst = 0.0;
  int examples_checked = 0;
  for (Variant variant : {Variant::two_attr, Variant::three_attr}) {
    const EmbeddingTable table = EmbeddingTable::make(variant);
    const GenSpec spec = GenSpec::defaults(variant, 606);
    std::vector<Example> examples;
    for (int i = 0; i < 167; ++i) {
      StreamRng rng(spec.seed, static_cast<uint64_t>(i));
      examples.push_back(generate_example(spec, rng));
    }
    examples_checked += static_cast<int>(examples.size()) * 3;

    const auto trained = load_checkpoint(shipped_checkpoint(variant)).cast<double>();
    ModelConfig config;
    config.variant = variant;
    const auto random_init = init_weights<double>(config, table, 42);
    ConstructionParams params;
    params.variant = variant;
    const auto constructed = build_construction(params).cast<double>();

    worst = std::max(worst, max_identity_error(trained, table, examples));
    worst = std::max(worst, max_identity_error(random_init, table, examples));
    worst = std::max(worst, max_identity_error(constructed, table, examples));
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "max |L_i - (<1,x_i> + sum alpha*s)| = %.2e over %d examples (< 1e-5 required)",
                worst, examples_checked);
  check(worst < 1e-5 && examples_checked >= 1000, buf);
}

// --- criterion 7: gradient suite -----------------------------------------------------

void criterion7(const Args&) {
  struct Case {
    Variant variant;
    int layers, heads, d_qk;
  };
  const Case cases[] = {
      {Variant::two_attr, 1, 1, 0},       {Variant::three_attr, 1, 1, 0}, {Variant::three_attr_rel, 1, 1, 0},
      {Variant::three_attr_rel, 2, 1, 0}, {Variant::two_attr, 2, 2, 6},
  };
  for (const Case& c : cases) {
    const EmbeddingTable table = EmbeddingTable::make(c.variant);
    ModelConfig config;
    config.variant = c.variant;
    config.layers = c.layers;
    config.heads = c.heads;
    config.d_qk = c.d_qk;
    auto w = init_weights<double>(config, table, 1234);
    const GenSpec spec = GenSpec::defaults(c.variant, 707);
    std::vector<Example> batch;
    for (int i = 0; i < 4; ++i) {
      StreamRng rng(spec.seed, static_cast<uint64_t>(i));
      batch.push_back(generate_example(spec, rng));
    }
    const GradCheckReport report = model_grad_check(w, table, batch, 0.1, 99);
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%s L%d H%d d_qk=%d: max rel err %.2e (worst %s, < 1e-4 required)",
                  to_string(c.variant).c_str(), c.layers, c.heads, c.d_qk, report.max_rel_err,
                  report.worst_param.c_str());
    check(report.passed(1e-4), buf);
  }
}

// --- criterion 8: oracle/property suite (no training) --------------------------------

void criterion8(const Args& args) {
  // holdout purity and oracle validity on freshly generated bundles
  for (Variant variant : {Variant::two_attr, Variant::three_attr, Variant::three_attr_rel}) {
    GenSpec spec = GenSpec::defaults(variant, 808);
    spec.train_count = 4000;
    spec.val_count = 400;
    spec.test_count = 400;
    const DatasetBundle bundle = generate_bundle(spec);
    long impure = 0, oracle_bad = 0, total = 0;
    const auto audit = [&](const std::vector<Example>& list, bool check_holdout) {
      for (const Example& ex : list) {
        ++total;
        if (check_holdout)
          for (SplitTag t : spec.holdout)
            if (tag_splits(ex).contains(t)) ++impure;
        const auto res = resolve_target(ex.world, ex.command);
        if (!res.ok() || res.cell != ex.target) ++oracle_bad;
      }
    };
    audit(bundle.train, true);
    audit(bundle.random_test, true);
    audit(bundle.val, false);
    for (const auto& [tag, list] : bundle.split_tests) audit(list, false);
    check(impure == 0, to_string(variant) + ": holdout purity (" + std::to_string(impure) + " impure of " +
                           std::to_string(total) + ")");
    check(oracle_bad == 0, to_string(variant) + ": resolve_target matches stored target on 100% of " +
                               std::to_string(total) + " examples");
  }

  // JSONL round trip
  {
    GenSpec spec = GenSpec::defaults(Variant::three_attr, 17);
    std::vector<Example> examples;
    for (int i = 0; i < 500; ++i) {
      StreamRng rng(spec.seed, static_cast<uint64_t>(i));
      examples.push_back(generate_example(spec, rng));
    }
    const std::string path = args.cache + "/roundtrip.jsonl";
    fs::create_directories(args.cache);
    write_jsonl(examples, path);
    const auto back = read_jsonl(path);
    bool same = back.size() == examples.size();
    for (size_t i = 0; same && i < back.size(); ++i) same = back[i] == examples[i];
    std::string first, second;
    {
      std::ifstream in(path, std::ios::binary);
      first.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    write_jsonl(back, path);
    {
      std::ifstream in(path, std::ios::binary);
      second.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    check(same && first == second, "JSONL round trip is identity (500 examples, byte-identical re-serialization)");
  }

  // checkpoint round trip, bit-for-bit
  {
    ModelConfig config;
    config.variant = Variant::three_attr_rel;
    config.layers = 2;
    const EmbeddingTable table = EmbeddingTable::make(config.variant);
    const auto w = init_weights<float>(config, table, 5);
    const std::string path = args.cache + "/roundtrip.ckpt";
    save_checkpoint(w, path);
    const auto back = load_checkpoint(path);
    bool identical = true;
    std::vector<const MatF*> a, b;
    for_each_param(w, [&](const std::string&, const MatF& m) { a.push_back(&m); });
    for_each_param(back, [&](const std::string&, const MatF& m) { b.push_back(&m); });
    for (size_t i = 0; i < a.size() && identical; ++i)
      identical = a[i]->size() == b[i]->size() &&
                  std::memcmp(a[i]->data(), b[i]->data(), sizeof(float) * static_cast<size_t>(a[i]->size())) == 0;
    check(identical, "checkpoint round trip is bit-identical");
  }

  // softmax normalization and shift invariance
  {
    StreamRng rng(99, 0);
    bool ok = true;
    for (int trial = 0; trial < 50 && ok; ++trial) {
      MatF s(8, 17);
      for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = static_cast<float>(rng.gauss() * 5);
      const MatF p = softmax_rows<float>(s);
      for (Eigen::Index r = 0; r < p.rows(); ++r) ok = ok && std::abs(p.row(r).sum() - 1.0f) < 1e-6f;
      MatF shifted = s;
      shifted.array() += 11.5f;
      ok = ok && ((softmax_rows<float>(shifted) - p).cwiseAbs().maxCoeff() < 1e-6f);
    }
    check(ok, "softmax rows sum to 1 and are shift invariant");
  }

  // grid-slot permutation equivariance for non-positional variants
  {
    bool ok = true;
    for (Variant variant : {Variant::two_attr, Variant::three_attr}) {
      const EmbeddingTable table = EmbeddingTable::make(variant);
      ModelConfig config;
      config.variant = variant;
      const auto w = init_weights<float>(config, table, 31);
      const GenSpec spec = GenSpec::defaults(variant, 909);
      for (int i = 0; i < 25 && ok; ++i) {
        StreamRng rng(spec.seed, static_cast<uint64_t>(i));
        Example ex = generate_example(spec, rng);
        const VecF before = forward<float>(w, table, table.encode(ex));
        const int occupied = ex.world.cells.begin()->first;
        int empty = -1;
        for (int cell = 0; cell < kGridCells && empty < 0; ++cell)
          if (!ex.world.cells.contains(cell)) empty = cell;
        Example swapped = ex;
        const WorldObject obj = swapped.world.cells.at(occupied);
        swapped.world.cells.erase(occupied);
        swapped.world.cells[empty] = obj;
        if (swapped.target == occupied) swapped.target = empty;
        const VecF after = forward<float>(w, table, table.encode(swapped));
        for (int c = 0; c < kGridCells && ok; ++c) {
          const int mapped = c == occupied ? empty : c == empty ? occupied : c;
          ok = std::abs(after(mapped) - before(c)) < 1e-5f;
        }
      }
    }
    check(ok, "swapping grid-cell contents permutes exactly the affected logits");
  }

  // M column ordering on the shipped trained checkpoints
  for (Variant variant : {Variant::two_attr, Variant::three_attr}) {
    const auto w = load_checkpoint(shipped_checkpoint(variant)).cast<double>();
    const EmbeddingTable table = EmbeddingTable::make(variant);
    const VocabMatrix m = extract_M(w, table);
    const double sign = command_s_sign(extract_s(w, table), table);
    std::string why;
    const bool ordering = m_column_ordering_holds(m, table, sign, &why);
    check(ordering, to_string(variant) + " shipped checkpoint: M column ordering (matching queries beat "
                    "non-matching in every color/shape column)" +
                        (ordering ? "" : " - " + why));
    if (variant == Variant::three_attr) {
      const bool ramp = m_size_ramp_holds(m, table, sign, &why);
      check(ramp, "three-attr shipped checkpoint: size-word columns ramp monotonically" +
                      (ramp ? std::string() : " - " + why));
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  Args args;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--criterion") && i + 1 < argc) args.criterion = std::atoi(argv[++i]);
    else if (!std::strcmp(argv[i], "--cache") && i + 1 < argc) args.cache = argv[++i];
    else if (!std::strcmp(argv[i], "--threads") && i + 1 < argc) args.threads = std::atoi(argv[++i]);
  }

  const struct {
    int id;
    const char* name;
    void (*run)(const Args&);
  } criteria[] = {
      {1, "two-attr accuracy targets (R/A1/A2 >= 0.99)", criterion1},
      {2, "three-attr accuracy targets (R/A1/A2/A3/A4 >= 0.99)", criterion2},
      {3, "three-attr-rel depth study (2-layer solves, 1-layer does not)", criterion3},
      {4, "construction perfection (exactly 100% on every split)", criterion4},
      {5, "distractor-frequency intervention (reduced scale recovers A1)", criterion5},
      {6, "logit identity across trained/random/constructed models", criterion6},
      {7, "gradient checks for every shipped configuration", criterion7},
      {8, "oracle and property suite (no training)", criterion8},
  };

  bool any = false;
  bool all_pass = true;
  for (const auto& c : criteria) {
    if (args.criterion != 0 && args.criterion != c.id) continue;
    any = true;
    g_pass = true;
    std::printf("criterion %d: %s\n", c.id, c.name);
    c.run(args);
    std::printf("[%s] criterion %d: %s\n", g_pass ? "PASS" : "FAIL", c.id, c.name);
    all_pass = all_pass && g_pass;
  }
  if (!any) {
    std::fprintf(stderr, "unknown criterion %d\n", args.criterion);
    return 2;
  }
  return all_pass ? 0 : 1;
}
