#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "refex/checkpoint.hpp"
#include "refex/datagen.hpp"
#include "refex/interpret.hpp"
#include "refex/model.hpp"
#include "refex/reproduce.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace refex;

namespace {

constexpr const char* kToolVersion = "refex 0.1.0";

uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open: " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open for writing: " + path);
  out << content;
}

std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Run manifest: tool version, resolved configuration, content hashes of every
// produced file.
void write_manifest(const std::string& out_dir, const std::string& subcommand, const std::string& resolved_config,
                    const std::vector<std::string>& files) {
  ordered_json j;
  j["tool"] = kToolVersion;
  j["subcommand"] = subcommand;
  j["config"] = resolved_config;
  ordered_json entries;
  for (const std::string& name : files) {
    const std::string bytes = read_file(out_dir + "/" + name);
    entries[name] = ordered_json{{"bytes", bytes.size()}, {"fnv1a64", hex64(fnv1a64(bytes))}};
  }
  j["files"] = std::move(entries);
  write_file(out_dir + "/manifest.json", j.dump(2));
}

Variant variant_from_flag(const std::string& name) {
  const auto v = parse_variant(name);
  if (!v) throw config_error("unknown variant '" + name + "'");
  return *v;
}

struct GenArgs {
  std::string variant = "two-attr";
  std::string out;
  uint64_t seed = 0;
  int train_count = 90000, val_count = 2500, test_count = 2500;
  int min_objects = 3, max_objects = 10;
  double gs_scale = 1.0;
  std::string holdout = "default";
};

int run_gen(const GenArgs& args, const std::string& resolved) {
  GenSpec spec = GenSpec::defaults(variant_from_flag(args.variant), args.seed);
  spec.train_count = args.train_count;
  spec.val_count = args.val_count;
  spec.test_count = args.test_count;
  spec.min_objects = args.min_objects;
  spec.max_objects = args.max_objects;
  spec.green_square_distractor_scale = args.gs_scale;
  if (args.holdout != "default") {
    spec.holdout.clear();
    if (args.holdout != "none") {
      std::stringstream ss(args.holdout);
      std::string item;
      while (std::getline(ss, item, ',')) {
        const auto tag = parse_split_tag(item);
        if (!tag || *tag == SplitTag::random) throw config_error("bad holdout tag '" + item + "'");
        spec.holdout.insert(*tag);
      }
    }
  }
  spec.validate();
  fs::create_directories(args.out);

  const DatasetBundle bundle = generate_bundle(spec);
  std::vector<std::string> files;
  const auto emit = [&](const std::string& name, const std::vector<Example>& examples) {
    write_jsonl(examples, args.out + "/" + name);
    files.push_back(name);
  };
  emit("train.jsonl", bundle.train);
  emit("val.jsonl", bundle.val);
  emit("test_random.jsonl", bundle.random_test);
  for (const auto& [tag, list] : bundle.split_tests) emit("test_" + to_string(tag) + ".jsonl", list);

  ordered_json stats;
  stats["train"] = ordered_json::parse(dataset_stats(bundle.train).to_json());
  stats["val"] = ordered_json::parse(dataset_stats(bundle.val).to_json());
  stats["test_random"] = ordered_json::parse(dataset_stats(bundle.random_test).to_json());
  for (const auto& [tag, list] : bundle.split_tests)
    stats["test_" + to_string(tag)] = ordered_json::parse(dataset_stats(list).to_json());
  write_file(args.out + "/stats.json", stats.dump(2));
  files.push_back("stats.json");

  write_file(args.out + "/config.resolved.toml", resolved);
  write_manifest(args.out, "gen", resolved, files);
  std::cout << "wrote " << files.size() << " files to " << args.out << "\n";
  return 0;
}

// Dataset directory produced by `gen`: train/val plus every test_*.jsonl.
DatasetBundle load_data_dir(const std::string& dir, Variant expect) {
  DatasetBundle bundle;
  bundle.train = read_jsonl(dir + "/train.jsonl");
  bundle.val = read_jsonl(dir + "/val.jsonl");
  bundle.random_test = read_jsonl(dir + "/test_random.jsonl");
  if (bundle.train.empty()) throw data_error(dir + "/train.jsonl: empty dataset");
  if (bundle.train.front().world.variant != expect)
    throw data_error("dataset variant does not match requested variant");
  bundle.spec = GenSpec::defaults(expect, 0);
  bundle.spec.holdout.clear();
  for (SplitTag tag : applicable_splits(expect)) {
    const std::string path = dir + "/test_" + to_string(tag) + ".jsonl";
    if (fs::exists(path)) {
      bundle.split_tests[tag] = read_jsonl(path);
      bundle.spec.holdout.insert(tag);
    }
  }
  return bundle;
}

struct TrainArgs {
  std::string variant = "two-attr";
  std::string data;
  std::string out;
  int layers = 1, heads = 1, d_qk = 0;
  bool scale_scores = false;
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int batch = 128, epochs = 60, patience = 10;
  double init_std = 0.1;
  uint64_t seed = 0;
  int threads = 2;
  int restarts = 1;
};

ordered_json eval_report_json(const EvalReport& report) {
  ordered_json j;
  j["count"] = report.count;
  j["correct"] = report.correct;
  j["accuracy"] = report.accuracy;
  ordered_json tags;
  for (const auto& [tag, score] : report.by_tag)
    tags[to_string(tag)] =
        ordered_json{{"count", score.count}, {"correct", score.correct}, {"accuracy", score.accuracy()}};
  j["by_tag"] = std::move(tags);
  ordered_json errors = ordered_json::array();
  for (const auto& e : report.errors)
    errors.push_back(ordered_json{{"index", e.index}, {"predicted", e.predicted}, {"target", e.target}});
  j["errors"] = std::move(errors);
  return j;
}

int run_train(const TrainArgs& args, const std::string& resolved) {
  const Variant variant = variant_from_flag(args.variant);
  ModelConfig config;
  config.variant = variant;
  config.layers = args.layers;
  config.heads = args.heads;
  config.d_qk = args.d_qk;
  config.scale_scores = args.scale_scores;
  config.validate();

  const DatasetBundle bundle = load_data_dir(args.data, variant);
  const EmbeddingTable table = EmbeddingTable::make(variant);

  TrainOptions opts;
  opts.lr = args.lr;
  opts.beta1 = args.beta1;
  opts.beta2 = args.beta2;
  opts.eps = args.eps;
  opts.batch_size = args.batch;
  opts.max_epochs = args.epochs;
  opts.patience = args.patience;
  opts.init_std = args.init_std;
  opts.seed = args.seed;
  opts.threads = args.threads;

  RestartOptions restarts;
  restarts.restarts = args.restarts;
  const RestartResult run = train_with_restarts(config, table, bundle, opts, restarts);

  fs::create_directories(args.out);
  save_checkpoint(run.result.weights, args.out + "/best.ckpt");
  write_file(args.out + "/log.csv", training_log_csv(run.result.log, variant));

  ordered_json report;
  report["variant"] = to_string(variant);
  report["layers"] = args.layers;
  report["heads"] = args.heads;
  report["best_epoch"] = run.result.best_epoch;
  report["best_val"] = run.result.best_val;
  report["restart_attempts"] = run.attempts;
  report["chosen_seed"] = run.chosen_seed;
  report["test_random"] = eval_report_json(evaluate(run.result.weights, table, bundle.random_test, args.threads));
  for (const auto& [tag, list] : bundle.split_tests)
    report["test_" + to_string(tag)] = eval_report_json(evaluate(run.result.weights, table, list, args.threads));
  write_file(args.out + "/report.json", report.dump(2));

  write_file(args.out + "/config.resolved.toml", resolved);
  write_manifest(args.out, "train", resolved, {"best.ckpt", "log.csv", "report.json"});
  std::cout << "best epoch " << run.result.best_epoch << ", val " << run.result.best_val << "; report in " << args.out
            << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::vector<std::string> data;
  std::string out;
  bool scale_scores = false;
  int threads = 2;
};

int run_eval(const EvalArgs& args, const std::string& resolved) {
  ModelWeights<float> weights = load_checkpoint(args.ckpt);
  weights.config.scale_scores = args.scale_scores;
  const EmbeddingTable table = EmbeddingTable::make(weights.config.variant);

  fs::create_directories(args.out);
  ordered_json report;
  report["checkpoint"] = args.ckpt;
  report["variant"] = to_string(weights.config.variant);
  for (const std::string& path : args.data) {
    const auto examples = read_jsonl(path);
    if (examples.empty()) throw data_error(path + ": empty dataset");
    if (examples.front().world.variant != weights.config.variant)
      throw data_error(path + ": dataset variant does not match checkpoint variant");
    const EvalReport r = evaluate(weights, table, examples, args.threads);
    report[fs::path(path).filename().string()] = eval_report_json(r);
    std::cout << path << ": " << r.accuracy << " (" << r.correct << "/" << r.count << ")\n";
  }
  write_file(args.out + "/report.json", report.dump(2));
  write_file(args.out + "/config.resolved.toml", resolved);
  write_manifest(args.out, "eval", resolved, {"report.json"});
  return 0;
}

struct InspectArgs {
  std::string ckpt;
  std::string out;
  std::string data;
  long example_id = -1;
  int threads = 2;
};

int run_inspect(const InspectArgs& args, const std::string& resolved) {
  const ModelWeights<float> weights = load_checkpoint(args.ckpt);
  const EmbeddingTable table = EmbeddingTable::make(weights.config.variant);
  const auto wd = weights.cast<double>();
  fs::create_directories(args.out);

  std::vector<std::string> files;
  const bool single = weights.config.layers == 1 && weights.config.heads == 1;
  for (int layer = 0; layer < weights.config.layers; ++layer) {
    for (int head = 0; head < weights.config.heads; ++head) {
      const VocabMatrix m = extract_M(wd, table, layer, head);
      const std::string base =
          single ? std::string("M_learned") : "M_learned_l" + std::to_string(layer) + "h" + std::to_string(head);
      export_heatmap(m.m, m.labels, m.labels, args.out + "/" + base + ".csv", HeatmapFormat::csv);
      export_heatmap(m.m, m.labels, m.labels, args.out + "/" + base + ".pgm", HeatmapFormat::pgm);
      export_heatmap(m.m, m.labels, m.labels, args.out + "/" + base + ".svg", HeatmapFormat::svg);
      files.push_back(base + ".csv");
      files.push_back(base + ".pgm");
      files.push_back(base + ".svg");
    }
  }

  ordered_json summary;
  summary["variant"] = to_string(weights.config.variant);
  summary["layers"] = weights.config.layers;
  summary["heads"] = weights.config.heads;
  for (int layer = 0; layer < weights.config.layers; ++layer) {
    const VecD s = extract_s(wd, table, layer);
    const std::string name = single ? std::string("s_learned") : "s_learned_l" + std::to_string(layer);
    std::ostringstream csv;
    csv << "token,s\n";
    for (int i = 0; i < table.vocab_size(); ++i) csv << table.tokens()[static_cast<size_t>(i)] << "," << s(i) << "\n";
    write_file(args.out + "/" + name + ".csv", csv.str());
    files.push_back(name + ".csv");
    if (layer == 0) {
      const double sign = command_s_sign(s, table);
      const VocabMatrix m = extract_M(wd, table, 0, 0);
      std::string why;
      summary["s_sign"] = sign;
      summary["column_ordering_holds"] = m_column_ordering_holds(m, table, sign, &why);
      if (!why.empty()) summary["column_ordering_note"] = why;
      summary["size_ramp_holds"] = m_size_ramp_holds(m, table, sign);
    }
  }
  if (weights.config.layers > 1)
    std::cerr << "note: multi-layer checkpoint; s carries per-layer semantics only\n";

  if (args.example_id >= 0) {
    if (args.data.empty()) throw config_error("--example-id requires --data");
    if (weights.config.layers != 1) {
      std::cerr << "note: logit decomposition is defined for 1-layer models; skipping decomposition.json\n";
    } else {
      const auto examples = read_jsonl(args.data);
      if (args.example_id >= static_cast<long>(examples.size()))
        throw data_error("example id out of range for " + args.data);
      const DecompositionReport report = decompose_logits(wd, table, examples[static_cast<size_t>(args.example_id)]);
      write_file(args.out + "/decomposition.json", report.to_json());
      files.push_back("decomposition.json");
    }
  }

  write_file(args.out + "/inspect.json", summary.dump(2));
  files.push_back("inspect.json");
  write_file(args.out + "/config.resolved.toml", resolved);
  write_manifest(args.out, "inspect", resolved, files);
  return 0;
}

struct ReproduceArgs {
  std::string preset;
  std::string out;
  int threads = 2;
};

int run_reproduce(const ReproduceArgs& args, const std::string& resolved) {
  fs::create_directories(args.out);
  bool passed = false;
  if (args.preset == "table6") {
    const auto rows = reproduce_table6(args.out, args.threads);
    passed = true;
    for (const auto& row : rows) passed = passed && row.passed();
    std::cout << table6_markdown(rows);
  } else if (args.preset == "a1-distractor") {
    const A1DistractorReport report = reproduce_a1_distractor(args.out, args.threads);
    passed = report.passed();
    std::cout << "A1 accuracy, scale 1.00: " << report.accuracy_full << "\n";
    std::cout << "A1 accuracy, scale 0.25: " << report.accuracy_reduced << "\n";
    std::cout << (passed ? "reduced-distractor training recovers the held-out composition\n"
                         : "FAIL: no recovery jump observed\n");
  } else if (args.preset == "construction") {
    const ConstructionReport report = reproduce_construction(args.out, args.threads);
    passed = report.passed();
    for (const auto& v : report.variants) {
      std::cout << to_string(v.variant) << ":";
      for (const auto& r : v.results) std::cout << " " << r.name << "=" << r.accuracy;
      std::cout << "\n";
    }
    std::cout << (passed ? "constructions are exact on every split\n" : "FAIL: construction below 100%\n");
  } else {
    throw config_error("unknown preset '" + args.preset + "' (expected table6, a1-distractor or construction)");
  }
  write_file(args.out + "/config.resolved.toml", resolved);
  std::cout << "artifacts in " << args.out << "\n";
  return passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string(kToolVersion) + " - grounded referring-expression laboratory"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML config file; command-line flags win");
  app.set_version_flag("--version", kToolVersion);
  app.option_defaults()->always_capture_default();
  app.fallthrough(true);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate a dataset bundle with compositional holdouts");
  gen_cmd->fallthrough(true);
  gen_cmd->add_option("--variant", gen.variant, "two-attr | three-attr | three-attr-rel");
  gen_cmd->add_option("--seed", gen.seed, "generation seed");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--train-count", gen.train_count);
  gen_cmd->add_option("--val-count", gen.val_count);
  gen_cmd->add_option("--test-count", gen.test_count);
  gen_cmd->add_option("--min-objects", gen.min_objects);
  gen_cmd->add_option("--max-objects", gen.max_objects);
  gen_cmd->add_option("--green-square-distractor-scale", gen.gs_scale,
                      "keep probability for green-square distractors");
  gen_cmd->add_option("--holdout", gen.holdout, "'default', 'none' or comma list (A1,A2,...)");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train an attention-only model on a generated bundle");
  train_cmd->fallthrough(true);
  train_cmd->add_option("--variant", train_args.variant)->required();
  train_cmd->add_option("--data", train_args.data, "directory produced by gen")->required();
  train_cmd->add_option("--out", train_args.out)->required();
  train_cmd->add_option("--layers", train_args.layers, "attention layers (1 or 2)");
  train_cmd->add_option("--heads", train_args.heads);
  train_cmd->add_option("--d-qk", train_args.d_qk, "per-head query/key width (0 = d_model)");
  train_cmd->add_flag("--scale-scores", train_args.scale_scores, "divide scores by sqrt(d_qk)");
  train_cmd->add_option("--lr", train_args.lr);
  train_cmd->add_option("--batch", train_args.batch);
  train_cmd->add_option("--epochs", train_args.epochs);
  train_cmd->add_option("--patience", train_args.patience);
  train_cmd->add_option("--init-std", train_args.init_std);
  train_cmd->add_option("--seed", train_args.seed);
  train_cmd->add_option("--threads", train_args.threads);
  train_cmd->add_option("--restarts", train_args.restarts, "random restarts selected by validation");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on datasets");
  eval_cmd->fallthrough(true);
  eval_cmd->add_option("--ckpt", eval_args.ckpt)->required();
  eval_cmd->add_option("--data", eval_args.data, "one or more jsonl files")->required();
  eval_cmd->add_option("--out", eval_args.out)->required();
  eval_cmd->add_flag("--scale-scores", eval_args.scale_scores);
  eval_cmd->add_option("--threads", eval_args.threads);

  InspectArgs inspect_args;
  auto* inspect_cmd = app.add_subcommand("inspect", "export M/s tables, heatmaps and logit decompositions");
  inspect_cmd->fallthrough(true);
  inspect_cmd->add_option("--ckpt", inspect_args.ckpt)->required();
  inspect_cmd->add_option("--out", inspect_args.out)->required();
  inspect_cmd->add_option("--data", inspect_args.data, "jsonl file for --example-id");
  inspect_cmd->add_option("--example-id", inspect_args.example_id, "decompose this example (1-layer models)");
  inspect_cmd->add_option("--threads", inspect_args.threads);

  ReproduceArgs repro_args;
  auto* repro_cmd = app.add_subcommand("reproduce", "run a published-result preset end to end");
  repro_cmd->fallthrough(true);
  repro_cmd->add_option("preset", repro_args.preset, "table6 | a1-distractor | construction")->required();
  repro_cmd->add_option("--out", repro_args.out)->required();
  repro_cmd->add_option("--threads", repro_args.threads);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    // resolved configuration, restricted to the subcommand that actually ran
    std::string resolved;
    {
      const std::string full = app.config_to_str(true, false);
      const std::string prefix = app.get_subcommands().front()->get_name() + ".";
      std::stringstream ss(full);
      std::string line;
      while (std::getline(ss, line))
        if (line.rfind(prefix, 0) == 0) resolved += line + "\n";
    }
    if (gen_cmd->parsed()) return run_gen(gen, resolved);
    if (train_cmd->parsed()) return run_train(train_args, resolved);
    if (eval_cmd->parsed()) return run_eval(eval_args, resolved);
    if (inspect_cmd->parsed()) return run_inspect(inspect_args, resolved);
    if (repro_cmd->parsed()) return run_reproduce(repro_args, resolved);
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const numerical_error& e) {
    std::cerr << "numerical fault: " << e.what() << "\n";
    return 4;
  } catch (const contract_violation& e) {
    std::cerr << "internal contract violation: " << e.what() << "\n";
    return 4;
  }
  return 2;
}
