#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "refex/domain.hpp"
#include "refex/rng.hpp"

namespace refex {

struct GenSpec {
  Variant variant = Variant::two_attr;
  uint64_t seed = 0;
  int train_count = 90000;
  int val_count = 2500;
  int test_count = 2500;
  int min_objects = 3;
  int max_objects = 10;
  // Probability of keeping each sampled green-square distractor; 1.0 leaves
  // the distribution untouched, 0.25 reproduces the 75% reduction setup.
  double green_square_distractor_scale = 1.0;
  std::set<SplitTag> holdout;  // tags excluded from train; split tests are generated per held-out tag

  static GenSpec defaults(Variant v, uint64_t seed);

  // Throws config_error on out-of-range fields.
  void validate() const;
};

struct DatasetBundle {
  GenSpec spec;
  std::vector<Example> train;
  std::vector<Example> val;          // unrestricted draw, tagged: its held-out subsets drive early stopping
  std::vector<Example> random_test;  // train-distribution (holdout-pure)
  std::map<SplitTag, std::vector<Example>> split_tests;
};

// Test sets only (random + per-held-out-tag); identical to the corresponding
// bundle sections for the same spec.
struct EvalSuite {
  std::vector<Example> random_test;
  std::map<SplitTag, std::vector<Example>> split_tests;
};

// One unrestricted draw from the example distribution. The stream is keyed by
// (spec.seed, index) outside this call; rejection retries consume further
// draws from the same stream.
Example generate_example(const GenSpec& spec, StreamRng& rng);

DatasetBundle generate_bundle(const GenSpec& spec);
EvalSuite generate_eval_suite(const GenSpec& spec);

// --- JSONL persistence ------------------------------------------------------
// One object per line: {"variant":...,"command":[...],"objects":[{"cell":..,
// "color":..,"shape":..,"size":..}],"target":..,"tags":[...]}; canonical key
// order, objects sorted by cell, file ends with a newline.

std::string example_to_json_line(const Example& example);
Example example_from_json_line(const std::string& line, long line_number_1based);

void write_jsonl(const std::vector<Example>& examples, const std::string& path);
std::vector<Example> read_jsonl(const std::string& path);

// --- dataset statistics -----------------------------------------------------

struct TokenRoleCount {
  long as_target = 0;
  long as_distractor = 0;
};

struct StatsReport {
  long example_count = 0;
  double mean_objects = 0.0;
  std::map<std::string, TokenRoleCount> object_counts;  // keyed by object token, e.g. "2_green_circle"
  std::map<SplitTag, long> tag_counts;
  double mean_green_square_distractors = 0.0;
  long green_square_targets = 0;
  long red_circle_total = 0;

  std::string to_json() const;
};

// Per-(color,shape[,size]) target/distractor frequencies plus world density.
// Precondition: nonempty list.
StatsReport dataset_stats(const std::vector<Example>& examples);

// Token string for a world object: "red_circle" or "2_red_circle".
std::string object_token(const WorldObject& obj);

}  // namespace refex
