#include "refex/datagen.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "refex/errors.hpp"

namespace refex {

using ordered_json = nlohmann::ordered_json;

GenSpec GenSpec::defaults(Variant v, uint64_t seed) {
  GenSpec spec;
  spec.variant = v;
  spec.seed = seed;
  const auto splits = applicable_splits(v);
  spec.holdout.insert(splits.begin(), splits.end());
  return spec;
}

void GenSpec::validate() const {
  if (train_count <= 0 || val_count <= 0 || test_count <= 0)
    throw config_error("gen: train/val/test counts must be positive");
  if (min_objects < 2) throw config_error("gen: min-objects must be at least 2");
  if (max_objects > kGridCells) throw config_error("gen: max-objects must be at most 36");
  if (min_objects > max_objects) throw config_error("gen: min-objects exceeds max-objects");
  if (green_square_distractor_scale < 0.0 || green_square_distractor_scale > 1.0)
    throw config_error("gen: green-square-distractor-scale must lie in [0,1]");
  for (SplitTag t : holdout) {
    const auto legal = applicable_splits(variant);
    if (t == SplitTag::random || std::find(legal.begin(), legal.end(), t) == legal.end())
      throw config_error("gen: split " + to_string(t) + " is not applicable to variant " + to_string(variant));
  }
}

namespace {

constexpr int kMaxAttempts = 1000;

// Stream section offsets; example i of a section draws from stream
// (section << 40) | i, so every example has its own deterministic stream.
enum class Section : uint64_t { train = 1, val = 2, random_test = 3, A1 = 4, A2 = 5, A3 = 6, A4 = 7 };

uint64_t stream_id(Section s, uint64_t index) { return (static_cast<uint64_t>(s) << 40) | index; }

Section section_for_tag(SplitTag t) {
  switch (t) {
    case SplitTag::A1: return Section::A1;
    case SplitTag::A2: return Section::A2;
    case SplitTag::A3: return Section::A3;
    case SplitTag::A4: return Section::A4;
    default: throw contract_violation("no targeted section for tag " + to_string(t));
  }
}

struct DrawMode {
  const std::set<SplitTag>* reject = nullptr;   // reject examples carrying any of these tags
  std::optional<SplitTag> require;              // targeted generation for one held-out tag
};

Color random_color(StreamRng& rng) { return static_cast<Color>(rng.below(3)); }
Shape random_shape(StreamRng& rng) { return static_cast<Shape>(rng.below(3)); }

// K distinct cells via partial Fisher-Yates.
std::vector<int> sample_cells(StreamRng& rng, int k) {
  std::array<int, kGridCells> all{};
  for (int i = 0; i < kGridCells; ++i) all[i] = i;
  std::vector<int> out(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<uint32_t>(kGridCells - i)));
    std::swap(all[i], all[j]);
    out[static_cast<size_t>(i)] = all[i];
  }
  return out;
}

int pair_index(Color c, Shape s) { return static_cast<int>(c) * kNumShapes + static_cast<int>(s); }

std::pair<Color, Shape> pair_from_index(int idx) {
  return {static_cast<Color>(idx / kNumShapes), static_cast<Shape>(idx % kNumShapes)};
}

// Distractor (color, shape), never the command pair. Half the draws share
// exactly one command attribute (the ReaSCAN-style related distractors that
// make partial matches plentiful), half are uniform over the remaining
// pairs; commands one attribute away from green-square additionally pull
// green squares into the background. A sampled green square is kept with
// probability rho and otherwise redrawn from the non-green-square pairs, so
// its marginal rate is exactly rho times the unscaled rate while the object
// count stays untouched.
enum class DistractorStyle : uint8_t {
  uniform,              // uniform over non-command pairs
  related,              // half share one command attribute, green-square excluded from the related branch
  related_gs_background // related plus a boosted green-square background near green/square commands
};

std::pair<Color, Shape> draw_distractor_pair(StreamRng& rng, Color cmd_color, Shape cmd_shape, double rho,
                                             DistractorStyle style) {
  const int exclude_idx = pair_index(cmd_color, cmd_shape);
  const int gs = pair_index(Color::green, Shape::square);
  const bool near_gs = style == DistractorStyle::related_gs_background &&
                       ((cmd_color == Color::green) != (cmd_shape == Shape::square));
  int idx;
  if (near_gs && rng.chance(0.35)) {
    idx = gs;
  } else if (style != DistractorStyle::uniform && rng.chance(0.5)) {
    if (rng.chance(0.5)) {
      // same color, different shape
      int s = static_cast<int>(rng.below(2));
      if (s >= static_cast<int>(cmd_shape)) ++s;
      idx = pair_index(cmd_color, static_cast<Shape>(s));
    } else {
      // same shape, different color
      int c = static_cast<int>(rng.below(2));
      if (c >= static_cast<int>(cmd_color)) ++c;
      idx = pair_index(static_cast<Color>(c), cmd_shape);
    }
    if (style == DistractorStyle::related && idx == gs) {
      // keep the related branch free of green squares; exactly one other option remains
      if (cmd_color == Color::green) {
        for (int s = 0; s < kNumShapes; ++s)
          if (s != static_cast<int>(cmd_shape) && s != static_cast<int>(Shape::square))
            idx = pair_index(cmd_color, static_cast<Shape>(s));
      } else {
        for (int c = 0; c < kNumColors; ++c)
          if (c != static_cast<int>(cmd_color) && c != static_cast<int>(Color::green))
            idx = pair_index(static_cast<Color>(c), cmd_shape);
      }
    }
  } else {
    idx = static_cast<int>(rng.below(8));
    if (idx >= exclude_idx) ++idx;
  }
  if (idx == gs && rho < 1.0 && !rng.chance(rho)) {
    // redraw among pairs excluding both the command pair and green-square
    int redrawn = static_cast<int>(rng.below(7));
    const int lo = std::min(exclude_idx, gs);
    const int hi = std::max(exclude_idx, gs);
    if (redrawn >= lo) ++redrawn;
    if (redrawn >= hi) ++redrawn;
    idx = redrawn;
  }
  return pair_from_index(idx);
}

Example finish(GridWorld world, Command command, int intended_target) {
  Example ex;
  ex.world = std::move(world);
  ex.command = std::move(command);
  ex.target = intended_target;
  ex.tags = tag_splits(ex);
  return ex;
}

bool mode_accepts(const Example& ex, const DrawMode& mode) {
  if (mode.require && !ex.tags.contains(*mode.require)) return false;
  if (mode.reject) {
    for (SplitTag t : *mode.reject) {
      if (mode.require && t == *mode.require) continue;
      if (ex.tags.contains(t)) return false;
    }
  }
  return true;
}

std::optional<Example> attempt_two_attr(const GenSpec& spec, StreamRng& rng, const DrawMode& mode) {
  Color c;
  Shape s;
  if (mode.require == SplitTag::A1) {
    c = Color::green;
    s = Shape::square;
  } else {
    c = random_color(rng);
    s = random_shape(rng);
  }
  const int k = rng.range(spec.min_objects, spec.max_objects);
  const auto cells = sample_cells(rng, k);

  GridWorld world;
  world.variant = Variant::two_attr;
  world.cells[cells[0]] = WorldObject{c, s, std::nullopt};
  for (int i = 1; i < k; ++i) {
    const auto [dc, ds] = draw_distractor_pair(rng, c, s, spec.green_square_distractor_scale, DistractorStyle::related_gs_background);
    world.cells[cells[static_cast<size_t>(i)]] = WorldObject{dc, ds, std::nullopt};
  }

  Example ex = finish(std::move(world), TwoAttrCmd{c, s}, cells[0]);
  if (!mode_accepts(ex, mode)) return std::nullopt;
  const auto res = resolve_target(ex.world, ex.command);
  if (!res.ok() || res.cell != ex.target) return std::nullopt;
  return ex;
}

std::optional<Example> attempt_three_attr(const GenSpec& spec, StreamRng& rng, const DrawMode& mode) {
  SizeWord w;
  Color c;
  Shape s;
  if (mode.require == SplitTag::A1) {
    w = rng.chance(0.5) ? SizeWord::small : SizeWord::big;
    c = Color::green;
    s = Shape::square;
  } else if (mode.require == SplitTag::A3) {
    w = SizeWord::small;
    c = Color::green;
    s = Shape::circle;
  } else if (mode.require == SplitTag::A4) {
    w = SizeWord::small;
    c = Color::blue;
    s = Shape::cylinder;
  } else {
    w = rng.chance(0.5) ? SizeWord::small : SizeWord::big;
    c = random_color(rng);
    s = random_shape(rng);
  }

  const int k = rng.range(spec.min_objects, spec.max_objects);

  // At least two command-pair matches with pairwise-distinct sizes, so the
  // size word does relative work. A3 additionally pins the minimum size to 2.
  std::vector<int> sizes;
  if (mode.require == SplitTag::A3) {
    const int m = rng.range(2, 3);
    std::array<int, 2> rest{3, 4};
    if (rng.chance(0.5)) std::swap(rest[0], rest[1]);
    sizes.push_back(2);
    for (int i = 0; i + 1 < m; ++i) sizes.push_back(rest[static_cast<size_t>(i)]);
  } else {
    const int m = rng.range(2, std::min(4, k));
    std::array<int, 4> all{1, 2, 3, 4};
    for (int i = 0; i < m; ++i) {
      const int j = i + static_cast<int>(rng.below(static_cast<uint32_t>(4 - i)));
      std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
      sizes.push_back(all[static_cast<size_t>(i)]);
    }
  }
  const int m = static_cast<int>(sizes.size());
  if (m > k) return std::nullopt;

  const auto cells = sample_cells(rng, k);
  GridWorld world;
  world.variant = Variant::three_attr;
  int best = 0;
  for (int i = 0; i < m; ++i) {
    world.cells[cells[static_cast<size_t>(i)]] = WorldObject{c, s, sizes[static_cast<size_t>(i)]};
    const bool better = w == SizeWord::small ? sizes[static_cast<size_t>(i)] < sizes[static_cast<size_t>(best)]
                                             : sizes[static_cast<size_t>(i)] > sizes[static_cast<size_t>(best)];
    if (better) best = i;
  }
  for (int i = m; i < k; ++i) {
    const auto [dc, ds] = draw_distractor_pair(rng, c, s, spec.green_square_distractor_scale, DistractorStyle::uniform);
    world.cells[cells[static_cast<size_t>(i)]] = WorldObject{dc, ds, rng.range(kMinSize, kMaxSize)};
  }

  Example ex = finish(std::move(world), ThreeAttrCmd{w, c, s}, cells[static_cast<size_t>(best)]);
  if (!mode_accepts(ex, mode)) return std::nullopt;
  const auto res = resolve_target(ex.world, ex.command);
  if (!res.ok() || res.cell != ex.target) return std::nullopt;
  return ex;
}

std::optional<Example> attempt_three_attr_rel(const GenSpec& spec, StreamRng& rng, const DrawMode& mode) {
  const auto rel = static_cast<Relation>(rng.below(3));

  ObjDesc target_desc;
  target_desc.shape = random_shape(rng);
  if (rng.chance(0.5)) target_desc.color = random_color(rng);
  if (rng.chance(0.5)) target_desc.size_word = rng.chance(0.5) ? SizeWord::small : SizeWord::big;
  if (mode.require == SplitTag::A1) {
    target_desc.color = Color::green;
    target_desc.shape = Shape::square;
  }

  ObjDesc referent_desc;
  referent_desc.shape = random_shape(rng);
  if (rng.chance(0.5)) referent_desc.color = random_color(rng);
  if (rng.chance(0.5)) referent_desc.size_word = rng.chance(0.5) ? SizeWord::small : SizeWord::big;

  // Combinations where the relation filter cannot discriminate need a size
  // word on the target side; same-shape further requires equal shapes.
  if (rel == Relation::same_shape) {
    referent_desc.shape = target_desc.shape;
    if (!target_desc.size_word) target_desc.size_word = rng.chance(0.5) ? SizeWord::small : SizeWord::big;
  }
  if (rel == Relation::same_color && target_desc.color) {
    if (referent_desc.color && *referent_desc.color != *target_desc.color) return std::nullopt;
    referent_desc.color = target_desc.color;
    if (!target_desc.size_word) target_desc.size_word = rng.chance(0.5) ? SizeWord::small : SizeWord::big;
  }

  const int k = rng.range(std::max(spec.min_objects, 3), spec.max_objects);
  const auto cells = sample_cells(rng, k);

  WorldObject referent{referent_desc.color ? *referent_desc.color : random_color(rng), referent_desc.shape,
                       rng.range(kMinSize, kMaxSize)};

  WorldObject target{target_desc.color ? *target_desc.color : random_color(rng), target_desc.shape,
                     rng.range(kMinSize, kMaxSize)};
  switch (rel) {
    case Relation::same_size: target.size = referent.size; break;
    case Relation::same_color:
      if (target_desc.color && *target_desc.color != referent.color) return std::nullopt;
      target.color = referent.color;
      break;
    case Relation::same_shape:
      if (target.shape != referent.shape) return std::nullopt;
      break;
  }

  // A second target-description match keeps the relation load-bearing.
  WorldObject rival{target_desc.color ? *target_desc.color : random_color(rng), target_desc.shape,
                    rng.range(kMinSize, kMaxSize)};

  GridWorld world;
  world.variant = Variant::three_attr_rel;
  world.cells[cells[0]] = referent;
  world.cells[cells[1]] = target;
  world.cells[cells[2]] = rival;
  for (int i = 3; i < k; ++i) {
    const auto gs = pair_index(Color::green, Shape::square);
    int idx = static_cast<int>(rng.below(9));
    if (idx == gs && spec.green_square_distractor_scale < 1.0 && !rng.chance(spec.green_square_distractor_scale)) {
      int redrawn = static_cast<int>(rng.below(8));
      if (redrawn >= gs) ++redrawn;
      idx = redrawn;
    }
    const auto [dc, ds] = pair_from_index(idx);
    world.cells[cells[static_cast<size_t>(i)]] = WorldObject{dc, ds, rng.range(kMinSize, kMaxSize)};
  }

  Command cmd = ThreeAttrRelCmd{target_desc, rel, referent_desc};
  const auto res = resolve_target(world, cmd);
  if (!res.ok() || res.cell != cells[1]) return std::nullopt;

  // Require >= 2 non-referent description matches (the intended target plus a rival).
  const ResolveResult ref = resolve_description(world, referent_desc);
  int part_matches = 0;
  for (const auto& [cell, obj] : world.cells) {
    if (cell == ref.cell) continue;
    if ((!target_desc.color || obj.color == *target_desc.color) && obj.shape == target_desc.shape) ++part_matches;
  }
  if (part_matches < 2) return std::nullopt;

  Example ex = finish(std::move(world), std::move(cmd), cells[1]);
  if (!mode_accepts(ex, mode)) return std::nullopt;
  return ex;
}

Example generate_with_mode(const GenSpec& spec, StreamRng& rng, const DrawMode& mode, const char* what) {
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::optional<Example> ex;
    switch (spec.variant) {
      case Variant::two_attr: ex = attempt_two_attr(spec, rng, mode); break;
      case Variant::three_attr: ex = attempt_three_attr(spec, rng, mode); break;
      case Variant::three_attr_rel: ex = attempt_three_attr_rel(spec, rng, mode); break;
    }
    if (ex) return std::move(*ex);
  }
  throw data_error(std::string("generation: exceeded ") + std::to_string(kMaxAttempts) + " attempts (" + what +
                   ", variant " + to_string(spec.variant) + ")");
}

std::vector<Example> generate_section(const GenSpec& spec, Section section, int count, const DrawMode& mode,
                                      const char* what) {
  std::vector<Example> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    StreamRng rng(spec.seed, stream_id(section, static_cast<uint64_t>(i)));
    out.push_back(generate_with_mode(spec, rng, mode, what));
  }
  return out;
}

}  // namespace

Example generate_example(const GenSpec& spec, StreamRng& rng) {
  return generate_with_mode(spec, rng, DrawMode{}, "unrestricted example");
}

DatasetBundle generate_bundle(const GenSpec& spec) {
  spec.validate();
  DatasetBundle bundle;
  bundle.spec = spec;

  DrawMode pure;
  pure.reject = &spec.holdout;
  bundle.train = generate_section(spec, Section::train, spec.train_count, pure, "train");
  bundle.val = generate_section(spec, Section::val, spec.val_count, DrawMode{}, "val");
  bundle.random_test = generate_section(spec, Section::random_test, spec.test_count, pure, "random test");

  for (SplitTag t : spec.holdout) {
    DrawMode targeted;
    targeted.require = t;
    targeted.reject = &spec.holdout;
    const std::string what = "split " + to_string(t);
    bundle.split_tests[t] = generate_section(spec, section_for_tag(t), spec.test_count, targeted, what.c_str());
  }
  return bundle;
}

EvalSuite generate_eval_suite(const GenSpec& spec) {
  spec.validate();
  EvalSuite suite;
  DrawMode pure;
  pure.reject = &spec.holdout;
  suite.random_test = generate_section(spec, Section::random_test, spec.test_count, pure, "random test");
  for (SplitTag t : spec.holdout) {
    DrawMode targeted;
    targeted.require = t;
    targeted.reject = &spec.holdout;
    const std::string what = "split " + to_string(t);
    suite.split_tests[t] = generate_section(spec, section_for_tag(t), spec.test_count, targeted, what.c_str());
  }
  return suite;
}

// --- JSONL -------------------------------------------------------------------

std::string object_token(const WorldObject& obj) {
  std::string s;
  if (obj.size) s = std::to_string(*obj.size) + "_";
  return s + to_string(obj.color) + "_" + to_string(obj.shape);
}

std::string example_to_json_line(const Example& example) {
  ordered_json j;
  j["variant"] = to_string(example.world.variant);
  j["command"] = command_surface(example.command);
  ordered_json objs = ordered_json::array();
  for (const auto& [cell, obj] : example.world.cells) {
    ordered_json o;
    o["cell"] = cell;
    o["color"] = to_string(obj.color);
    o["shape"] = to_string(obj.shape);
    if (obj.size) o["size"] = *obj.size;
    objs.push_back(std::move(o));
  }
  j["objects"] = std::move(objs);
  j["target"] = example.target;
  ordered_json tags = ordered_json::array();
  for (SplitTag t : example.tags) tags.push_back(to_string(t));
  j["tags"] = std::move(tags);
  return j.dump();
}

Example example_from_json_line(const std::string& line, long line_number) {
  const auto fail = [line_number](const std::string& msg) -> data_error {
    return data_error("jsonl line " + std::to_string(line_number) + ": " + msg);
  };
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("parse error: ") + e.what());
  }
  try {
    const auto variant = parse_variant(j.at("variant").get<std::string>());
    if (!variant) throw fail("unknown variant '" + j.at("variant").get<std::string>() + "'");

    Example ex;
    ex.world.variant = *variant;
    for (const auto& o : j.at("objects")) {
      const int cell = o.at("cell").get<int>();
      if (cell < 0 || cell >= kGridCells) throw fail("cell out of range");
      const auto color = parse_color(o.at("color").get<std::string>());
      const auto shape = parse_shape(o.at("shape").get<std::string>());
      if (!color || !shape) throw fail("unknown color or shape");
      WorldObject obj{*color, *shape, std::nullopt};
      if (*variant != Variant::two_attr) {
        const int size = o.at("size").get<int>();
        if (size < kMinSize || size > kMaxSize) throw fail("size out of range");
        obj.size = size;
      } else if (o.contains("size")) {
        throw fail("two-attr objects must not carry a size");
      }
      if (ex.world.cells.contains(cell)) throw fail("duplicate cell " + std::to_string(cell));
      ex.world.cells[cell] = obj;
    }
    if (ex.world.cells.empty()) throw fail("world has no objects");

    ex.command = parse_command(*variant, j.at("command").get<std::vector<std::string>>());
    ex.target = j.at("target").get<int>();
    if (!ex.world.cells.contains(ex.target)) throw fail("target cell is empty");
    for (const auto& t : j.at("tags")) {
      const auto tag = parse_split_tag(t.get<std::string>());
      if (!tag) throw fail("unknown tag '" + t.get<std::string>() + "'");
      ex.tags.insert(*tag);
    }
    return ex;
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("schema error: ") + e.what());
  }
}

void write_jsonl(const std::vector<Example>& examples, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open for writing: " + path);
  for (const Example& ex : examples) out << example_to_json_line(ex) << '\n';
  if (!out) throw data_error("write failed: " + path);
}

std::vector<Example> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open: " + path);
  std::vector<Example> out;
  std::string line;
  long line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    out.push_back(example_from_json_line(line, line_number));
  }
  return out;
}

// --- statistics --------------------------------------------------------------

StatsReport dataset_stats(const std::vector<Example>& examples) {
  if (examples.empty()) throw contract_violation("dataset_stats: empty example list");
  StatsReport r;
  r.example_count = static_cast<long>(examples.size());
  long object_total = 0;
  long gs_distractors = 0;
  for (const Example& ex : examples) {
    object_total += static_cast<long>(ex.world.cells.size());
    for (const auto& [cell, obj] : ex.world.cells) {
      auto& count = r.object_counts[object_token(obj)];
      const bool is_target = cell == ex.target;
      (is_target ? count.as_target : count.as_distractor) += 1;
      if (obj.color == Color::green && obj.shape == Shape::square) {
        if (is_target)
          ++r.green_square_targets;
        else
          ++gs_distractors;
      }
      if (obj.color == Color::red && obj.shape == Shape::circle) ++r.red_circle_total;
    }
    for (SplitTag t : ex.tags) ++r.tag_counts[t];
  }
  r.mean_objects = static_cast<double>(object_total) / static_cast<double>(r.example_count);
  r.mean_green_square_distractors = static_cast<double>(gs_distractors) / static_cast<double>(r.example_count);
  return r;
}

std::string StatsReport::to_json() const {
  ordered_json j;
  j["example_count"] = example_count;
  j["mean_objects"] = mean_objects;
  j["mean_green_square_distractors"] = mean_green_square_distractors;
  j["green_square_targets"] = green_square_targets;
  j["red_circle_total"] = red_circle_total;
  ordered_json tags;
  for (const auto& [tag, n] : tag_counts) tags[to_string(tag)] = n;
  j["tag_counts"] = std::move(tags);
  ordered_json objs;
  for (const auto& [token, c] : object_counts) {
    objs[token] = ordered_json{{"target", c.as_target}, {"distractor", c.as_distractor}};
  }
  j["object_counts"] = std::move(objs);
  return j.dump(2);
}

}  // namespace refex
