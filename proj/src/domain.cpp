#include "refex/domain.hpp"

#include <algorithm>

#include "refex/errors.hpp"

namespace refex {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::two_attr: return "two-attr";
    case Variant::three_attr: return "three-attr";
    case Variant::three_attr_rel: return "three-attr-rel";
  }
  return "?";
}

std::string to_string(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
  }
  return "?";
}

std::string to_string(Shape s) {
  switch (s) {
    case Shape::square: return "square";
    case Shape::circle: return "circle";
    case Shape::cylinder: return "cylinder";
  }
  return "?";
}

std::string to_string(SizeWord w) { return w == SizeWord::small ? "small" : "big"; }

std::string to_string(Relation r) {
  switch (r) {
    case Relation::same_size: return "same size";
    case Relation::same_color: return "same color";
    case Relation::same_shape: return "same shape";
  }
  return "?";
}

std::string to_string(SplitTag t) {
  switch (t) {
    case SplitTag::random: return "random";
    case SplitTag::A1: return "A1";
    case SplitTag::A2: return "A2";
    case SplitTag::A3: return "A3";
    case SplitTag::A4: return "A4";
  }
  return "?";
}

std::string relation_kind_word(Relation r) {
  switch (r) {
    case Relation::same_size: return "size";
    case Relation::same_color: return "color";
    case Relation::same_shape: return "shape";
  }
  return "?";
}

std::optional<Variant> parse_variant(const std::string& s) {
  if (s == "two-attr") return Variant::two_attr;
  if (s == "three-attr") return Variant::three_attr;
  if (s == "three-attr-rel") return Variant::three_attr_rel;
  return std::nullopt;
}

std::optional<Color> parse_color(const std::string& s) {
  if (s == "red") return Color::red;
  if (s == "green") return Color::green;
  if (s == "blue") return Color::blue;
  return std::nullopt;
}

std::optional<Shape> parse_shape(const std::string& s) {
  if (s == "square") return Shape::square;
  if (s == "circle") return Shape::circle;
  if (s == "cylinder") return Shape::cylinder;
  return std::nullopt;
}

std::optional<SizeWord> parse_size_word(const std::string& s) {
  if (s == "small") return SizeWord::small;
  if (s == "big") return SizeWord::big;
  return std::nullopt;
}

std::optional<SplitTag> parse_split_tag(const std::string& s) {
  if (s == "random") return SplitTag::random;
  if (s == "A1") return SplitTag::A1;
  if (s == "A2") return SplitTag::A2;
  if (s == "A3") return SplitTag::A3;
  if (s == "A4") return SplitTag::A4;
  return std::nullopt;
}

Variant command_variant(const Command& cmd) {
  if (std::holds_alternative<TwoAttrCmd>(cmd)) return Variant::two_attr;
  if (std::holds_alternative<ThreeAttrCmd>(cmd)) return Variant::three_attr;
  return Variant::three_attr_rel;
}

std::vector<SplitTag> applicable_splits(Variant v) {
  if (v == Variant::three_attr) return {SplitTag::A1, SplitTag::A2, SplitTag::A3, SplitTag::A4};
  return {SplitTag::A1, SplitTag::A2};
}

namespace {

struct Entry {
  int cell;
  WorldObject obj;
};

std::vector<Entry> entries(const GridWorld& world) {
  std::vector<Entry> out;
  out.reserve(world.cells.size());
  for (const auto& [cell, obj] : world.cells) out.push_back({cell, obj});
  return out;
}

bool matches_part(const WorldObject& obj, const ObjDesc& desc) {
  if (desc.color && obj.color != *desc.color) return false;
  return obj.shape == desc.shape;
}

// Unique strict extremum by size; ties are ambiguous.
ResolveResult pick_extremum(const std::vector<Entry>& pool, SizeWord word) {
  if (pool.empty()) return ResolveResult::no_match();
  const Entry* best = &pool.front();
  bool tie = false;
  for (size_t i = 1; i < pool.size(); ++i) {
    const int a = *pool[i].obj.size;
    const int b = *best->obj.size;
    const bool better = word == SizeWord::small ? a < b : a > b;
    if (better) {
      best = &pool[i];
      tie = false;
    } else if (a == b) {
      tie = true;
    }
  }
  if (tie) return ResolveResult::ambiguous();
  return ResolveResult::found(best->cell);
}

// Resolve an object description against a pool: filter by color/shape, then
// either require uniqueness or apply the size-word extremum.
ResolveResult resolve_desc(const std::vector<Entry>& pool, const ObjDesc& desc) {
  std::vector<Entry> part;
  for (const Entry& e : pool)
    if (matches_part(e.obj, desc)) part.push_back(e);
  if (part.empty()) return ResolveResult::no_match();
  if (!desc.size_word) {
    if (part.size() > 1) return ResolveResult::ambiguous();
    return ResolveResult::found(part.front().cell);
  }
  return pick_extremum(part, *desc.size_word);
}

bool satisfies_relation(const WorldObject& obj, Relation rel, const WorldObject& referent) {
  switch (rel) {
    case Relation::same_size: return obj.size == referent.size;
    case Relation::same_color: return obj.color == referent.color;
    case Relation::same_shape: return obj.shape == referent.shape;
  }
  return false;
}

}  // namespace

ResolveResult resolve_description(const GridWorld& world, const ObjDesc& desc) {
  return resolve_desc(entries(world), desc);
}

ResolveResult resolve_target(const GridWorld& world, const Command& command) {
  if (world.variant != command_variant(command))
    throw contract_violation("resolve_target: world variant " + to_string(world.variant) +
                             " does not match command variant " + to_string(command_variant(command)));

  const auto all = entries(world);

  if (const auto* cmd = std::get_if<TwoAttrCmd>(&command)) {
    int found = -1;
    for (const Entry& e : all) {
      if (e.obj.color == cmd->color && e.obj.shape == cmd->shape) {
        if (found >= 0) return ResolveResult::ambiguous();
        found = e.cell;
      }
    }
    if (found < 0) return ResolveResult::no_match();
    return ResolveResult::found(found);
  }

  if (const auto* cmd = std::get_if<ThreeAttrCmd>(&command)) {
    std::vector<Entry> pool;
    for (const Entry& e : all)
      if (e.obj.color == cmd->color && e.obj.shape == cmd->shape) pool.push_back(e);
    if (pool.empty()) return ResolveResult::no_match();
    return pick_extremum(pool, cmd->size_word);
  }

  const auto& cmd = std::get<ThreeAttrRelCmd>(command);

  // Stage 1: the referent must be uniquely described on its own.
  const ResolveResult ref = resolve_desc(all, cmd.referent);
  if (!ref.ok()) return ref;
  const WorldObject& referent = world.cells.at(ref.cell);

  // Stage 2: target candidates match the description's color/shape part and
  // the relation against the referent; the size word then picks the extremum.
  std::vector<Entry> candidates;
  for (const Entry& e : all) {
    if (e.cell == ref.cell) continue;
    if (!matches_part(e.obj, cmd.target)) continue;
    if (!satisfies_relation(e.obj, cmd.rel, referent)) continue;
    candidates.push_back(e);
  }
  if (candidates.empty()) return ResolveResult::no_match();
  if (!cmd.target.size_word) {
    if (candidates.size() > 1) return ResolveResult::ambiguous();
    return ResolveResult::found(candidates.front().cell);
  }
  return pick_extremum(candidates, *cmd.target.size_word);
}

std::set<SplitTag> tag_splits(const Example& example) {
  std::set<SplitTag> tags{SplitTag::random};

  const auto it = example.world.cells.find(example.target);
  if (it != example.world.cells.end() && it->second.color == Color::green && it->second.shape == Shape::square)
    tags.insert(SplitTag::A1);

  for (const auto& [cell, obj] : example.world.cells) {
    if (obj.color == Color::red && obj.shape == Shape::circle) {
      tags.insert(SplitTag::A2);
      break;
    }
  }

  if (const auto* cmd = std::get_if<ThreeAttrCmd>(&example.command)) {
    if (cmd->size_word == SizeWord::small && cmd->color == Color::green && cmd->shape == Shape::circle &&
        it != example.world.cells.end() && it->second.size == 2)
      tags.insert(SplitTag::A3);
    if (cmd->size_word == SizeWord::small && cmd->color == Color::blue && cmd->shape == Shape::cylinder)
      tags.insert(SplitTag::A4);
  }
  return tags;
}

namespace {

void push_desc_padded(const ObjDesc& d, std::vector<std::string>& out) {
  out.push_back(d.size_word ? to_string(*d.size_word) : kPadToken);
  out.push_back(d.color ? to_string(*d.color) : kPadToken);
  out.push_back(to_string(d.shape));
}

}  // namespace

std::vector<std::string> command_tokens(const Command& command) {
  std::vector<std::string> out;
  if (const auto* cmd = std::get_if<TwoAttrCmd>(&command)) {
    out = {to_string(cmd->color), to_string(cmd->shape)};
  } else if (const auto* cmd = std::get_if<ThreeAttrCmd>(&command)) {
    out = {to_string(cmd->size_word), to_string(cmd->color), to_string(cmd->shape)};
  } else {
    const auto& rel = std::get<ThreeAttrRelCmd>(command);
    out.reserve(kRelCommandSlots);
    push_desc_padded(rel.target, out);
    out.push_back("same");
    out.push_back(relation_kind_word(rel.rel));
    push_desc_padded(rel.referent, out);
  }
  return out;
}

std::vector<std::string> command_surface(const Command& command) {
  std::vector<std::string> out = command_tokens(command);
  std::erase(out, kPadToken);
  return out;
}

namespace {

ObjDesc parse_desc(const std::vector<std::string>& tokens, size_t begin, size_t end) {
  if (begin >= end) throw data_error("empty object description in command");
  ObjDesc d;
  size_t i = begin;
  if (auto w = parse_size_word(tokens[i])) {
    d.size_word = *w;
    ++i;
  }
  if (i < end) {
    if (auto c = parse_color(tokens[i])) {
      d.color = *c;
      ++i;
    }
  }
  if (i + 1 != end) throw data_error("malformed object description in command");
  const auto s = parse_shape(tokens[i]);
  if (!s) throw data_error("expected shape word, got '" + tokens[i] + "'");
  d.shape = *s;
  return d;
}

}  // namespace

Command parse_command(Variant variant, const std::vector<std::string>& tokens) {
  switch (variant) {
    case Variant::two_attr: {
      if (tokens.size() != 2) throw data_error("two-attr command must have 2 tokens");
      const auto c = parse_color(tokens[0]);
      const auto s = parse_shape(tokens[1]);
      if (!c || !s) throw data_error("malformed two-attr command");
      return TwoAttrCmd{*c, *s};
    }
    case Variant::three_attr: {
      if (tokens.size() != 3) throw data_error("three-attr command must have 3 tokens");
      const auto w = parse_size_word(tokens[0]);
      const auto c = parse_color(tokens[1]);
      const auto s = parse_shape(tokens[2]);
      if (!w || !c || !s) throw data_error("malformed three-attr command");
      return ThreeAttrCmd{*w, *c, *s};
    }
    case Variant::three_attr_rel: {
      const auto same = std::find(tokens.begin(), tokens.end(), "same");
      if (same == tokens.end() || same + 1 == tokens.end())
        throw data_error("three-attr-rel command must contain 'same <kind>'");
      const size_t same_at = static_cast<size_t>(same - tokens.begin());
      ThreeAttrRelCmd cmd;
      cmd.target = parse_desc(tokens, 0, same_at);
      const std::string& kind = tokens[same_at + 1];
      if (kind == "size")
        cmd.rel = Relation::same_size;
      else if (kind == "color")
        cmd.rel = Relation::same_color;
      else if (kind == "shape")
        cmd.rel = Relation::same_shape;
      else
        throw data_error("unknown relation kind '" + kind + "'");
      cmd.referent = parse_desc(tokens, same_at + 2, tokens.size());
      return cmd;
    }
  }
  throw data_error("unknown variant");
}

}  // namespace refex
