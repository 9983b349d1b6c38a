#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace refex {

inline constexpr int kGridCells = 36;
inline constexpr int kGridSide = 6;
inline constexpr int kMinSize = 1;
inline constexpr int kMaxSize = 4;
inline constexpr int kRelCommandSlots = 8;

enum class Variant : uint8_t { two_attr, three_attr, three_attr_rel };
enum class Color : uint8_t { red, green, blue };
enum class Shape : uint8_t { square, circle, cylinder };
enum class SizeWord : uint8_t { small, big };
enum class Relation : uint8_t { same_size, same_color, same_shape };
enum class SplitTag : uint8_t { random, A1, A2, A3, A4 };

inline constexpr int kNumColors = 3;
inline constexpr int kNumShapes = 3;

std::string to_string(Variant v);
std::string to_string(Color c);
std::string to_string(Shape s);
std::string to_string(SizeWord w);
std::string to_string(Relation r);
std::string to_string(SplitTag t);

std::optional<Variant> parse_variant(const std::string& s);
std::optional<Color> parse_color(const std::string& s);
std::optional<Shape> parse_shape(const std::string& s);
std::optional<SizeWord> parse_size_word(const std::string& s);
std::optional<SplitTag> parse_split_tag(const std::string& s);

// Kind word is the second surface token of a relation ("same size" -> "size").
std::string relation_kind_word(Relation r);

// Cells are row-major on the 6x6 grid: row = idx / 6, col = idx % 6.
inline int cell_row(int cell) { return cell / kGridSide; }
inline int cell_col(int cell) { return cell % kGridSide; }

struct WorldObject {
  Color color{};
  Shape shape{};
  std::optional<int> size;  // present iff the owning world's variant != two_attr

  bool operator==(const WorldObject&) const = default;
};

// Sparse map of objects; cells absent from the map are empty.
struct GridWorld {
  Variant variant{};
  std::map<int, WorldObject> cells;

  bool operator==(const GridWorld&) const = default;
};

struct TwoAttrCmd {
  Color color{};
  Shape shape{};
  bool operator==(const TwoAttrCmd&) const = default;
};

struct ThreeAttrCmd {
  SizeWord size_word{};
  Color color{};
  Shape shape{};
  bool operator==(const ThreeAttrCmd&) const = default;
};

// Object description in a relational command. Shape is mandatory: an
// all-optional description could be unresolvable.
struct ObjDesc {
  std::optional<SizeWord> size_word;
  std::optional<Color> color;
  Shape shape{};
  bool operator==(const ObjDesc&) const = default;
};

struct ThreeAttrRelCmd {
  ObjDesc target;
  Relation rel{};
  ObjDesc referent;
  bool operator==(const ThreeAttrRelCmd&) const = default;
};

using Command = std::variant<TwoAttrCmd, ThreeAttrCmd, ThreeAttrRelCmd>;

Variant command_variant(const Command& cmd);

struct Example {
  GridWorld world;
  Command command;
  int target = -1;
  std::set<SplitTag> tags;

  bool operator==(const Example&) const = default;
};

// --- target resolution oracle ---------------------------------------------

enum class ResolveStatus : uint8_t { ok, no_match, ambiguous };

struct ResolveResult {
  ResolveStatus status = ResolveStatus::no_match;
  int cell = -1;  // valid iff status == ok

  static ResolveResult found(int cell) { return {ResolveStatus::ok, cell}; }
  static ResolveResult no_match() { return {ResolveStatus::no_match, -1}; }
  static ResolveResult ambiguous() { return {ResolveStatus::ambiguous, -1}; }

  bool ok() const { return status == ResolveStatus::ok; }
};

// Ground-truth resolution. NoMatch / Ambiguous are ordinary return values;
// a world/command variant mismatch is a contract violation.
ResolveResult resolve_target(const GridWorld& world, const Command& command);

// Stage-1 resolution of a lone object description (the referent rule):
// filter by color/shape, then unique element or size-word extremum.
ResolveResult resolve_description(const GridWorld& world, const ObjDesc& desc);

// Split membership. `random` is always present; A1 = green-square target,
// A2 = red circle anywhere, A3/A4 per the three-attr held-out commands.
std::set<SplitTag> tag_splits(const Example& example);

// Surface form: 2 tokens (two-attr), 3 (three-attr) or a fixed 8-slot
// template with "PAD" filling omitted optional slots (three-attr-rel).
std::vector<std::string> command_tokens(const Command& command);

// Surface form with PAD slots removed (the serialized representation).
std::vector<std::string> command_surface(const Command& command);

// Inverse of command_surface for a given variant.
Command parse_command(Variant variant, const std::vector<std::string>& tokens);

// Splits legal for a variant: A3/A4 exist only for three-attr.
std::vector<SplitTag> applicable_splits(Variant v);

inline constexpr const char* kPadToken = "PAD";

}  // namespace refex
