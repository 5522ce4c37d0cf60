#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mirrornas {

inline constexpr int kDefaultMaxLen = 24;

enum class OpCategory : std::uint8_t { DwConv, MaxPool, AvgPool, Identity, Add, Concat };
inline constexpr int kNumCategories = 6;

struct OpKind {
  OpCategory category = OpCategory::Identity;
  int kernel = 0;

  bool binary() const { return category == OpCategory::Add || category == OpCategory::Concat; }
  bool legal() const;

  friend auto operator<=>(const OpKind&, const OpKind&) = default;
};

namespace ops {
inline constexpr OpKind kDwConv1{OpCategory::DwConv, 1};
inline constexpr OpKind kDwConv3{OpCategory::DwConv, 3};
inline constexpr OpKind kDwConv5{OpCategory::DwConv, 5};
inline constexpr OpKind kMaxPool3{OpCategory::MaxPool, 3};
inline constexpr OpKind kMaxPool5{OpCategory::MaxPool, 5};
inline constexpr OpKind kAvgPool3{OpCategory::AvgPool, 3};
inline constexpr OpKind kAvgPool5{OpCategory::AvgPool, 5};
inline constexpr OpKind kIdentity{OpCategory::Identity, 0};
inline constexpr OpKind kAdd{OpCategory::Add, 0};
inline constexpr OpKind kConcat{OpCategory::Concat, 0};
}  // namespace ops

/// All legal operations in canonical order. Order matters: it is the tie-break
/// order used by greedy decisions everywhere in the library.
std::vector<OpKind> full_op_pool();

/// Wire name of a category ("dwconv", "maxpool", ...).
std::string_view category_name(OpCategory c);
std::optional<OpCategory> category_from_name(std::string_view name);

/// Short pool token such as "dwconv3" or "add"; inverse of parse_op_token.
std::string op_token(OpKind op);
OpKind parse_op_token(std::string_view token);  // throws std::invalid_argument

/// Predecessor codes: 0 = absent, 1 = block input, i+1 = layer at position i.
inline constexpr int kNoPred = 0;
inline constexpr int kBlockInput = 1;

/// A layer decision without its position. This is what the agent chooses.
struct LayerCode {
  OpKind op;
  int pred1 = kBlockInput;
  int pred2 = kNoPred;

  friend auto operator<=>(const LayerCode&, const LayerCode&) = default;
};

struct Layer {
  int position = 1;
  OpKind op;
  int pred1 = kBlockInput;
  int pred2 = kNoPred;

  LayerCode code() const { return {op, pred1, pred2}; }
  static Layer at(int position, LayerCode c) { return {position, c.op, c.pred1, c.pred2}; }

  friend auto operator<=>(const Layer&, const Layer&) = default;
};

/// Variable-length block of layers. The output concat over successor-less
/// layers is implicit. `max_len` bounds the length and normalizes predecessor
/// features; it is not part of the block's identity.
struct BlockArch {
  std::vector<Layer> layers;
  int max_len = kDefaultMaxLen;

  std::size_t size() const { return layers.size(); }
  bool operator==(const BlockArch& o) const { return layers == o.layers; }

  /// Appends a layer at the next position.
  BlockArch& push(LayerCode c);
  static BlockArch from_codes(std::span<const LayerCode> codes, int max_len = kDefaultMaxLen);
};

struct Violation {
  int position = 0;  // 0 = block-level
  std::string message;

  friend bool operator==(const Violation&, const Violation&) = default;
};

/// Returns every invariant violation; empty means valid.
std::vector<Violation> validate(const BlockArch& arch);
inline bool is_valid(const BlockArch& arch) { return validate(arch).empty(); }

/// Enumerates legal layer codes for `position` drawn from `pool`, in canonical
/// order: pool order, then pred1 ascending, then pred2 ascending.
std::vector<LayerCode> legal_codes(int position, std::span<const OpKind> pool);

class ArchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One (state, action) pair: state is the layer at step t; action is the code
/// of layer t+1, or nullopt for terminate.
struct Step {
  Layer state;
  std::optional<LayerCode> action;

  friend bool operator==(const Step&, const Step&) = default;
};

struct Trajectory {
  std::vector<Step> steps;
  int max_len = kDefaultMaxLen;

  std::size_t size() const { return steps.size(); }
  friend bool operator==(const Trajectory& a, const Trajectory& b) { return a.steps == b.steps; }
};

Trajectory to_trajectory(const BlockArch& arch);      // throws ArchError
BlockArch from_trajectory(const Trajectory& traj);    // throws ArchError

/// Deterministic whitespace-free JSON text, e.g.
/// {"layers":[{"op":"dwconv","k":3,"p":[1,0]}]}
std::string canonical_serialize(const BlockArch& arch);

/// Parses canonical (or any equivalent JSON) text. The result is validated
/// against `max_len`; anything unparseable or invalid throws ParseError.
BlockArch parse_arch(std::string_view text, int max_len = kDefaultMaxLen);

/// Calls `visit` for every valid block with 1..max_layers layers over `pool`,
/// each exactly once, shorter blocks first, then in legal_codes order.
void for_each_block(int max_layers, std::span<const OpKind> pool,
                    const std::function<void(const BlockArch&)>& visit,
                    int max_len = kDefaultMaxLen);
/// Number of blocks for_each_block would visit, as a double to survive
/// overflow.
double count_blocks(int max_layers, std::span<const OpKind> pool);
std::vector<BlockArch> enumerate_blocks(int max_layers, std::span<const OpKind> pool,
                                        int max_len = kDefaultMaxLen);

/// Graphviz digraph with an "input" node, one node per layer and an "output"
/// concat node fed by every successor-less layer.
std::string to_dot(const BlockArch& arch, std::string_view graph_name = "block");

/// Positions (1-based) of layers nobody consumes.
std::vector<int> output_layers(const BlockArch& arch);

}  // namespace mirrornas
