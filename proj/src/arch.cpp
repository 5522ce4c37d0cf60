#include "mirrornas/arch.hpp"

#include <algorithm>
#include <array>
#include <sstream>

#include <json.hpp>

namespace mirrornas {

namespace {

constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {
    "dwconv", "maxpool", "avgpool", "identity", "add", "concat"};

std::string pred_name(int code) {
  return code == kBlockInput ? std::string("input") : "L" + std::to_string(code - 1);
}

}  // namespace

bool OpKind::legal() const {
  switch (category) {
    case OpCategory::DwConv:
      return kernel == 1 || kernel == 3 || kernel == 5;
    case OpCategory::MaxPool:
    case OpCategory::AvgPool:
      return kernel == 3 || kernel == 5;
    case OpCategory::Identity:
    case OpCategory::Add:
    case OpCategory::Concat:
      return kernel == 0;
  }
  return false;
}

std::vector<OpKind> full_op_pool() {
  using namespace ops;
  return {kDwConv1, kDwConv3, kDwConv5, kMaxPool3, kMaxPool5,
          kAvgPool3, kAvgPool5, kIdentity, kAdd, kConcat};
}

std::string_view category_name(OpCategory c) {
  return kCategoryNames[static_cast<std::size_t>(c)];
}

std::optional<OpCategory> category_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kCategoryNames.size(); ++i) {
    if (kCategoryNames[i] == name) return static_cast<OpCategory>(i);
  }
  return std::nullopt;
}

std::string op_token(OpKind op) {
  std::string s(category_name(op.category));
  if (op.kernel != 0) s += std::to_string(op.kernel);
  return s;
}

OpKind parse_op_token(std::string_view token) {
  for (const OpKind& op : full_op_pool()) {
    if (op_token(op) == token) return op;
  }
  throw std::invalid_argument("unknown op '" + std::string(token) + "'");
}

BlockArch& BlockArch::push(LayerCode c) {
  layers.push_back(Layer::at(static_cast<int>(layers.size()) + 1, c));
  return *this;
}

BlockArch BlockArch::from_codes(std::span<const LayerCode> codes, int max_len) {
  BlockArch arch;
  arch.max_len = max_len;
  for (const LayerCode& c : codes) arch.push(c);
  return arch;
}

std::vector<Violation> validate(const BlockArch& arch) {
  std::vector<Violation> out;
  if (arch.layers.empty()) out.push_back({0, "empty block"});
  if (static_cast<int>(arch.layers.size()) > arch.max_len) {
    out.push_back({0, "length exceeds max_len"});
  }
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const Layer& l = arch.layers[i];
    const int t = static_cast<int>(i) + 1;
    const int pos = l.position;
    if (pos != t) out.push_back({t, "position out of order"});
    if (!l.op.legal()) out.push_back({pos, "illegal kernel for op"});
    if (l.pred1 == kNoPred) out.push_back({pos, "missing first predecessor"});
    if (l.op.binary()) {
      if (l.pred2 == kNoPred) out.push_back({pos, "binary op missing second predecessor"});
      else if (l.pred1 == l.pred2) out.push_back({pos, "binary op with identical predecessors"});
    } else if (l.pred2 != kNoPred) {
      out.push_back({pos, "unary op with second predecessor"});
    }
    for (int p : {l.pred1, l.pred2}) {
      if (p < 0) out.push_back({pos, "negative predecessor code"});
      else if (p > t) out.push_back({pos, "predecessor does not precede layer"});
    }
  }
  return out;
}

std::vector<LayerCode> legal_codes(int position, std::span<const OpKind> pool) {
  std::vector<LayerCode> out;
  for (const OpKind& op : pool) {
    if (op.binary()) {
      for (int a = 1; a <= position; ++a) {
        for (int b = 1; b <= position; ++b) {
          if (a != b) out.push_back({op, a, b});
        }
      }
    } else {
      for (int a = 1; a <= position; ++a) out.push_back({op, a, kNoPred});
    }
  }
  return out;
}

Trajectory to_trajectory(const BlockArch& arch) {
  if (auto v = validate(arch); !v.empty()) {
    throw ArchError("invalid architecture: " + v.front().message);
  }
  Trajectory traj;
  traj.max_len = arch.max_len;
  traj.steps.reserve(arch.layers.size());
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    Step s{arch.layers[i], std::nullopt};
    if (i + 1 < arch.layers.size()) s.action = arch.layers[i + 1].code();
    traj.steps.push_back(s);
  }
  return traj;
}

BlockArch from_trajectory(const Trajectory& traj) {
  BlockArch arch;
  arch.max_len = traj.max_len;
  for (std::size_t i = 0; i < traj.steps.size(); ++i) {
    const Step& s = traj.steps[i];
    const bool last = i + 1 == traj.steps.size();
    if (last != !s.action.has_value()) {
      throw ArchError("trajectory terminates at the wrong step");
    }
    if (!last && *s.action != traj.steps[i + 1].state.code()) {
      throw ArchError("action does not match the next state");
    }
    arch.layers.push_back(s.state);
  }
  if (auto v = validate(arch); !v.empty()) {
    throw ArchError("inconsistent trajectory: " + v.front().message);
  }
  return arch;
}

std::string canonical_serialize(const BlockArch& arch) {
  std::string out = R"({"layers":[)";
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const Layer& l = arch.layers[i];
    if (i) out += ',';
    out += R"({"op":")";
    out += category_name(l.op.category);
    out += R"(","k":)" + std::to_string(l.op.kernel);
    out += R"(,"p":[)" + std::to_string(l.pred1) + ',' + std::to_string(l.pred2) + "]}";
  }
  out += "]}";
  return out;
}

BlockArch parse_arch(std::string_view text, int max_len) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed architecture text: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("layers") || !doc["layers"].is_array()) {
    throw ParseError("architecture must be an object with a \"layers\" array");
  }
  BlockArch arch;
  arch.max_len = max_len;
  for (const auto& item : doc["layers"]) {
    if (!item.is_object() || !item.contains("op") || !item["op"].is_string() ||
        !item.contains("k") || !item["k"].is_number_integer() || !item.contains("p") ||
        !item["p"].is_array() || item["p"].size() != 2 || !item["p"][0].is_number_integer() ||
        !item["p"][1].is_number_integer()) {
      throw ParseError("layer entries need \"op\" (string), \"k\" (int) and \"p\" ([int,int])");
    }
    const auto name = item["op"].get<std::string>();
    const auto cat = category_from_name(name);
    if (!cat) throw ParseError("unknown op name '" + name + "'");
    LayerCode c{{*cat, item["k"].get<int>()}, item["p"][0].get<int>(), item["p"][1].get<int>()};
    arch.push(c);
  }
  if (auto v = validate(arch); !v.empty()) {
    std::ostringstream msg;
    msg << "invalid architecture:";
    for (const auto& x : v) msg << " [layer " << x.position << "] " << x.message << ';';
    throw ParseError(msg.str());
  }
  return arch;
}

void for_each_block(int max_layers, std::span<const OpKind> pool,
                    const std::function<void(const BlockArch&)>& visit, int max_len) {
  const int cap = std::min(max_layers, max_len);
  std::vector<std::vector<LayerCode>> choices;
  for (int t = 1; t <= cap; ++t) choices.push_back(legal_codes(t, pool));

  for (int len = 1; len <= cap; ++len) {
    // Odometer over per-position choices.
    std::vector<std::size_t> idx(len, 0);
    bool empty = false;
    for (int t = 0; t < len; ++t) empty |= choices[t].empty();
    if (empty) continue;
    BlockArch arch;
    arch.max_len = max_len;
    for (;;) {
      arch.layers.clear();
      for (int t = 0; t < len; ++t) arch.push(choices[t][idx[t]]);
      visit(arch);
      int t = len - 1;
      while (t >= 0 && ++idx[t] == choices[t].size()) idx[t--] = 0;
      if (t < 0) break;
    }
  }
}

double count_blocks(int max_layers, std::span<const OpKind> pool) {
  double total = 0.0;
  double prefix = 1.0;
  for (int p = 1; p <= max_layers; ++p) {
    prefix *= static_cast<double>(legal_codes(p, pool).size());
    total += prefix;
  }
  return total;
}

std::vector<BlockArch> enumerate_blocks(int max_layers, std::span<const OpKind> pool,
                                        int max_len) {
  std::vector<BlockArch> out;
  for_each_block(max_layers, pool, [&](const BlockArch& a) { out.push_back(a); }, max_len);
  return out;
}

std::vector<int> output_layers(const BlockArch& arch) {
  std::vector<bool> consumed(arch.layers.size() + 2, false);
  for (const Layer& l : arch.layers) {
    for (int p : {l.pred1, l.pred2}) {
      if (p > kBlockInput && p < static_cast<int>(consumed.size())) consumed[p] = true;
    }
  }
  std::vector<int> out;
  for (const Layer& l : arch.layers) {
    if (!consumed[l.position + 1]) out.push_back(l.position);
  }
  return out;
}

std::string to_dot(const BlockArch& arch, std::string_view graph_name) {
  std::ostringstream os;
  os << "digraph " << graph_name << " {\n";
  os << "  rankdir=TB;\n";
  os << "  input [label=\"input\", shape=box];\n";
  for (const Layer& l : arch.layers) {
    os << "  L" << l.position << " [label=\"" << category_name(l.op.category);
    if (l.op.kernel) os << ' ' << l.op.kernel;
    os << "\"];\n";
  }
  os << "  output [label=\"output (concat)\", shape=box];\n";
  for (const Layer& l : arch.layers) {
    for (int p : {l.pred1, l.pred2}) {
      if (p != kNoPred) os << "  " << pred_name(p) << " -> L" << l.position << ";\n";
    }
  }
  for (int pos : output_layers(arch)) os << "  L" << pos << " -> output;\n";
  os << "}\n";
  return os.str();
}

}  // namespace mirrornas
