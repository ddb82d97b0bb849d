#pragma once

// Origin groups, evolution classes and multi-layer flow graphs.

#include <algorithm>
#include <array>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "featureflow/matching.hpp"
#include "featureflow/tensors.hpp"
#include "featureflow/transformer.hpp"

namespace featureflow {

// ---------------------------------------------------------------------------
// Origin groups

enum class OriginGroup : unsigned char {
  FromNowhere,
  FromRes,
  FromMlp,
  FromAtt,
  FromResMlp,
  FromResAtt,
  FromMlpAtt,
  FromResMlpAtt,
};

inline constexpr std::array<OriginGroup, 8> kAllGroups = {
    OriginGroup::FromNowhere, OriginGroup::FromRes,    OriginGroup::FromMlp,    OriginGroup::FromAtt,
    OriginGroup::FromResMlp,  OriginGroup::FromResAtt, OriginGroup::FromMlpAtt, OriginGroup::FromResMlpAtt,
};

inline std::string group_name(OriginGroup g) {
  switch (g) {
    case OriginGroup::FromNowhere: return "From nowhere";
    case OriginGroup::FromRes: return "From RES";
    case OriginGroup::FromMlp: return "From MLP";
    case OriginGroup::FromAtt: return "From ATT";
    case OriginGroup::FromResMlp: return "From RES & MLP";
    case OriginGroup::FromResAtt: return "From RES & ATT";
    case OriginGroup::FromMlpAtt: return "From MLP & ATT";
    case OriginGroup::FromResMlpAtt: return "From RES & MLP & ATT";
  }
  return "?";
}

inline OriginGroup parse_group(const std::string& s) {
  for (auto g : kAllGroups) {
    if (group_name(g) == s) return g;
  }
  throw PreconditionError("unknown origin group '" + s + "'");
}

inline OriginGroup group_from_sites(bool res, bool mlp, bool att) {
  const int mask = (res ? 1 : 0) | (mlp ? 2 : 0) | (att ? 4 : 0);
  static constexpr OriginGroup by_mask[8] = {
      OriginGroup::FromNowhere, OriginGroup::FromRes,    OriginGroup::FromMlp,    OriginGroup::FromResMlp,
      OriginGroup::FromAtt,     OriginGroup::FromResAtt, OriginGroup::FromMlpAtt, OriginGroup::FromResMlpAtt,
  };
  return by_mask[mask];
}

inline bool group_has(OriginGroup g, Site s) {
  switch (s) {
    case Site::Res:
      return g == OriginGroup::FromRes || g == OriginGroup::FromResMlp || g == OriginGroup::FromResAtt || g == OriginGroup::FromResMlpAtt;
    case Site::Mlp:
      return g == OriginGroup::FromMlp || g == OriginGroup::FromResMlp || g == OriginGroup::FromMlpAtt || g == OriginGroup::FromResMlpAtt;
    case Site::Att:
      return g == OriginGroup::FromAtt || g == OriginGroup::FromResAtt || g == OriginGroup::FromMlpAtt || g == OriginGroup::FromResMlpAtt;
  }
  return false;
}

inline int predecessor_count(OriginGroup g) {
  return (group_has(g, Site::Res) ? 1 : 0) + (group_has(g, Site::Mlp) ? 1 : 0) + (group_has(g, Site::Att) ? 1 : 0);
}

enum class OriginMode { Top1, TopKAllInactive };

/// Transition maps from R_L into its three predecessor sites. A null map
/// means the site has no dictionary and never contributes.
struct OriginMaps {
  const TransitionMap* res = nullptr;  // R_L -> R_{L-1}
  const TransitionMap* mlp = nullptr;  // R_L -> M_L
  const TransitionMap* att = nullptr;  // R_L -> A_L

  const TransitionMap* at(Site s) const {
    switch (s) {
      case Site::Res: return res;
      case Site::Mlp: return mlp;
      case Site::Att: return att;
    }
    return nullptr;
  }
};

/// Predecessor sites of R_layer in the order RES (layer-1), MLP, ATT.
inline std::array<SitePosition, 3> predecessor_sites(int layer) {
  return {SitePosition{layer - 1, Site::Res}, SitePosition{layer, Site::Mlp}, SitePosition{layer, Site::Att}};
}

/// Matched predecessor features of one site that count as active for `mode`.
inline std::vector<std::size_t> active_matches(const TransitionMap& map, std::size_t target, std::size_t token,
                                               const ActivationRecord& record, OriginMode mode) {
  std::vector<std::size_t> out;
  if (target >= map.entries.size()) return out;
  const auto& row = map.entries[target];
  const auto& z = record.features.at(map.target);
  const std::size_t n = mode == OriginMode::Top1 ? std::min<std::size_t>(1, row.size()) : row.size();
  for (std::size_t r = 0; r < n; ++r) {
    if (z(token, row[r].target) > 0.0) out.push_back(row[r].target);
  }
  return out;
}

inline OriginGroup classify_origin(std::size_t target, int layer, std::size_t token, const ActivationRecord& record,
                                   const OriginMaps& maps, OriginMode mode = OriginMode::Top1) {
  if (layer < 1) throw PreconditionError("classify_origin: layer 0 has no previous residual");
  const SitePosition pos{layer, Site::Res};
  auto it = record.features.find(pos);
  if (it == record.features.end()) throw PreconditionError("classify_origin: record lacks activations at " + to_string(pos));
  if (token >= it->second.rows() || target >= it->second.cols()) throw PreconditionError("classify_origin: token or feature out of range");
  if (!(it->second(token, target) > 0.0)) {
    throw PreconditionError("classify_origin: target " + to_string(FeatureRef{pos, target}) + " is inactive at token " + std::to_string(token));
  }
  bool on[3] = {false, false, false};
  for (int s = 0; s < 3; ++s) {
    const auto* m = maps.at(kAllSites[s]);
    on[s] = m != nullptr && !active_matches(*m, target, token, record, mode).empty();
  }
  return group_from_sites(on[0], on[1], on[2]);
}

/// Cosine transition maps from R_layer into its predecessor sites.
struct LayerMaps {
  std::optional<TransitionMap> res, mlp, att;

  OriginMaps view() const {
    return {res ? &*res : nullptr, mlp ? &*mlp : nullptr, att ? &*att : nullptr};
  }
};

inline LayerMaps build_layer_maps(const ModelBundle& bundle, int layer, std::size_t k = 1, const MatchOptions& opts = {}) {
  const auto& target = bundle.matchable({layer, Site::Res});
  LayerMaps m;
  const auto sites = predecessor_sites(layer);
  std::optional<TransitionMap>* slots[3] = {&m.res, &m.mlp, &m.att};
  for (int s = 0; s < 3; ++s) {
    if (sites[s].layer < 0 || !bundle.has(sites[s])) continue;
    *slots[s] = match_top_k(target, bundle.matchable(sites[s]), k, opts);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Evolution classes

enum class Evolution { Translated, Processed, Newborn, Unexplained };

inline std::string evolution_name(Evolution e) {
  switch (e) {
    case Evolution::Translated: return "translated";
    case Evolution::Processed: return "processed";
    case Evolution::Newborn: return "newborn";
    case Evolution::Unexplained: return "unexplained";
  }
  return "?";
}

/// Scores between the thresholds snap to the nearer one (the midpoint counts
/// as high), which gives B precedence over A and C over D.
inline Evolution classify_evolution(const SiteScores& s, double t_high, double t_low) {
  if (t_low > t_high) throw PreconditionError("classify_evolution: t_low must not exceed t_high");
  auto high = [&](const std::optional<SiteMatch>& m) {
    if (!m) return false;
    if (m->score >= t_high) return true;
    if (m->score < t_low) return false;
    return m->score - t_low >= t_high - m->score;
  };
  const bool res = high(s.res);
  const bool module = high(s.mlp) || high(s.att);
  if (res) return module ? Evolution::Processed : Evolution::Translated;
  return module ? Evolution::Newborn : Evolution::Unexplained;
}

// ---------------------------------------------------------------------------
// Flow graphs

struct FlowConfig {
  double t_res = 0.5;
  double t_module = 0.15;
  std::map<int, double> t_res_per_layer;
  std::map<int, double> t_module_per_layer;
  bool forward = true;

  double res_threshold(int layer) const {
    auto it = t_res_per_layer.find(layer);
    return it == t_res_per_layer.end() ? t_res : it->second;
  }
  double module_threshold(int layer) const {
    auto it = t_module_per_layer.find(layer);
    return it == t_module_per_layer.end() ? t_module : it->second;
  }
};

struct FlowNode {
  FeatureRef ref;
  std::optional<double> score_to_parent;
  bool advisory = false;  // reached by the forward walk
  std::optional<std::string> interpretation;

  friend bool operator==(const FlowNode&, const FlowNode&) = default;
};

struct FlowEdge {
  FeatureRef from;
  FeatureRef to;
  double score = 0.0;

  friend bool operator==(const FlowEdge&, const FlowEdge&) = default;
};

struct FlowGraph {
  FeatureRef seed;
  std::vector<FlowNode> nodes;
  std::vector<FlowEdge> edges;  // oriented along the flow: earlier layer -> later layer, module -> spine
  int l_start = 0;
  int l_end = 0;
  double t_res = 0.5;
  double t_module = 0.15;

  const FlowNode* find(const FeatureRef& r) const {
    for (const auto& n : nodes) {
      if (n.ref == r) return &n;
    }
    return nullptr;
  }

  /// Residual spine ordered by layer.
  std::vector<FeatureRef> spine() const {
    std::vector<FeatureRef> s;
    for (const auto& n : nodes) {
      if (n.ref.position.site == Site::Res) s.push_back(n.ref);
    }
    std::sort(s.begin(), s.end());
    return s;
  }

  friend bool operator==(const FlowGraph&, const FlowGraph&) = default;
};

namespace detail {

inline std::optional<std::string> interpretation_of(const ModelBundle& b, const FeatureRef& r) {
  auto it = b.interpretations.find(to_string(r));
  if (it == b.interpretations.end()) return std::nullopt;
  return it->second;
}

inline void canonical_order(FlowGraph& g) {
  std::sort(g.nodes.begin(), g.nodes.end(), [](const FlowNode& a, const FlowNode& b) { return a.ref < b.ref; });
  std::sort(g.edges.begin(), g.edges.end(), [](const FlowEdge& a, const FlowEdge& b) {
    return std::tie(a.to, a.from) < std::tie(b.to, b.from);
  });
}

}  // namespace detail

inline FlowGraph build_flow_graph(const FeatureRef& seed, const ModelBundle& bundle, const FlowConfig& cfg = {}) {
  if (seed.position.site != Site::Res) throw PreconditionError("build_flow_graph: the seed must be a residual feature");
  const auto& seed_dict = bundle.matchable(seed.position);
  if (seed.index >= seed_dict.size()) {
    throw PreconditionError("build_flow_graph: seed " + to_string(seed) + " out of range (D=" + std::to_string(seed_dict.size()) + ")");
  }
  if (seed_dict.degenerate(seed.index)) throw PreconditionError("build_flow_graph: seed " + to_string(seed) + " has a zero decoder column");
  FlowGraph g;
  g.seed = seed;
  g.t_res = cfg.t_res;
  g.t_module = cfg.t_module;
  g.nodes.push_back({seed, std::nullopt, false, detail::interpretation_of(bundle, seed)});
  std::vector<FeatureRef> spine{seed};

  auto step = [&](const FeatureRef& from, int layer) -> std::optional<SiteMatch> {
    SitePosition p{layer, Site::Res};
    if (layer < 0 || layer >= bundle.layer_count || !bundle.has(p)) return std::nullopt;
    const auto& dict = bundle.matchable(p);
    return best_match(bundle.matchable(from.position).embedding(from.index), dict);
  };

  // Backward: where did the feature come from?
  FeatureRef cur = seed;
  while (cur.position.layer > 0) {
    const int l = cur.position.layer - 1;
    const auto m = step(cur, l);
    if (!m || m->score < cfg.res_threshold(cur.position.layer)) break;
    FeatureRef parent{{l, Site::Res}, m->index};
    g.nodes.push_back({parent, m->score, false, detail::interpretation_of(bundle, parent)});
    g.edges.push_back({parent, cur, m->score});
    spine.push_back(parent);
    cur = parent;
  }
  // Forward walk: advisory only.
  cur = seed;
  while (cfg.forward && cur.position.layer + 1 < bundle.layer_count) {
    const int l = cur.position.layer + 1;
    const auto m = step(cur, l);
    if (!m || m->score < cfg.res_threshold(l)) break;
    FeatureRef child{{l, Site::Res}, m->index};
    g.nodes.push_back({child, m->score, true, detail::interpretation_of(bundle, child)});
    g.edges.push_back({cur, child, m->score});
    spine.push_back(child);
    cur = child;
  }
  // Module attachments hang off the spine only.
  for (const auto& s : spine) {
    const int l = s.position.layer;
    const auto emb = bundle.matchable(s.position).embedding(s.index);
    const bool advisory = g.find(s)->advisory;
    for (Site site : {Site::Mlp, Site::Att}) {
      SitePosition p{l, site};
      if (!bundle.has(p)) continue;
      const auto m = best_match(emb, bundle.matchable(p));
      if (!m || m->score < cfg.module_threshold(l)) continue;
      FeatureRef node{p, m->index};
      g.nodes.push_back({node, m->score, advisory, detail::interpretation_of(bundle, node)});
      g.edges.push_back({node, s, m->score});
    }
  }
  g.l_start = g.l_end = seed.position.layer;
  for (const auto& s : spine) {
    g.l_start = std::min(g.l_start, s.position.layer);
    g.l_end = std::max(g.l_end, s.position.layer);
  }
  detail::canonical_order(g);
  return g;
}

// ---------------------------------------------------------------------------
// Export / import

inline nlohmann::json to_json(const FlowGraph& g) {
  using nlohmann::json;
  json nodes = json::array();
  for (const auto& n : g.nodes) {
    json j{{"id", to_string(n.ref)},
           {"layer", n.ref.position.layer},
           {"site", std::string(site_name(n.ref.position.site))},
           {"index", n.ref.index},
           {"score_to_parent", n.score_to_parent ? json(*n.score_to_parent) : json(nullptr)},
           {"advisory", n.advisory}};
    if (n.interpretation) j["interpretation"] = *n.interpretation;
    nodes.push_back(std::move(j));
  }
  json edges = json::array();
  for (const auto& e : g.edges) edges.push_back({{"from", to_string(e.from)}, {"to", to_string(e.to)}, {"score", e.score}});
  return {{"seed", to_string(g.seed)},
          {"span", {g.l_start, g.l_end}},
          {"thresholds", {{"t_res", g.t_res}, {"t_module", g.t_module}}},
          {"nodes", nodes},
          {"edges", edges}};
}

inline FlowGraph flow_graph_from_json(const nlohmann::json& j) {
  FlowGraph g;
  try {
    g.seed = parse_feature_ref(j.at("seed").get<std::string>());
    g.l_start = j.at("span").at(0).get<int>();
    g.l_end = j.at("span").at(1).get<int>();
    g.t_res = j.at("thresholds").at("t_res").get<double>();
    g.t_module = j.at("thresholds").at("t_module").get<double>();
    for (const auto& n : j.at("nodes")) {
      FlowNode node;
      node.ref = {{n.at("layer").get<int>(), parse_site(n.at("site").get<std::string>())}, n.at("index").get<std::size_t>()};
      if (!n.at("score_to_parent").is_null()) node.score_to_parent = n.at("score_to_parent").get<double>();
      node.advisory = n.value("advisory", false);
      if (n.contains("interpretation")) node.interpretation = n.at("interpretation").get<std::string>();
      g.nodes.push_back(std::move(node));
    }
    for (const auto& e : j.at("edges")) {
      g.edges.push_back({parse_feature_ref(e.at("from").get<std::string>()), parse_feature_ref(e.at("to").get<std::string>()),
                         e.at("score").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw PreconditionError(std::string("malformed flow graph document: ") + e.what());
  }
  return g;
}

enum class GraphFormat { Json, Dot };

inline GraphFormat parse_graph_format(const std::string& s) {
  if (s == "json") return GraphFormat::Json;
  if (s == "dot") return GraphFormat::Dot;
  throw PreconditionError("unknown graph format '" + s + "' (expected json or dot)");
}

namespace detail {

inline std::string dot_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '"' || c == '\\') o.push_back('\\');
    if (c == '\n') {
      o += "\\n";
      continue;
    }
    o.push_back(c);
  }
  return o;
}

inline std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace detail

/// Deterministic bytes. JSON is the lossless structured record; DOT groups
/// each layer into one rank for layered layout.
inline std::string export_graph(const FlowGraph& g, GraphFormat format) {
  if (format == GraphFormat::Json) return to_json(g).dump(2) + "\n";
  std::ostringstream o;
  o << "digraph flow {\n  rankdir=LR;\n  node [shape=box, fontname=\"Helvetica\"];\n";
  std::map<int, std::vector<const FlowNode*>> by_layer;
  for (const auto& n : g.nodes) by_layer[n.ref.position.layer].push_back(&n);
  for (const auto& [layer, nodes] : by_layer) {
    o << "  subgraph layer_" << layer << " {\n    rank=same;\n";
    for (const auto* n : nodes) {
      std::string label = to_string(n->ref);
      if (n->interpretation) label += "\\n" + detail::dot_escape(*n->interpretation);
      o << "    \"" << to_string(n->ref) << "\" [label=\"" << label << "\"";
      if (n->ref == g.seed) o << ", penwidth=2";
      if (n->ref.position.site != Site::Res) o << ", shape=ellipse";
      if (n->advisory) o << ", style=dashed";
      o << "];\n";
    }
    o << "  }\n";
  }
  for (const auto& e : g.edges) {
    o << "  \"" << to_string(e.from) << "\" -> \"" << to_string(e.to) << "\" [label=\"" << detail::fixed3(e.score) << "\"];\n";
  }
  o << "}\n";
  return o.str();
}

inline FlowGraph import_graph(const std::string& text) {
  try {
    return flow_graph_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw PreconditionError(std::string("flow graph document is not valid JSON: ") + e.what());
  }
}

}  // namespace featureflow
