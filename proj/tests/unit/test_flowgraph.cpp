#include <gtest/gtest.h>

#include <cmath>

#include "featureflow/flowgraph.hpp"
#include "featureflow/sae.hpp"
#include "featureflow/synth.hpp"
#include "helpers.hpp"

using namespace featureflow;

namespace {

constexpr std::size_t kD = 8;

VectorD basis(std::size_t i) {
  VectorD v(kD, 0.0);
  v[i] = 1.0;
  return v;
}

MatrixF columns(const std::vector<VectorD>& cols) {
  MatrixF m(kD, cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) {
    for (std::size_t r = 0; r < kD; ++r) m(r, c) = static_cast<float>(cols[c][r]);
  }
  return m;
}

VectorD mix(const VectorD& a, double ca, const VectorD& b, double cb) {
  VectorD v(kD);
  for (std::size_t i = 0; i < kD; ++i) v[i] = ca * a[i] + cb * b[i];
  return v;
}

/// Four residual layers whose feature 0 is carried along a slowly rotating
/// direction: consecutive cosines are `step[l]` for l = 1..3.
ModelBundle spine_bundle(std::array<double, 3> step, double mlp_at_2 = 0.0) {
  ModelBundle b;
  b.model_dim = kD;
  b.layer_count = 4;
  VectorD u = basis(0);
  for (int l = 0; l < 4; ++l) {
    if (l > 0) {
      const double c = step[static_cast<std::size_t>(l - 1)];
      u = mix(u, c, basis(static_cast<std::size_t>(l)), std::sqrt(1 - c * c));
    }
    b.dictionaries.emplace(SitePosition{l, Site::Res}, fftest::tied_dictionary({l, Site::Res}, columns({u, basis(5), basis(6), basis(7)})));
    VectorD m0 = l == 2 && mlp_at_2 > 0 ? mix(u, mlp_at_2, basis(4), std::sqrt(1 - mlp_at_2 * mlp_at_2)) : basis(5);
    b.dictionaries.emplace(SitePosition{l, Site::Mlp}, fftest::tied_dictionary({l, Site::Mlp}, columns({m0, basis(6), basis(7)})));
    b.dictionaries.emplace(SitePosition{l, Site::Att}, fftest::tied_dictionary({l, Site::Att}, columns({basis(7), basis(6)})));
  }
  return b;
}

ActivationRecord record_with(std::map<SitePosition, std::vector<double>> active) {
  ActivationRecord r;
  r.tokens = {0};
  for (auto& [p, z] : active) r.features[p] = MatrixD(1, z.size(), z);
  return r;
}

TransitionMap map_k(SitePosition src, SitePosition dst, std::vector<std::vector<std::size_t>> rows, std::size_t target_size) {
  TransitionMap m;
  m.source = src;
  m.target = dst;
  m.k = rows.empty() ? 1 : rows.front().size();
  m.target_size = target_size;
  for (auto& row : rows) {
    std::vector<TransitionEntry> e;
    double s = 0.9;
    for (auto j : row) e.push_back({j, s -= 0.1});
    m.entries.push_back(std::move(e));
  }
  return m;
}

}  // namespace

TEST(Evolution, CaseExamples) {
  auto scores = [](double r, double m, double a) {
    SiteScores s;
    s.res = SiteMatch{0, r};
    s.mlp = SiteMatch{0, m};
    s.att = SiteMatch{0, a};
    return s;
  };
  EXPECT_EQ(classify_evolution(scores(0.95, 0.05, 0.02), 0.5, 0.15), Evolution::Translated);
  EXPECT_EQ(classify_evolution(scores(0.9, 0.8, 0.1), 0.5, 0.15), Evolution::Processed);
  EXPECT_EQ(classify_evolution(scores(0.1, 0.85, 0.1), 0.5, 0.15), Evolution::Newborn);
  EXPECT_EQ(classify_evolution(scores(0.1, 0.1, 0.1), 0.5, 0.15), Evolution::Unexplained);
}

TEST(Evolution, IntermediateScoresSnapWithPrecedence) {
  SiteScores s;
  s.res = SiteMatch{0, 0.9};
  s.mlp = SiteMatch{0, 0.325};  // exact midpoint of [0.15, 0.5] counts as high
  EXPECT_EQ(classify_evolution(s, 0.5, 0.15), Evolution::Processed);
  s.mlp = SiteMatch{0, 0.3};
  EXPECT_EQ(classify_evolution(s, 0.5, 0.15), Evolution::Translated);
  s.res = SiteMatch{0, 0.2};
  s.mlp = SiteMatch{0, 0.45};
  EXPECT_EQ(classify_evolution(s, 0.5, 0.15), Evolution::Newborn);
  EXPECT_THROW(classify_evolution(s, 0.1, 0.5), PreconditionError);
}

TEST(Origin, GroupsPartitionAllMasks) {
  std::set<OriginGroup> seen;
  for (int mask = 0; mask < 8; ++mask) {
    const auto g = group_from_sites(mask & 1, mask & 2, mask & 4);
    EXPECT_TRUE(seen.insert(g).second);
    EXPECT_EQ(group_has(g, Site::Res), (mask & 1) != 0);
    EXPECT_EQ(group_has(g, Site::Mlp), (mask & 2) != 0);
    EXPECT_EQ(group_has(g, Site::Att), (mask & 4) != 0);
    EXPECT_EQ(parse_group(group_name(g)), g);
  }
  EXPECT_EQ(seen.size(), kAllGroups.size());
}

TEST(Origin, NothingActiveIsFromNowhere) {
  const auto rec = record_with({{{1, Site::Res}, {1.0}}, {{0, Site::Res}, {0.0, 0.0}}, {{1, Site::Mlp}, {0.0}}, {{1, Site::Att}, {0.0}}});
  const auto res = map_k({1, Site::Res}, {0, Site::Res}, {{1}}, 2);
  const auto mlp = map_k({1, Site::Res}, {1, Site::Mlp}, {{0}}, 1);
  const auto att = map_k({1, Site::Res}, {1, Site::Att}, {{0}}, 1);
  EXPECT_EQ(classify_origin(0, 1, 0, rec, {&res, &mlp, &att}), OriginGroup::FromNowhere);
}

TEST(Origin, OnlyResidualMatchActiveIsFromRes) {
  const auto rec = record_with({{{1, Site::Res}, {1.0}}, {{0, Site::Res}, {0.0, 2.0}}, {{1, Site::Mlp}, {0.0}}, {{1, Site::Att}, {0.0}}});
  const auto res = map_k({1, Site::Res}, {0, Site::Res}, {{1}}, 2);
  const auto mlp = map_k({1, Site::Res}, {1, Site::Mlp}, {{0}}, 1);
  EXPECT_EQ(classify_origin(0, 1, 0, rec, {&res, &mlp, nullptr}), OriginGroup::FromRes);
}

TEST(Origin, TopKNeedsAllMatchesInactive) {
  const auto rec = record_with({{{1, Site::Res}, {1.0}}, {{0, Site::Res}, {0.0, 0.0, 0.5}}});
  const auto res = map_k({1, Site::Res}, {0, Site::Res}, {{0, 1, 2}}, 3);
  EXPECT_EQ(classify_origin(0, 1, 0, rec, {&res, nullptr, nullptr}, OriginMode::Top1), OriginGroup::FromNowhere);
  EXPECT_EQ(classify_origin(0, 1, 0, rec, {&res, nullptr, nullptr}, OriginMode::TopKAllInactive), OriginGroup::FromRes);
}

TEST(Origin, Top1AgreesWithTopKAtKOne) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::map<SitePosition, std::vector<double>> act{{{1, Site::Res}, {1.0}}};
    std::vector<TransitionMap> maps;
    for (auto p : predecessor_sites(1)) {
      std::vector<double> z(3);
      for (auto& v : z) v = uniform01(rng) < 0.5 ? 0.0 : 1.0;
      act[p] = z;
      maps.push_back(map_k({1, Site::Res}, p, {{uniform_index(rng, 3)}}, 3));
    }
    const auto rec = record_with(act);
    OriginMaps om{&maps[0], &maps[1], &maps[2]};
    EXPECT_EQ(classify_origin(0, 1, 0, rec, om, OriginMode::Top1), classify_origin(0, 1, 0, rec, om, OriginMode::TopKAllInactive));
  }
}

TEST(Origin, RejectsLayerZeroAndInactiveTarget) {
  const auto rec = record_with({{{0, Site::Res}, {1.0}}, {{1, Site::Res}, {0.0}}});
  EXPECT_THROW(classify_origin(0, 0, 0, rec, {}), PreconditionError);
  EXPECT_THROW(classify_origin(0, 1, 0, rec, {}), PreconditionError);
}

TEST(Origin, PlantedMechanismsLandInTheirGroups) {
  PlantedConfig cfg;
  cfg.noise = 0.0;
  cfg.theme = false;
  const auto pb = synth_planted_bundle(cfg);
  const auto& m = pb.bundle.toy_model();
  std::map<int, LayerMaps> maps;
  for (int l = 1; l < cfg.layers; ++l) maps.emplace(l, build_layer_maps(pb.bundle, l, 1));
  int checked = 0;
  for (const auto& f : pb.truth.features) {
    if (f.mechanism != Mechanism::MlpWritten && f.mechanism != Mechanism::Translated) continue;
    const int l = f.position.layer;
    if (l == 0) continue;
    const auto& wd = pb.truth.written[f.direction];
    const std::size_t probe_dir = f.mechanism == Mechanism::MlpWritten ? wd.mlp_trigger : f.direction;
    // Every token whose embedding carries the trigger is a probe.
    for (std::size_t t = 0; t < pb.truth.token_directions.size(); ++t) {
      bool carries = false;
      for (const auto& [dir, c] : pb.truth.token_directions[t]) carries |= dir == probe_dir;
      if (!carries) continue;
      std::vector<int> tokens{static_cast<int>(t)};
      auto rec = forward(m, tokens);
      annotate(rec, pb.bundle);
      if (!(rec.feature(f.position, 0, f.index) > 0.0)) continue;
      const auto g = classify_origin(f.index, l, 0, rec, maps.at(l).view());
      if (f.mechanism == Mechanism::MlpWritten) {
        EXPECT_EQ(g, OriginGroup::FromMlp) << to_string(FeatureRef{f.position, f.index}) << " token " << t;
      } else {
        EXPECT_TRUE(group_has(g, Site::Res));
      }
      ++checked;
    }
  }
  EXPECT_GT(checked, 50);
}

TEST(FlowGraph, SpineAcrossFourLayers) {
  const auto b = spine_bundle({0.99, 0.99, 0.99});
  const auto g = build_flow_graph({{3, Site::Res}, 0}, b);
  EXPECT_EQ(g.nodes.size(), 4u);
  EXPECT_EQ(g.edges.size(), 3u);
  EXPECT_EQ(g.l_start, 0);
  EXPECT_EQ(g.l_end, 3);
  for (const auto& e : g.edges) {
    EXPECT_NEAR(e.score, 0.99, 1e-6);
    EXPECT_EQ(e.from.position.layer + 1, e.to.position.layer);
  }
  for (const auto& n : g.nodes) EXPECT_EQ(n.ref.position.site, Site::Res);
}

TEST(FlowGraph, SpanEndsAtWeakLink) {
  const auto b = spine_bundle({0.99, 0.99, 0.4});
  const auto back = build_flow_graph({{3, Site::Res}, 0}, b);
  EXPECT_EQ(back.nodes.size(), 1u);
  EXPECT_EQ(back.l_start, 3);
  const auto fwd = build_flow_graph({{0, Site::Res}, 0}, b);
  EXPECT_EQ(fwd.l_start, 0);
  EXPECT_EQ(fwd.l_end, 2);
  for (const auto& n : fwd.nodes) EXPECT_EQ(n.advisory, n.ref.position.layer > 0);
}

TEST(FlowGraph, ModuleAttachesToSpineOnly) {
  const auto b = spine_bundle({0.99, 0.99, 0.99}, 0.8);
  const auto g = build_flow_graph({{3, Site::Res}, 0}, b);
  const FeatureRef mlp{{2, Site::Mlp}, 0};
  const auto* node = g.find(mlp);
  ASSERT_NE(node, nullptr);
  EXPECT_NEAR(*node->score_to_parent, 0.8, 1e-6);
  int module_edges = 0;
  for (const auto& e : g.edges) {
    if (e.from.position.site == Site::Res) continue;
    ++module_edges;
    EXPECT_EQ(e.from, mlp);
    EXPECT_EQ(e.to, (FeatureRef{{2, Site::Res}, 0}));
    EXPECT_GE(e.score, g.t_module);
  }
  EXPECT_EQ(module_edges, 1);
  // A threshold above the attachment removes it.
  FlowConfig strict;
  strict.t_module_per_layer[2] = 0.85;
  EXPECT_EQ(build_flow_graph({{3, Site::Res}, 0}, b, strict).find(mlp), nullptr);
}

TEST(FlowGraph, BackwardSpineIsComposedOfSingleSteps) {
  PlantedConfig cfg;
  cfg.noise = 0.05;
  const auto pb = synth_planted_bundle(cfg);
  int checked = 0;
  for (const auto& f : pb.truth.features) {
    if (f.position.layer != cfg.layers - 1) continue;
    FlowConfig fc;
    fc.forward = false;
    const auto g = build_flow_graph({f.position, f.index}, pb.bundle, fc);
    const auto spine = g.spine();
    for (std::size_t i = 1; i < spine.size(); ++i) {
      const auto& child = spine[i];
      const auto m = best_match(pb.bundle.at(child.position).embedding(child.index), pb.bundle.at(spine[i - 1].position));
      ASSERT_TRUE(m);
      EXPECT_EQ(m->index, spine[i - 1].index);
      EXPECT_GE(m->score, fc.t_res);
    }
    // Exactly one residual node per layer in the span.
    EXPECT_EQ(static_cast<int>(spine.size()), g.l_end - g.l_start + 1);
    ++checked;
  }
  EXPECT_GT(checked, 10);
}

TEST(FlowGraph, DecoderScalingKeepsTopology) {
  PlantedConfig cfg;
  cfg.noise = 0.05;
  auto pb = synth_planted_bundle(cfg);
  const auto seed = pb.truth.features.back();
  const auto before = build_flow_graph({seed.position, seed.index}, pb.bundle);
  Rng rng(9);
  ModelBundle scaled = pb.bundle;
  for (auto& [p, dict] : scaled.dictionaries) {
    MatrixF dec = dict.decoder();
    for (std::size_t c = 0; c < dec.cols(); ++c) {
      const float s = static_cast<float>(0.25 + 4.0 * uniform01(rng));
      for (std::size_t r = 0; r < dec.rows(); ++r) dec(r, c) *= s;
    }
    dict = FeatureDictionary(p, dict.activation(), dec, dict.encoder(), dict.enc_bias(), dict.dec_bias(), dict.thresholds());
  }
  const auto after = build_flow_graph({seed.position, seed.index}, scaled);
  ASSERT_EQ(before.nodes.size(), after.nodes.size());
  for (std::size_t i = 0; i < before.nodes.size(); ++i) EXPECT_EQ(before.nodes[i].ref, after.nodes[i].ref);
  ASSERT_EQ(before.edges.size(), after.edges.size());
  for (std::size_t i = 0; i < before.edges.size(); ++i) {
    EXPECT_EQ(before.edges[i].from, after.edges[i].from);
    EXPECT_EQ(before.edges[i].to, after.edges[i].to);
  }
}

TEST(FlowGraph, RejectsBadSeeds) {
  const auto b = spine_bundle({0.99, 0.99, 0.99});
  EXPECT_THROW(build_flow_graph({{3, Site::Res}, 9}, b), PreconditionError);
  EXPECT_THROW(build_flow_graph({{3, Site::Mlp}, 0}, b), PreconditionError);
  EXPECT_THROW(build_flow_graph({{7, Site::Res}, 0}, b), PreconditionError);
}

TEST(Export, SeedOnlyGraphIsSingleNodeDocument) {
  const auto b = spine_bundle({0.99, 0.99, 0.3});
  FlowConfig fc;
  fc.forward = false;
  const auto g = build_flow_graph({{3, Site::Res}, 0}, b, fc);
  const auto j = nlohmann::json::parse(export_graph(g, GraphFormat::Json));
  EXPECT_EQ(j["nodes"].size(), 1u);
  EXPECT_EQ(j["edges"].size(), 0u);
  const auto dot = export_graph(g, GraphFormat::Dot);
  EXPECT_EQ(std::count(dot.begin(), dot.end(), '\n'), 8);
}

TEST(Export, CountsAgreeAcrossFormats) {
  const auto g = build_flow_graph({{3, Site::Res}, 0}, spine_bundle({0.99, 0.99, 0.99}));
  const auto j = nlohmann::json::parse(export_graph(g, GraphFormat::Json));
  EXPECT_EQ(j["nodes"].size(), 4u);
  EXPECT_EQ(j["edges"].size(), 3u);
  const auto dot = export_graph(g, GraphFormat::Dot);
  std::size_t arrows = 0, labels = 0;
  for (std::size_t p = 0; (p = dot.find("->", p)) != std::string::npos; ++p) ++arrows;
  for (std::size_t p = 0; (p = dot.find("[label=", p)) != std::string::npos; ++p) ++labels;
  EXPECT_EQ(arrows, 3u);
  EXPECT_EQ(labels, 7u);
  EXPECT_EQ(std::count(dot.begin(), dot.end(), '{'), 5);  // graph + one rank per layer
}

TEST(Export, StructuredRoundTripIsByteStable) {
  auto b = spine_bundle({0.99, 0.99, 0.99}, 0.8);
  b.interpretations["2/res/0"] = "quoted \"text\"\nwith newline";
  const auto g = build_flow_graph({{3, Site::Res}, 0}, b);
  const auto first = export_graph(g, GraphFormat::Json);
  const auto back = import_graph(first);
  EXPECT_EQ(back, g);
  EXPECT_EQ(export_graph(back, GraphFormat::Json), first);
  EXPECT_EQ(export_graph(back, GraphFormat::Dot), export_graph(g, GraphFormat::Dot));
}

TEST(Export, UnknownFormatAndMalformedInput) {
  EXPECT_THROW(parse_graph_format("svg"), PreconditionError);
  EXPECT_THROW(import_graph("{not json"), PreconditionError);
  EXPECT_THROW(import_graph("{\"seed\": \"0/res/0\"}"), PreconditionError);
}
