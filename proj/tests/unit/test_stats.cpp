#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "featureflow/stats.hpp"
#include "featureflow/synth.hpp"

using namespace featureflow;

namespace {

/// Brute force: every n-subset of the pooled values is equally likely.
double enumerate_lower_tail(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> pooled(x);
  pooled.insert(pooled.end(), y.begin(), y.end());
  const std::size_t N = pooled.size(), n = x.size();
  auto u_of = [&](const std::vector<bool>& in) {
    double u = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (!in[i]) continue;
      for (std::size_t j = 0; j < N; ++j) {
        if (in[j]) continue;
        u += pooled[i] > pooled[j] ? 1.0 : (pooled[i] == pooled[j] ? 0.5 : 0.0);
      }
    }
    return u;
  };
  std::vector<bool> obs(N, false);
  for (std::size_t i = 0; i < n; ++i) obs[i] = true;
  const double u_obs = u_of(obs);
  std::vector<bool> sel(N, false);
  std::fill(sel.end() - static_cast<std::ptrdiff_t>(n), sel.end(), true);
  std::size_t hit = 0, all = 0;
  do {
    ++all;
    hit += u_of(sel) <= u_obs + 1e-9;
  } while (std::next_permutation(sel.begin(), sel.end()));
  return static_cast<double>(hit) / static_cast<double>(all);
}

std::vector<double> draws(Rng& rng, std::size_t n, int levels) {
  std::vector<double> v(n);
  for (auto& x : v) x = levels > 0 ? static_cast<double>(uniform_index(rng, static_cast<std::size_t>(levels))) : normal(rng);
  return v;
}

PlantedConfig translated_only() {
  PlantedConfig cfg;
  cfg.mechanisms = {0, 0, 0};
  cfg.theme = false;
  cfg.noise = 0.02;
  return cfg;
}

}  // namespace

TEST(MannWhitney, TwoByTwoByHand) {
  const auto r = mann_whitney_u({1, 2}, {3, 4});
  EXPECT_EQ(r.u, 0.0);
  EXPECT_TRUE(r.exact);
  EXPECT_NEAR(r.p, 1.0 / 6.0, 1e-12);
}

TEST(MannWhitney, ThreeByFourByHand) {
  // U = 2 (5 beats 3 and 4); 4 of the C(7,3) = 35 arrangements have U <= 2.
  const auto r = mann_whitney_u({1, 2, 5}, {3, 4, 6, 7});
  EXPECT_EQ(r.u, 2.0);
  EXPECT_NEAR(r.p, 4.0 / 35.0, 1e-12);
}

TEST(MannWhitney, IdenticalSamplesSitAtHalf) {
  const std::vector<double> x{1, 2, 2, 3, 7};
  EXPECT_EQ(mann_whitney_u(x, x).u, 12.5);
}

TEST(MannWhitney, Complementarity) {
  Rng rng(21);
  for (int i = 0; i < 300; ++i) {
    const auto x = draws(rng, 1 + uniform_index(rng, 12), i % 2 ? 4 : 0);
    const auto y = draws(rng, 1 + uniform_index(rng, 12), i % 2 ? 4 : 0);
    EXPECT_DOUBLE_EQ(mann_whitney_u(x, y).u + mann_whitney_u(y, x).u, static_cast<double>(x.size() * y.size()));
  }
}

TEST(MannWhitney, ExactMatchesBruteForceWithTies) {
  Rng rng(22);
  for (int i = 0; i < 150; ++i) {
    const auto x = draws(rng, 1 + uniform_index(rng, 6), i % 3 ? 5 : 0);
    const auto y = draws(rng, 1 + uniform_index(rng, 6), i % 3 ? 5 : 0);
    const auto r = mann_whitney_u(x, y);
    ASSERT_TRUE(r.exact);
    EXPECT_NEAR(r.p, enumerate_lower_tail(x, y), 1e-12);
  }
}

TEST(MannWhitney, ExactWhenOnlyTheOtherSampleIsSmall) {
  Rng rng(23);
  const auto x = draws(rng, 11, 6);
  const auto y = draws(rng, 3, 6);
  const auto r = mann_whitney_u(x, y);
  EXPECT_TRUE(r.exact);
  EXPECT_NEAR(r.p, enumerate_lower_tail(x, y), 1e-12);
}

TEST(MannWhitney, ApproximationAgainstIndependentReference) {
  const std::vector<double> x{0.0, 0.1, 0.4, 0.9, 1.6, 2.5, 3.6, 1.2, 2.7, 0.7, 2.6, 1.0, 3.3, 2.1, 1.1, 0.3, 3.4, 3.0, 2.8, 2.8};
  const std::vector<double> y{0.3, 0.4, 0.8, 1.5, 2.4, 3.5, 0.9, 2.6, 0.4, 2.6, 1.0, 3.7, 2.6, 1.8, 1.2, 0.9, 0.8, 1.0, 1.4, 2.1, 3.1, 4.3, 1.7, 3.5, 1.4};
  const auto r = mann_whitney_u(x, y);
  EXPECT_FALSE(r.exact);
  EXPECT_EQ(r.u, 247.0);
  // Tie- and continuity-corrected normal tail computed by an independent statistics package.
  EXPECT_NEAR(r.p, 0.47720940905444115, 1e-12);
}

TEST(MannWhitney, EightByEightMidRangeAgreement) {
  std::vector<double> pooled(16);
  std::iota(pooled.begin(), pooled.end(), 0.0);
  std::vector<bool> sel(16, false);
  std::fill(sel.begin() + 8, sel.end(), true);
  double worst = 0;
  do {
    std::vector<double> x, y;
    for (std::size_t i = 0; i < 16; ++i) (sel[i] ? x : y).push_back(pooled[i]);
    const double exact = mann_whitney_u(x, y).p;
    if (exact < 0.05 || exact > 0.95) continue;
    worst = std::max(worst, std::abs(exact - mann_whitney_u(x, y, true).p));
  } while (std::next_permutation(sel.begin(), sel.end()));
  EXPECT_LE(worst, 0.01);
}

TEST(MannWhitney, EmptySampleRejected) {
  EXPECT_THROW(mann_whitney_u({}, {1.0}), PreconditionError);
}

TEST(Sampling, ExcludesFirstTokenAndIsSeeded) {
  const auto corpus = synth_corpus(40, 20, 3);
  SampleProtocol p;
  p.texts = 30;
  p.seed = 4;
  const auto a = sample_corpus(corpus, p);
  EXPECT_EQ(a.size(), 30u);
  for (const auto& s : a) {
    EXPECT_EQ(s.positions.size(), 5u);
    EXPECT_EQ(std::set<std::size_t>(s.positions.begin(), s.positions.end()).size(), 5u);
    for (auto t : s.positions) {
      EXPECT_GE(t, 1u);
      EXPECT_LT(t, s.tokens.size());
    }
  }
  const auto b = sample_corpus(corpus, p);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].positions, b[i].positions);
  EXPECT_THROW(sample_corpus({}, p), PreconditionError);
}

TEST(Sampling, LoadsLinesAndDirectories) {
  const auto dir = std::filesystem::temp_directory_path() / "ff_corpus_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "docs");
  std::ofstream(dir / "lines.txt") << "first line\n\nsecond line\n";
  std::ofstream(dir / "docs" / "b.txt") << "doc b";
  std::ofstream(dir / "docs" / "a.txt") << "doc a\nstill a";
  EXPECT_EQ(load_corpus(dir / "lines.txt"), (std::vector<std::string>{"first line", "second line"}));
  EXPECT_EQ(load_corpus(dir / "docs"), (std::vector<std::string>{"doc a\nstill a", "doc b"}));
  std::filesystem::remove_all(dir);
}

TEST(Groups, AllTranslatedIsAllFromRes) {
  const auto pb = synth_planted_bundle(translated_only());
  SampleProtocol p;
  p.texts = 40;
  const auto sample = sample_corpus(synth_corpus(40, 24, 5), p);
  const auto dist = group_distribution(pb.bundle, sample, OriginMapSet::cosine(pb.bundle));
  for (const auto& [l, c] : dist.counts) {
    EXPECT_GE(l, 1);
    EXPECT_GT(dist.total(l), 0u);
    EXPECT_DOUBLE_EQ(dist.percent(l, OriginGroup::FromRes), 100.0);
  }
}

TEST(Groups, ZeroedModulesContributeNothing) {
  auto pb = synth_planted_bundle({});
  for (auto& w : pb.bundle.model->layers) {
    std::fill(w.w_out.storage().begin(), w.w_out.storage().end(), 0.0f);
    std::fill(w.wo.storage().begin(), w.wo.storage().end(), 0.0f);
  }
  SampleProtocol p;
  p.texts = 40;
  const auto dist = group_distribution(pb.bundle, sample_corpus(synth_corpus(40, 24, 6), p), OriginMapSet::cosine(pb.bundle));
  for (const auto& [l, c] : dist.counts) {
    double sum = 0;
    for (auto g : kAllGroups) {
      sum += dist.percent(l, g);
      if (group_has(g, Site::Mlp) || group_has(g, Site::Att)) {
        EXPECT_EQ(dist.percent(l, g), 0.0) << group_name(g);
      }
    }
    EXPECT_NEAR(sum, 100.0, 0.01);
  }
}

TEST(Groups, CosineAndPearsonAgree) {
  const auto pb = synth_planted_bundle(translated_only());
  const auto corpus = synth_corpus(120, 32, 7);
  SampleProtocol p;
  p.texts = 60;
  const auto sample = sample_corpus(corpus, p);
  const auto cos = group_distribution(pb.bundle, sample, OriginMapSet::cosine(pb.bundle));
  const auto pear = group_distribution(pb.bundle, sample, OriginMapSet::from_pearson(pearson_maps(pb.bundle, collect_activations(pb.bundle, corpus))));
  ASSERT_EQ(cos.instances.size(), pear.instances.size());
  std::size_t agree = 0;
  for (std::size_t i = 0; i < cos.instances.size(); ++i) agree += cos.instances[i].group == pear.instances[i].group;
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(cos.instances.size()), 0.95);
}

TEST(Separation, NullGroupsRarelySignificant) {
  std::size_t tests = 0, sig = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    GroupScores ds;
    for (auto g : {OriginGroup::FromRes, OriginGroup::FromMlp}) {
      for (auto& v : ds[g]) v = draws(rng, 30, 0);
    }
    for (const auto& e : group_separation_report({ds})) {
      tests += e.tests;
      sig += e.significant;
    }
  }
  EXPECT_EQ(tests, 300u);
  EXPECT_LE(static_cast<double>(sig) / static_cast<double>(tests), 0.01);
}

TEST(Separation, FiveSigmaShiftIsDetected) {
  std::vector<GroupScores> sets;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    GroupScores ds;
    for (auto g : {OriginGroup::FromRes, OriginGroup::FromResMlp}) {
      for (auto& v : ds[g]) v = draws(rng, 30, 0);
    }
    for (auto& v : ds[OriginGroup::FromResMlp][1]) v += 5.0;
    sets.push_back(ds);
  }
  for (const auto& e : group_separation_report(sets)) {
    if (e.score == Site::Mlp) {
      EXPECT_EQ(e.bucket, Bucket::AO);
      EXPECT_NEAR(e.fraction(), 1.0, 1e-12);
    } else {
      EXPECT_EQ(e.bucket, e.score == Site::Res ? Bucket::AB : Bucket::IB);
    }
  }
}

TEST(Separation, SingleGroupGivesEmptyReport) {
  GroupScores ds;
  ds[OriginGroup::FromRes][0] = {0.1, 0.2};
  EXPECT_TRUE(group_separation_report({ds}).empty());
}

TEST(Intersection, SingleGroupFeaturesGiveIdentity) {
  std::map<FeatureRef, std::vector<OriginGroup>> labels;
  for (std::size_t i = 0; i < 8; ++i) labels[{{1, Site::Res}, i}] = {kAllGroups[i], kAllGroups[i]};
  const auto m = intersection_matrix(labels);
  for (std::size_t a = 0; a < 8; ++a) {
    for (std::size_t b = 0; b < 8; ++b) EXPECT_EQ(m[a][b], a == b ? 1.0 : 0.0);
  }
}

TEST(Intersection, AlternatingFeature) {
  std::map<FeatureRef, std::vector<OriginGroup>> labels;
  labels[{{1, Site::Res}, 0}] = {OriginGroup::FromAtt, OriginGroup::FromResAtt, OriginGroup::FromAtt, OriginGroup::FromResAtt};
  const auto m = intersection_matrix(labels);
  EXPECT_EQ(m[static_cast<std::size_t>(OriginGroup::FromAtt)][static_cast<std::size_t>(OriginGroup::FromResAtt)], 1.0);
  EXPECT_EQ(m[static_cast<std::size_t>(OriginGroup::FromResAtt)][static_cast<std::size_t>(OriginGroup::FromAtt)], 1.0);
  EXPECT_EQ(m[static_cast<std::size_t>(OriginGroup::FromRes)][static_cast<std::size_t>(OriginGroup::FromRes)], 0.0);
}

TEST(Intersection, MatchesDirectCounting) {
  Rng rng(31);
  std::map<FeatureRef, std::vector<OriginGroup>> labels;
  for (std::size_t f = 0; f < 60; ++f) {
    auto& v = labels[{{2, Site::Res}, f}];
    const std::size_t n = 1 + uniform_index(rng, 5);
    for (std::size_t c = 0; c < n; ++c) v.push_back(kAllGroups[uniform_index(rng, 4)]);
  }
  const auto m = intersection_matrix(labels);
  for (std::size_t a = 0; a < 8; ++a) {
    for (std::size_t b = 0; b < 8; ++b) {
      std::size_t has_a = 0, both = 0;
      for (const auto& [f, v] : labels) {
        bool seen_a = false, other_b = false;
        for (std::size_t i = 0; i < v.size(); ++i) {
          if (v[i] != kAllGroups[a]) continue;
          seen_a = true;
          for (std::size_t j = 0; j < v.size(); ++j) other_b = other_b || (j != i && v[j] == kAllGroups[b]);
        }
        has_a += seen_a;
        both += seen_a && other_b;
      }
      const double expect = has_a == 0 ? 0.0 : (a == b ? 1.0 : static_cast<double>(both) / static_cast<double>(has_a));
      EXPECT_DOUBLE_EQ(m[a][b], expect) << a << "," << b;
      EXPECT_GE(m[a][b], 0.0);
      EXPECT_LE(m[a][b], 1.0);
    }
  }
}

TEST(Intersection, NeedsRepeatedFeature) {
  std::map<FeatureRef, std::vector<OriginGroup>> labels;
  labels[{{1, Site::Res}, 0}] = {OriginGroup::FromRes};
  EXPECT_THROW(intersection_matrix(labels), PreconditionError);
}
