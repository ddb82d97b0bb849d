#pragma once

// Corpus-driven group statistics and rank tests.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "featureflow/flowgraph.hpp"
#include "featureflow/matching.hpp"
#include "featureflow/sae.hpp"
#include "featureflow/transformer.hpp"

namespace featureflow {

// ---------------------------------------------------------------------------
// Mann-Whitney U

struct MannWhitney {
  double u = 0.0;
  double p = 1.0;  // P(U' <= u) under the null: small when x tends below y
  bool exact = false;
};

namespace detail {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// Midranks (1-based) of the pooled sample and the tie-group sizes.
inline std::pair<std::vector<double>, std::vector<std::size_t>> midranks(const std::vector<double>& pooled) {
  const std::size_t N = pooled.size();
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pooled[a] < pooled[b]; });
  std::vector<double> rank(N);
  std::vector<std::size_t> ties;
  for (std::size_t i = 0; i < N;) {
    std::size_t j = i;
    while (j + 1 < N && pooled[order[j + 1]] == pooled[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    ties.push_back(j - i + 1);
    i = j + 1;
  }
  return {rank, ties};
}

/// Exact tail probability of the rank sum of a random n-subset of the pooled
/// midranks: P(sum <= observed) or P(sum >= observed). Ranks are doubled so
/// sums stay integral.
inline double exact_rank_sum_tail(const std::vector<double>& ranks, std::size_t n, double observed, bool lower) {
  const std::size_t N = ranks.size();
  std::vector<std::size_t> r2(N);
  for (std::size_t i = 0; i < N; ++i) r2[i] = static_cast<std::size_t>(std::lround(2.0 * ranks[i]));
  // No n-subset sums past its n largest ranks.
  std::vector<std::size_t> sorted(r2);
  std::sort(sorted.rbegin(), sorted.rend());
  const std::size_t cap = std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n), std::size_t{0});
  // ways[c][s]: c-subsets of the items seen so far with doubled rank sum s.
  std::vector<std::vector<double>> ways(n + 1, std::vector<double>(cap + 1, 0.0));
  ways[0][0] = 1.0;
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t c = std::min(n, i + 1); c >= 1; --c) {
      auto& dst = ways[c];
      const auto& src = ways[c - 1];
      for (std::size_t s = cap + 1; s-- > r2[i];) dst[s] += src[s - r2[i]];
    }
  }
  const long obs = std::lround(2.0 * observed);
  double hit = 0.0, all = 0.0;
  for (std::size_t s = 0; s <= cap; ++s) {
    all += ways[n][s];
    const long sl = static_cast<long>(s);
    if (lower ? sl <= obs : sl >= obs) hit += ways[n][s];
  }
  return hit / all;
}

}  // namespace detail

inline constexpr std::size_t kExactLimit = 8;

/// U counts pairs with x > y (ties 1/2). p is the one-sided lower tail, exact
/// by enumeration when min(|x|, |y|) <= 8, otherwise the normal approximation
/// with tie and continuity corrections.
inline MannWhitney mann_whitney_u(const std::vector<double>& x, const std::vector<double>& y, bool force_approx = false) {
  if (x.empty() || y.empty()) throw PreconditionError("mann_whitney_u: both samples must be non-empty");
  const std::size_t n = x.size(), m = y.size(), N = n + m;
  std::vector<double> pooled(x);
  pooled.insert(pooled.end(), y.begin(), y.end());
  const auto [rank, ties] = detail::midranks(pooled);
  double rx = 0.0;
  for (std::size_t i = 0; i < n; ++i) rx += rank[i];
  MannWhitney out;
  out.u = rx - static_cast<double>(n) * static_cast<double>(n + 1) / 2.0;
  if (!force_approx && std::min(n, m) <= kExactLimit) {
    // Enumerate subsets of the smaller sample; R_x <= r  <=>  R_y >= total - r.
    if (n <= m) {
      out.p = detail::exact_rank_sum_tail(rank, n, rx, true);
    } else {
      const double total = static_cast<double>(N) * static_cast<double>(N + 1) / 2.0;
      out.p = detail::exact_rank_sum_tail(rank, m, total - rx, false);
    }
    out.exact = true;
    return out;
  }
  const double nm = static_cast<double>(n) * static_cast<double>(m);
  double tie_term = 0.0;
  for (auto t : ties) tie_term += static_cast<double>(t) * static_cast<double>(t) * static_cast<double>(t) - static_cast<double>(t);
  const double Nd = static_cast<double>(N);
  const double var = nm / 12.0 * ((Nd + 1.0) - tie_term / (Nd * (Nd - 1.0)));
  if (!(var > 0.0)) {
    out.p = 1.0;
    return out;
  }
  out.p = std::min(1.0, detail::normal_cdf((out.u + 0.5 - nm / 2.0) / std::sqrt(var)));
  return out;
}

/// Two-sided p from the two one-sided tails.
inline double mann_whitney_two_sided(const std::vector<double>& x, const std::vector<double>& y) {
  const double lo = mann_whitney_u(x, y).p;
  const double hi = mann_whitney_u(y, x).p;
  return std::min(1.0, 2.0 * std::min(lo, hi));
}

// ---------------------------------------------------------------------------
// Corpora and sampling

struct SampleProtocol {
  std::size_t texts = 250;
  std::size_t tokens_per_text = 5;
  std::size_t max_tokens = 64;  // texts are truncated to this many byte tokens
  std::uint64_t seed = 0;
};

/// A directory (one document per file) or a file (one document per line).
inline std::vector<std::string> load_corpus(const std::filesystem::path& path) {
  std::vector<std::string> docs;
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw LoadError("cannot read corpus file " + p.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  };
  if (std::filesystem::is_directory(path)) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) docs.push_back(slurp(f));
  } else {
    std::istringstream in(slurp(path));
    for (std::string line; std::getline(in, line);) {
      if (!line.empty()) docs.push_back(line);
    }
  }
  if (docs.empty()) throw PreconditionError("corpus " + path.string() + " is empty");
  return docs;
}

struct SampledText {
  std::vector<int> tokens;
  std::vector<std::size_t> positions;  // never 0: the first token plays the BOS role
};

/// Picks up to `protocol.texts` documents and, per document, distinct token
/// positions excluding position 0.
inline std::vector<SampledText> sample_corpus(const std::vector<std::string>& corpus, const SampleProtocol& protocol) {
  if (corpus.empty()) throw PreconditionError("empty corpus");
  Rng rng(protocol.seed);
  std::vector<std::size_t> docs(corpus.size());
  std::iota(docs.begin(), docs.end(), 0);
  shuffle(docs, rng);
  docs.resize(std::min(docs.size(), protocol.texts));
  std::vector<SampledText> out;
  for (auto d : docs) {
    SampledText s;
    const auto& text = corpus[d];
    s.tokens = encode_bytes(std::string_view(text).substr(0, protocol.max_tokens));
    if (s.tokens.size() < 2) continue;
    std::vector<std::size_t> pos(s.tokens.size() - 1);
    std::iota(pos.begin(), pos.end(), 1);
    shuffle(pos, rng);
    pos.resize(std::min(pos.size(), protocol.tokens_per_text));
    std::sort(pos.begin(), pos.end());
    s.positions = std::move(pos);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw PreconditionError("corpus has no text with at least two tokens");
  return out;
}

/// Activations of every compatible dictionary at every token except position
/// 0, stacked over the corpus (samples x D per position).
inline std::map<SitePosition, MatrixD> collect_activations(const ModelBundle& bundle, const std::vector<std::string>& corpus,
                                                           std::size_t max_tokens = 64) {
  const auto& model = bundle.toy_model();
  std::map<SitePosition, std::vector<double>> acc;
  std::size_t rows = 0;
  for (const auto& text : corpus) {
    const auto tokens = encode_bytes(std::string_view(text).substr(0, max_tokens));
    if (tokens.size() < 2) continue;
    auto rec = forward(model, tokens);
    annotate(rec, bundle);
    for (const auto& [p, z] : rec.features) {
      auto& v = acc[p];
      v.insert(v.end(), z.data() + z.cols(), z.data() + z.size());
    }
    rows += tokens.size() - 1;
  }
  std::map<SitePosition, MatrixD> out;
  for (auto& [p, v] : acc) {
    const std::size_t D = v.size() / rows;
    out.emplace(p, MatrixD(rows, D, std::move(v)));
  }
  return out;
}

/// Pearson top-k maps from each R_L into its predecessor sites.
inline std::map<SitePosition, TransitionMap> pearson_maps(const ModelBundle& bundle, const std::map<SitePosition, MatrixD>& acts,
                                                          const PearsonOptions& opts = {}) {
  std::map<SitePosition, TransitionMap> out;  // keyed by (target residual layer, predecessor site)
  for (int l = 1; l < bundle.layer_count; ++l) {
    auto tgt = acts.find({l, Site::Res});
    if (tgt == acts.end()) continue;
    for (Site s : kAllSites) {
      const SitePosition pred = s == Site::Res ? SitePosition{l - 1, Site::Res} : SitePosition{l, s};
      auto it = acts.find(pred);
      if (it == acts.end()) continue;
      auto m = pearson_match(tgt->second, it->second, opts);
      m.source = {l, Site::Res};
      m.target = pred;
      out.emplace(SitePosition{l, s}, std::move(m));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Group distributions

enum class Matcher { Cosine, Pearson };

inline Matcher parse_matcher(const std::string& s) {
  if (s == "cosine") return Matcher::Cosine;
  if (s == "pearson") return Matcher::Pearson;
  throw PreconditionError("unknown matcher '" + s + "' (expected cosine or pearson)");
}

/// One classified (text, token, feature) instance.
struct Classified {
  std::size_t text = 0;
  std::size_t token = 0;
  FeatureRef feature;
  OriginGroup group = OriginGroup::FromNowhere;
};

struct GroupDistribution {
  /// counts[layer][group]
  std::map<int, std::array<std::size_t, 8>> counts;
  std::vector<Classified> instances;

  std::size_t total(int layer) const {
    const auto& c = counts.at(layer);
    return std::accumulate(c.begin(), c.end(), std::size_t{0});
  }
  double percent(int layer, OriginGroup g) const {
    const auto t = total(layer);
    return t == 0 ? 0.0 : 100.0 * static_cast<double>(counts.at(layer)[static_cast<std::size_t>(g)]) / static_cast<double>(t);
  }
  double nowhere_share() const {
    std::size_t n = 0, all = 0;
    for (const auto& [l, c] : counts) {
      n += c[static_cast<std::size_t>(OriginGroup::FromNowhere)];
      all += std::accumulate(c.begin(), c.end(), std::size_t{0});
    }
    return all == 0 ? 0.0 : 100.0 * static_cast<double>(n) / static_cast<double>(all);
  }
};

/// Per-layer origin maps for one matcher; layer 0 is never classified.
class OriginMapSet {
 public:
  static OriginMapSet cosine(const ModelBundle& bundle, std::size_t k = 1) {
    OriginMapSet s;
    for (int l = 1; l < bundle.layer_count; ++l) {
      if (bundle.match_compatible({l, Site::Res})) s.layers_.emplace(l, build_layer_maps(bundle, l, k));
    }
    return s;
  }

  static OriginMapSet from_pearson(std::map<SitePosition, TransitionMap> maps) {
    OriginMapSet s;
    for (auto& [key, m] : maps) {
      auto& lm = s.layers_[key.layer];
      switch (key.site) {
        case Site::Res: lm.res = std::move(m); break;
        case Site::Mlp: lm.mlp = std::move(m); break;
        case Site::Att: lm.att = std::move(m); break;
      }
    }
    return s;
  }

  const LayerMaps* at(int layer) const {
    auto it = layers_.find(layer);
    return it == layers_.end() ? nullptr : &it->second;
  }

 private:
  std::map<int, LayerMaps> layers_;
};

inline GroupDistribution group_distribution(const ModelBundle& bundle, const std::vector<SampledText>& sample, const OriginMapSet& maps,
                                            OriginMode mode = OriginMode::Top1) {
  if (sample.empty()) throw PreconditionError("group_distribution: empty corpus");
  const auto& model = bundle.toy_model();
  GroupDistribution dist;
  for (int l = 1; l < bundle.layer_count; ++l) {
    if (maps.at(l)) dist.counts[l].fill(0);
  }
  for (std::size_t ti = 0; ti < sample.size(); ++ti) {
    const auto& s = sample[ti];
    auto rec = forward(model, s.tokens);
    annotate(rec, bundle);
    for (int l = 1; l < bundle.layer_count; ++l) {
      const auto* lm = maps.at(l);
      if (lm == nullptr) continue;
      const auto view = lm->view();
      const auto& z = rec.features.at({l, Site::Res});
      for (auto t : s.positions) {
        for (std::size_t f = 0; f < z.cols(); ++f) {
          if (!(z(t, f) > 0.0)) continue;
          const auto g = classify_origin(f, l, t, rec, view, mode);
          ++dist.counts[l][static_cast<std::size_t>(g)];
          dist.instances.push_back({ti, t, {{l, Site::Res}, f}, g});
        }
      }
    }
  }
  return dist;
}

inline nlohmann::json to_json(const GroupDistribution& d) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [l, c] : d.counts) {
    nlohmann::json pct;
    for (auto g : kAllGroups) pct[group_name(g)] = d.percent(l, g);
    rows.push_back({{"layer", l}, {"instances", d.total(l)}, {"percent", pct}});
  }
  return {{"layers", rows}, {"from_nowhere_total_percent", d.nowhere_share()}};
}

// ---------------------------------------------------------------------------
// Separation report

enum class Bucket { AO, AB, IB };

inline std::string bucket_name(Bucket b) {
  switch (b) {
    case Bucket::AO: return "AO";
    case Bucket::AB: return "AB";
    case Bucket::IB: return "IB";
  }
  return "?";
}

/// AO: the score's site is active in only one of the two groups; AB: in both;
/// IB: in neither.
inline Bucket bucket_for(OriginGroup a, OriginGroup b, Site site) {
  const bool x = group_has(a, site), y = group_has(b, site);
  if (x != y) return Bucket::AO;
  return x ? Bucket::AB : Bucket::IB;
}

/// Score samples of one (layer, corpus) dataset: scores[group][site] lists
/// the top-1 cosine score of every classified instance.
using GroupScores = std::map<OriginGroup, std::array<std::vector<double>, 3>>;

struct SeparationEntry {
  OriginGroup a = OriginGroup::FromNowhere;
  OriginGroup b = OriginGroup::FromNowhere;
  Site score = Site::Res;
  Bucket bucket = Bucket::IB;
  std::size_t tests = 0;
  std::size_t significant = 0;

  double fraction() const { return tests == 0 ? 0.0 : static_cast<double>(significant) / static_cast<double>(tests); }
};

inline std::vector<SeparationEntry> group_separation_report(const std::vector<GroupScores>& datasets, double p_threshold = 0.001) {
  std::map<std::tuple<OriginGroup, OriginGroup, Site>, SeparationEntry> acc;
  for (const auto& ds : datasets) {
    for (auto ia = ds.begin(); ia != ds.end(); ++ia) {
      for (auto ib = std::next(ia); ib != ds.end(); ++ib) {
        for (int s = 0; s < 3; ++s) {
          const auto& xa = ia->second[static_cast<std::size_t>(s)];
          const auto& xb = ib->second[static_cast<std::size_t>(s)];
          if (xa.empty() || xb.empty()) continue;
          const Site site = kAllSites[s];
          auto& e = acc[{ia->first, ib->first, site}];
          e.a = ia->first;
          e.b = ib->first;
          e.score = site;
          e.bucket = bucket_for(e.a, e.b, site);
          ++e.tests;
          e.significant += mann_whitney_two_sided(xa, xb) < p_threshold ? 1 : 0;
        }
      }
    }
  }
  std::vector<SeparationEntry> out;
  for (auto& [k, e] : acc) out.push_back(e);
  return out;
}

/// Builds one GroupScores per layer from a distribution, using each
/// instance's top-1 cosine score at every predecessor site.
inline std::vector<GroupScores> group_scores(const ModelBundle& bundle, const GroupDistribution& dist) {
  std::map<int, GroupScores> by_layer;
  std::map<FeatureRef, SiteScores> cache;
  for (const auto& in : dist.instances) {
    auto it = cache.find(in.feature);
    if (it == cache.end()) it = cache.emplace(in.feature, site_scores(in.feature.index, in.feature.position.layer, bundle)).first;
    auto& slots = by_layer[in.feature.position.layer][in.group];
    for (int s = 0; s < 3; ++s) {
      const auto& m = it->second.at(kAllSites[s]);
      if (m) slots[static_cast<std::size_t>(s)].push_back(m->score);
    }
  }
  std::vector<GroupScores> out;
  for (auto& [l, g] : by_layer) out.push_back(std::move(g));
  return out;
}

inline nlohmann::json to_json(const SeparationEntry& e) {
  return {{"group_a", group_name(e.a)}, {"group_b", group_name(e.b)}, {"score", "s_" + std::string(site_name(e.score))},
          {"bucket", bucket_name(e.bucket)}, {"tests", e.tests}, {"significant", e.significant}, {"fraction", e.fraction()}};
}

// ---------------------------------------------------------------------------
// Intersection matrix

using GroupMatrix = std::array<std::array<double, 8>, 8>;

/// labels[feature] lists the group of every context the feature was seen in.
/// Entry (A, B): share of features ever labelled A that are labelled B in some
/// other context. The diagonal is 1 for groups that occur and 0 otherwise.
inline GroupMatrix intersection_matrix(const std::map<FeatureRef, std::vector<OriginGroup>>& labels) {
  bool multi = false;
  for (const auto& [f, g] : labels) multi = multi || g.size() >= 2;
  if (!multi) throw PreconditionError("intersection_matrix: needs a feature seen in at least two contexts");
  std::array<std::size_t, 8> with_a{};
  std::array<std::array<std::size_t, 8>, 8> both{};
  for (const auto& [f, gs] : labels) {
    std::array<std::size_t, 8> count{};
    for (auto g : gs) ++count[static_cast<std::size_t>(g)];
    for (std::size_t a = 0; a < 8; ++a) {
      if (count[a] == 0) continue;
      ++with_a[a];
      for (std::size_t b = 0; b < 8; ++b) {
        if (b == a) continue;
        // Any B label sits in a context other than the one carrying A.
        if (count[b] > 0) ++both[a][b];
      }
    }
  }
  GroupMatrix m{};
  for (std::size_t a = 0; a < 8; ++a) {
    if (with_a[a] == 0) continue;
    for (std::size_t b = 0; b < 8; ++b) m[a][b] = a == b ? 1.0 : static_cast<double>(both[a][b]) / static_cast<double>(with_a[a]);
  }
  return m;
}

inline std::map<FeatureRef, std::vector<OriginGroup>> labels_by_feature(const GroupDistribution& d) {
  std::map<FeatureRef, std::vector<OriginGroup>> out;
  for (const auto& in : d.instances) out[in.feature].push_back(in.group);
  return out;
}

inline nlohmann::json to_json(const GroupMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (auto a : kAllGroups) {
    nlohmann::json row;
    for (auto b : kAllGroups) row[group_name(b)] = m[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
    rows.push_back({{"group", group_name(a)}, {"row", row}});
  }
  return rows;
}

}  // namespace featureflow
