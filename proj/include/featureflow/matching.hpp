#pragma once

// Data-free feature matching between SAE dictionaries (cosine similarity of
// decoder columns) plus the permutation and Pearson-correlation baselines.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "featureflow/detail/blocked_kernel.hpp"
#include "featureflow/linalg.hpp"
#include "featureflow/tensors.hpp"

namespace featureflow {

inline constexpr double kExcluded = -std::numeric_limits<double>::infinity();

struct TransitionEntry {
  std::size_t target = 0;
  double score = 0.0;

  friend bool operator==(const TransitionEntry&, const TransitionEntry&) = default;
};

/// Sparse feature-to-feature map. Each source row holds at most k entries,
/// sorted by descending score, all strictly positive.
struct TransitionMap {
  SitePosition source;
  SitePosition target;
  std::size_t k = 1;
  std::size_t target_size = 0;
  std::vector<std::vector<TransitionEntry>> entries;

  std::size_t source_size() const { return entries.size(); }

  std::optional<TransitionEntry> top1(std::size_t i) const {
    if (i >= entries.size() || entries[i].empty()) return std::nullopt;
    return entries[i].front();
  }

  friend bool operator==(const TransitionMap&, const TransitionMap&) = default;
};

struct MatchOptions {
  detail::TileShape tiles{};
  /// Compare unit-norm decoder columns (default) or raw columns.
  bool normalized = true;
};

namespace detail {

/// Row-major (D x d) feature directions used for scoring plus a validity mask.
struct ScoringView {
  const MatrixD* rows = nullptr;
  MatrixD owned;
  std::vector<unsigned char> valid;
};

inline ScoringView scoring_view(const FeatureDictionary& dict, bool normalized) {
  ScoringView v;
  v.valid.resize(dict.size());
  for (std::size_t i = 0; i < dict.size(); ++i) v.valid[i] = dict.degenerate(i) ? 0 : 1;
  if (normalized) {
    v.rows = &dict.embeddings();
  } else {
    v.owned = cast<double>(transpose(dict.decoder()));
    v.rows = &v.owned;
  }
  return v;
}

inline void require_same_width(const FeatureDictionary& a, const FeatureDictionary& b) {
  if (a.model_dim() != b.model_dim()) {
    throw IncompatibleError("cannot match " + to_string(a.position()) + " (d=" + std::to_string(a.model_dim()) + ") against " +
                            to_string(b.position()) + " (d=" + std::to_string(b.model_dim()) + ")");
  }
}

/// Keeps a descending top-k list; strictly greater scores displace, so among
/// equal scores the earliest (lowest) column seen stays.
inline void push_top_k(std::vector<TransitionEntry>& best, std::size_t k, std::size_t j, double s) {
  if (best.size() == k && !(s > best.back().score)) return;
  auto pos = std::upper_bound(best.begin(), best.end(), s, [](double v, const TransitionEntry& e) { return v > e.score; });
  best.insert(pos, TransitionEntry{j, s});
  if (best.size() > k) best.pop_back();
}

inline void drop_non_positive(std::vector<TransitionEntry>& row) {
  row.erase(std::remove_if(row.begin(), row.end(), [](const TransitionEntry& e) { return !(e.score > 0.0); }), row.end());
}

/// Streaming top-k of a * b^T per row of a, without materialising the product.
inline std::vector<std::vector<TransitionEntry>> streaming_top_k(const MatrixD& a, const std::vector<unsigned char>& valid_a,
                                                                 const MatrixD& b, const std::vector<unsigned char>& valid_b,
                                                                 std::size_t k, TileShape tiles) {
  std::vector<std::vector<TransitionEntry>> best(a.rows());
  for_each_tile(a, b, tiles, [&](std::size_t i0, std::size_t j0, std::size_t mi, std::size_t nj, const double* tile, std::size_t ld) {
    for (std::size_t r = 0; r < mi; ++r) {
      if (!valid_a[i0 + r]) continue;
      auto& row = best[i0 + r];
      const double* t = tile + r * ld;
      for (std::size_t c = 0; c < nj; ++c) {
        if (valid_b[j0 + c]) push_top_k(row, k, j0 + c, t[c]);
      }
    }
  });
  return best;
}

}  // namespace detail

/// Full D_a x D_b cosine matrix; entries touching a degenerate column are -inf.
inline MatrixD similarity_matrix(const FeatureDictionary& a, const FeatureDictionary& b, std::size_t block = 256,
                                 bool normalized = true) {
  detail::require_same_width(a, b);
  const auto va = detail::scoring_view(a, normalized);
  const auto vb = detail::scoring_view(b, normalized);
  MatrixD sim(a.size(), b.size());
  detail::TileShape tiles{block, block, 256};
  detail::for_each_tile(*va.rows, *vb.rows, tiles, [&](std::size_t i0, std::size_t j0, std::size_t mi, std::size_t nj, const double* tile, std::size_t ld) {
    for (std::size_t r = 0; r < mi; ++r) {
      for (std::size_t c = 0; c < nj; ++c) {
        sim(i0 + r, j0 + c) = va.valid[i0 + r] && vb.valid[j0 + c] ? tile[r * ld + c] : kExcluded;
      }
    }
  });
  return sim;
}

/// Per row: the k largest entries (lowest column wins ties), then non-positive ones dropped.
inline TransitionMap top_k_transition(const MatrixD& sim, std::size_t k) {
  if (k < 1) throw PreconditionError("top_k_transition: k must be >= 1");
  TransitionMap t;
  t.k = k;
  t.target_size = sim.cols();
  t.entries.resize(sim.rows());
  for (std::size_t i = 0; i < sim.rows(); ++i) {
    auto& row = t.entries[i];
    for (std::size_t j = 0; j < sim.cols(); ++j) {
      if (sim(i, j) != kExcluded) detail::push_top_k(row, k, j, sim(i, j));
    }
    detail::drop_non_positive(row);
  }
  return t;
}

/// Top-k transition between two dictionaries computed tile by tile; memory is
/// O(D_a * k) regardless of dictionary sizes.
inline TransitionMap match_top_k(const FeatureDictionary& a, const FeatureDictionary& b, std::size_t k,
                                 const MatchOptions& opts = {}) {
  if (k < 1) throw PreconditionError("match_top_k: k must be >= 1");
  detail::require_same_width(a, b);
  const auto va = detail::scoring_view(a, opts.normalized);
  const auto vb = detail::scoring_view(b, opts.normalized);
  TransitionMap t;
  t.source = a.position();
  t.target = b.position();
  t.k = k;
  t.target_size = b.size();
  t.entries = detail::streaming_top_k(*va.rows, va.valid, *vb.rows, vb.valid, k, opts.tiles);
  for (auto& row : t.entries) detail::drop_non_positive(row);
  return t;
}

struct SiteMatch {
  std::size_t index = 0;
  double score = 0.0;
};

/// Best cosine of one residual feature against each predecessor site.
/// A site with no dictionary (or no valid column) is absent, not zero.
struct SiteScores {
  int layer = 0;
  std::size_t feature = 0;
  std::optional<SiteMatch> res;  // R_{L-1}
  std::optional<SiteMatch> mlp;
  std::optional<SiteMatch> att;

  const std::optional<SiteMatch>& at(Site s) const {
    switch (s) {
      case Site::Res: return res;
      case Site::Mlp: return mlp;
      case Site::Att: return att;
    }
    return res;
  }
};

/// Argmax of dot(f, column) over the dictionary's valid columns.
inline std::optional<SiteMatch> best_match(std::span<const double> f, const FeatureDictionary& dict) {
  std::optional<SiteMatch> best;
  const auto& e = dict.embeddings();
  for (std::size_t j = 0; j < dict.size(); ++j) {
    if (dict.degenerate(j)) continue;
    const double s = dot(std::span<const double>(f), e.row(j));
    if (!best || s > best->score) best = SiteMatch{j, s};
  }
  return best;
}

inline SiteScores site_scores(std::size_t f, int layer, const ModelBundle& bundle) {
  const auto& target = bundle.matchable({layer, Site::Res});
  if (f >= target.size()) {
    throw PreconditionError("feature " + std::to_string(f) + " out of range for " + to_string(target.position()) + " (D=" +
                            std::to_string(target.size()) + ")");
  }
  SiteScores s;
  s.layer = layer;
  s.feature = f;
  if (target.degenerate(f)) return s;
  const auto emb = target.embedding(f);
  auto score = [&](SitePosition p) -> std::optional<SiteMatch> {
    if (p.layer < 0 || !bundle.has(p)) return std::nullopt;
    return best_match(emb, bundle.matchable(p));
  };
  s.res = score({layer - 1, Site::Res});
  s.mlp = score({layer, Site::Mlp});
  s.att = score({layer, Site::Att});
  return s;
}

// ---------------------------------------------------------------------------
// Permutation baseline

struct Permutation {
  std::vector<std::size_t> mapping;  // source feature -> target feature
  double objective = 0.0;  // sum of matched cosine scores (degenerate pairs count 0)
};

struct PermutationOptions {
  std::size_t max_size = 4096;
  /// Lifts the size gate; cost is O(D^3) time and O(D^2) memory.
  bool allow_large = false;
  double tie_tolerance = 1e-10;
};

namespace detail {

/// Minimum-cost perfect assignment on a square cost matrix (shortest augmenting
/// paths with potentials). Returns row -> column and the dual potentials.
struct AssignmentSolution {
  std::vector<std::size_t> row_to_col;
  std::vector<double> u, v;
};

inline AssignmentSolution solve_assignment(const MatrixD& cost) {
  const std::size_t n = cost.rows();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  AssignmentSolution s;
  s.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) s.row_to_col[p[j] - 1] = j - 1;
  s.u.assign(u.begin() + 1, u.end());
  s.v.assign(v.begin() + 1, v.end());
  return s;
}

/// Among optimal assignments (perfect matchings on zero reduced-cost edges),
/// moves to the lexicographically smallest row -> column sequence.
inline void lexicographic_refine(const MatrixD& cost, AssignmentSolution& s, double tol) {
  const std::size_t n = cost.rows();
  std::vector<std::vector<std::size_t>> tight(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (cost(i, j) - s.u[i] - s.v[j] <= tol) tight[i].push_back(j);
    }
  }
  auto& match = s.row_to_col;
  std::vector<std::size_t> owner(n);
  for (std::size_t i = 0; i < n; ++i) owner[match[i]] = i;
  std::vector<char> seen(n);
  std::vector<std::pair<std::size_t, std::size_t>> path;  // (row, new column)

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j : tight[i]) {
      if (j >= match[i]) break;
      const std::size_t start = owner[j];
      if (start < i) continue;  // column held by a fixed row
      const std::size_t goal = match[i];
      std::fill(seen.begin(), seen.end(), 0);
      seen[j] = 1;
      path.clear();
      // Depth-first search for an alternating path start -> ... -> goal among rows > i.
      auto dfs = [&](auto&& self, std::size_t r) -> bool {
        for (std::size_t c : tight[r]) {
          if (seen[c]) continue;
          seen[c] = 1;
          if (c == goal) {
            path.emplace_back(r, c);
            return true;
          }
          const std::size_t r2 = owner[c];
          if (r2 <= i) continue;
          if (self(self, r2)) {
            path.emplace_back(r, c);
            return true;
          }
        }
        return false;
      };
      if (!dfs(dfs, start)) continue;
      for (auto [r, c] : path) {
        match[r] = c;
        owner[c] = r;
      }
      match[i] = j;
      owner[j] = i;
      break;
    }
  }
}

}  // namespace detail

/// Linear assignment maximising the total matched cosine score; for unit
/// columns this minimises the Frobenius distance between W_b and W_a P.
inline Permutation permutation_match(const FeatureDictionary& a, const FeatureDictionary& b, const PermutationOptions& opts = {}) {
  detail::require_same_width(a, b);
  if (a.size() != b.size()) {
    throw PreconditionError("permutation_match: dictionaries differ in size (" + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()) + ")");
  }
  if (a.size() > opts.max_size && !opts.allow_large) {
    throw PreconditionError("permutation_match: D=" + std::to_string(a.size()) + " exceeds the exact-solver gate of " +
                            std::to_string(opts.max_size) + "; set allow_large to proceed");
  }
  const auto sim = similarity_matrix(a, b);
  MatrixD cost(sim.rows(), sim.cols());
  for (std::size_t i = 0; i < sim.size(); ++i) {
    // A degenerate column is placed last: its cost exceeds any real pair (max 1).
    cost.data()[i] = sim.data()[i] == kExcluded ? 2.0 : -sim.data()[i];
  }
  auto sol = detail::solve_assignment(cost);
  detail::lexicographic_refine(cost, sol, opts.tie_tolerance);
  Permutation p;
  p.mapping = sol.row_to_col;
  for (std::size_t i = 0; i < p.mapping.size(); ++i) {
    const double s = sim(i, p.mapping[i]);
    if (s != kExcluded) p.objective += s;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Pearson baseline

struct PearsonOptions {
  std::size_t min_count = 10;  // features firing (z > 0) fewer times are excluded
  std::size_t k = 1;
  detail::TileShape tiles{};
};

namespace detail {

/// Columns of acts turned into unit-norm centred rows so that dot = correlation.
inline ScoringView standardized_rows(const MatrixD& acts, std::size_t min_count) {
  const std::size_t n = acts.rows();
  const std::size_t D = acts.cols();
  ScoringView v;
  v.owned = MatrixD(D, n);
  v.valid.assign(D, 0);
  for (std::size_t c = 0; c < D; ++c) {
    std::size_t fired = 0;
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      mean += acts(r, c);
      fired += acts(r, c) > 0.0 ? 1 : 0;
    }
    if (fired < min_count) continue;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) ss += (acts(r, c) - mean) * (acts(r, c) - mean);
    const double norm = std::sqrt(ss);
    if (!(norm > 0.0) || norm < 1e-12 * (std::abs(mean) + 1.0)) continue;  // constant column
    for (std::size_t r = 0; r < n; ++r) v.owned(c, r) = (acts(r, c) - mean) / norm;
    v.valid[c] = 1;
  }
  v.rows = &v.owned;
  return v;
}

}  // namespace detail

/// Per source feature, the target feature(s) with maximal positive Pearson
/// correlation over paired samples (rows are tokens).
inline TransitionMap pearson_match(const MatrixD& acts_a, const MatrixD& acts_b, const PearsonOptions& opts = {}) {
  if (acts_a.rows() < 2) throw PreconditionError("pearson_match: need at least two samples");
  if (acts_a.rows() != acts_b.rows()) throw PreconditionError("pearson_match: sample counts differ");
  if (opts.k < 1) throw PreconditionError("pearson_match: k must be >= 1");
  const auto va = detail::standardized_rows(acts_a, opts.min_count);
  const auto vb = detail::standardized_rows(acts_b, opts.min_count);
  TransitionMap t;
  t.k = opts.k;
  t.target_size = acts_b.cols();
  t.entries = detail::streaming_top_k(*va.rows, va.valid, *vb.rows, vb.valid, opts.k, opts.tiles);
  for (auto& row : t.entries) detail::drop_non_positive(row);
  return t;
}

/// Plain Pearson correlation of two equal-length samples; NaN when either is constant.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Folding

/// Scales decoder column i by mean_acts[i] (zero leaves it untouched) and
/// marks the result folded. Matching still sees unit-norm columns.
inline FeatureDictionary fold_dictionary(const FeatureDictionary& dict, std::span<const double> mean_acts) {
  if (mean_acts.size() != dict.size()) throw PreconditionError("fold_dictionary: mean activation length mismatch");
  for (std::size_t i = 0; i < mean_acts.size(); ++i) {
    if (mean_acts[i] < 0.0 || !std::isfinite(mean_acts[i])) {
      throw PreconditionError("fold_dictionary: mean activation of feature " + std::to_string(i) + " is negative or non-finite");
    }
  }
  MatrixF dec = dict.decoder();
  for (std::size_t c = 0; c < dec.cols(); ++c) {
    if (mean_acts[c] == 0.0) continue;
    for (std::size_t r = 0; r < dec.rows(); ++r) dec(r, c) = static_cast<float>(dec(r, c) * mean_acts[c]);
  }
  FeatureDictionary out(dict.position(), dict.activation(), std::move(dec), dict.encoder(), dict.enc_bias(), dict.dec_bias(),
                        dict.thresholds());
  out.set_folded(true);
  VectorF m(mean_acts.begin(), mean_acts.end());
  out.set_mean_activations(std::move(m));
  return out;
}

// ---------------------------------------------------------------------------
// Serialisation: one JSON object per map, entries as [source, target, score].

inline nlohmann::json to_json(const TransitionMap& t) {
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < t.entries.size(); ++i) {
    for (const auto& e : t.entries[i]) entries.push_back({i, e.target, e.score});
  }
  return {{"source", to_string(t.source)},
          {"target", to_string(t.target)},
          {"k", t.k},
          {"source_size", t.entries.size()},
          {"target_size", t.target_size},
          {"entries", entries}};
}

inline SitePosition parse_position(const std::string& s) {
  const auto f = parse_feature_ref(s + "/0");
  return f.position;
}

inline TransitionMap transition_from_json(const nlohmann::json& j) {
  TransitionMap t;
  t.source = parse_position(j.at("source").get<std::string>());
  t.target = parse_position(j.at("target").get<std::string>());
  t.k = j.at("k").get<std::size_t>();
  t.target_size = j.at("target_size").get<std::size_t>();
  t.entries.resize(j.at("source_size").get<std::size_t>());
  for (const auto& e : j.at("entries")) {
    t.entries.at(e.at(0).get<std::size_t>()).push_back({e.at(1).get<std::size_t>(), e.at(2).get<double>()});
  }
  return t;
}

}  // namespace featureflow
