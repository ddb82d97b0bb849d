#pragma once

// Hidden-state rescaling and the causal deactivation protocol.

#include <array>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "featureflow/flowgraph.hpp"
#include "featureflow/matching.hpp"
#include "featureflow/sae.hpp"
#include "featureflow/transformer.hpp"

namespace featureflow {

/// h + (r-1) V a, with V given as d x f. r == 1 returns h untouched so that
/// signed zeros survive as well.
inline VectorD rescale(std::span<const double> h, const MatrixD& V, std::span<const double> a, double r) {
  if (V.rows() != h.size() || V.cols() != a.size()) throw PreconditionError("rescale: V must be d x f with f = |a|");
  if (!std::isfinite(r)) throw PreconditionError("rescale: r must be finite");
  VectorD out(h.begin(), h.end());
  if (r == 1.0) return out;
  const double c = r - 1.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) s += V(i, j) * a[j];
    out[i] += c * s;
  }
  return out;
}

inline std::optional<double> activation_change(double z_old, double z_new) {
  if (!(z_old > 0.0)) return std::nullopt;
  return 1.0 - z_new / z_old;
}

inline std::optional<double> relative_loss_change(double l_old, double l_new) {
  if (!(l_old > 0.0)) return std::nullopt;
  return (l_new - l_old) / l_old;
}

struct FeatureSpec {
  std::size_t index = 0;
  VectorD embedding;
  double activation = 0.0;
};

struct InterventionSpec {
  SitePosition position;
  std::optional<std::size_t> token;  // nullopt: every token
  std::vector<FeatureSpec> features;
  double r = 0.0;

  Intervention to_intervention() const {
    if (!std::isfinite(r)) throw PreconditionError("intervention: r must be finite");
    const std::size_t d = features.empty() ? 0 : features.front().embedding.size();
    MatrixD V(d, features.size());
    VectorD a(features.size());
    for (std::size_t j = 0; j < features.size(); ++j) {
      if (features[j].embedding.size() != d) throw PreconditionError("intervention: embeddings differ in length");
      for (std::size_t i = 0; i < d; ++i) V(i, j) = features[j].embedding[i];
      a[j] = features[j].activation;
    }
    const double rr = r;
    return {position, token, [V = std::move(V), a = std::move(a), rr](std::span<double> h, std::size_t) {
              if (a.empty()) return;
              const auto out = rescale(h, V, a, rr);
              std::copy(out.begin(), out.end(), h.begin());
            }};
  }
};

enum class Strategy { Permutation, Top1, Top5, Random, Pearson };

inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Permutation: return "permutation";
    case Strategy::Top1: return "top1";
    case Strategy::Top5: return "top5";
    case Strategy::Random: return "random";
    case Strategy::Pearson: return "pearson";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  for (auto v : {Strategy::Permutation, Strategy::Top1, Strategy::Top5, Strategy::Random, Strategy::Pearson}) {
    if (strategy_name(v) == s) return v;
  }
  throw PreconditionError("unknown strategy '" + s + "' (expected permutation, top1, top5, random or pearson)");
}

inline constexpr std::size_t kTopFive = 5;

/// Lazily computed transition data from R_L into its predecessor sites.
/// Cosine maps keep the top five; top-1 reads their first entry.
class PredecessorMaps {
 public:
  explicit PredecessorMaps(const ModelBundle& bundle, PermutationOptions perm = {}) : bundle_(&bundle), perm_(perm) {}

  const ModelBundle& bundle() const { return *bundle_; }

  /// nullptr when the site has no dictionary.
  const TransitionMap* cosine(int layer, Site site) {
    const auto key = pred(layer, site);
    if (!usable(key)) return nullptr;
    std::lock_guard lock(mu_);
    auto it = cosine_.find({layer, site});
    if (it == cosine_.end()) {
      it = cosine_.emplace(SitePosition{layer, site}, match_top_k(bundle_->matchable({layer, Site::Res}), bundle_->matchable(key), kTopFive)).first;
    }
    return &it->second;
  }

  const Permutation* permutation(int layer, Site site) {
    const auto key = pred(layer, site);
    if (!usable(key)) return nullptr;
    std::lock_guard lock(mu_);
    auto it = perm_cache_.find({layer, site});
    if (it == perm_cache_.end()) {
      it = perm_cache_.emplace(SitePosition{layer, site}, permutation_match(bundle_->matchable({layer, Site::Res}), bundle_->matchable(key), perm_)).first;
    }
    return &it->second;
  }

  void set_pearson(int layer, Site site, TransitionMap map) {
    std::lock_guard lock(mu_);
    pearson_[{layer, site}] = std::move(map);
  }

  const TransitionMap* pearson(int layer, Site site) {
    std::lock_guard lock(mu_);
    auto it = pearson_.find({layer, site});
    return it == pearson_.end() ? nullptr : &it->second;
  }

  bool has_pearson(int layer) {
    std::lock_guard lock(mu_);
    for (Site s : kAllSites) {
      if (pearson_.count({layer, s})) return true;
    }
    return false;
  }

  static SitePosition pred(int layer, Site site) { return site == Site::Res ? SitePosition{layer - 1, Site::Res} : SitePosition{layer, site}; }

 private:
  bool usable(SitePosition p) const { return p.layer >= 0 && bundle_->match_compatible(p); }

  const ModelBundle* bundle_;
  PermutationOptions perm_;
  std::mutex mu_;
  // Keyed by the target residual layer and predecessor site.
  std::map<SitePosition, TransitionMap> cosine_;
  std::map<SitePosition, Permutation> perm_cache_;
  std::map<SitePosition, TransitionMap> pearson_;
};

/// Candidate predecessor features per site (RES L-1, MLP L, ATT L) before
/// any activity check.
using Candidates = std::array<std::vector<std::size_t>, 3>;

inline Candidates select_candidates(std::size_t target, int layer, Strategy strategy, PredecessorMaps& maps, Rng* rng = nullptr) {
  if (layer < 1) throw PreconditionError("deactivation: layer 0 has no previous residual");
  Candidates c;
  for (int s = 0; s < 3; ++s) {
    const Site site = kAllSites[s];
    auto& out = c[static_cast<std::size_t>(s)];
    if (strategy == Strategy::Permutation) {
      if (const auto* p = maps.permutation(layer, site)) out.push_back(p->mapping.at(target));
      continue;
    }
    const TransitionMap* m = strategy == Strategy::Pearson ? maps.pearson(layer, site) : maps.cosine(layer, site);
    if (m == nullptr || target >= m->entries.size()) continue;
    const auto& row = m->entries[target];
    if (row.empty()) continue;
    switch (strategy) {
      case Strategy::Top1:
      case Strategy::Pearson: out.push_back(row.front().target); break;
      case Strategy::Top5:
        for (std::size_t i = 0; i < std::min(kTopFive, row.size()); ++i) out.push_back(row[i].target);
        break;
      case Strategy::Random: {
        if (rng == nullptr) throw PreconditionError("random strategy needs a random source");
        const std::size_t n = std::min(kTopFive, row.size());
        out.push_back(row[uniform_index(*rng, n)].target);
        break;
      }
      case Strategy::Permutation: break;
    }
  }
  return c;
}

/// Sites whose candidates include at least one active feature.
inline OriginGroup group_of(const Candidates& c, int layer, std::size_t token, const ActivationRecord& record) {
  bool on[3] = {false, false, false};
  for (int s = 0; s < 3; ++s) {
    const auto pos = PredecessorMaps::pred(layer, kAllSites[s]);
    auto it = record.features.find(pos);
    if (it == record.features.end()) continue;
    for (auto j : c[static_cast<std::size_t>(s)]) on[s] = on[s] || it->second(token, j) > 0.0;
  }
  return group_from_sites(on[0], on[1], on[2]);
}

/// One text's baseline forward pass, annotated everywhere.
struct DeactivationContext {
  const ModelBundle* bundle = nullptr;
  const ToyTransformer* model = nullptr;
  std::vector<int> tokens;
  ActivationRecord baseline;
  double baseline_loss = 0.0;
};

inline DeactivationContext make_context(const ModelBundle& bundle, std::span<const int> tokens) {
  DeactivationContext ctx;
  ctx.bundle = &bundle;
  ctx.model = &bundle.toy_model();
  ctx.tokens.assign(tokens.begin(), tokens.end());
  ctx.baseline = forward(*ctx.model, ctx.tokens);
  annotate(ctx.baseline, bundle);
  ctx.baseline_loss = next_token_loss(ctx.baseline);
  return ctx;
}

struct DeactivatedFeature {
  FeatureRef ref;
  double activation = 0.0;
};

struct DeactivationReport {
  FeatureRef target;
  std::size_t token = 0;
  Strategy strategy = Strategy::Top1;
  double r = 0.0;
  OriginGroup group = OriginGroup::FromNowhere;
  std::vector<DeactivatedFeature> deactivated;
  double z_old = 0.0;
  double z_new = 0.0;
  std::optional<double> activation_change;
  bool applicable = false;  // had at least one active predecessor
  bool success = false;     // applicable and z_new == 0
  double loss_old = 0.0;
  double loss_new = 0.0;
  std::optional<double> relative_loss_change;
  std::optional<OriginGroup> post_hoc_group;  // nullopt once the target is off
};

namespace detail {

inline double require_active(const DeactivationContext& ctx, const FeatureRef& target, std::size_t token) {
  if (target.position.site != Site::Res) throw PreconditionError("deactivation: the target must be a residual feature");
  if (token >= ctx.tokens.size()) throw PreconditionError("deactivation: token index out of range");
  const auto& z = ctx.baseline.features.at(target.position);
  if (target.index >= z.cols()) throw PreconditionError("deactivation: target " + to_string(target) + " out of range");
  const double v = z(token, target.index);
  if (!(v > 0.0)) throw PreconditionError("deactivation: target " + to_string(target) + " is inactive at token " + std::to_string(token));
  return v;
}

/// Re-runs from the earliest intervened layer and re-encodes the target site
/// plus its predecessors.
inline ActivationRecord rerun(const DeactivationContext& ctx, int layer, std::span<const Intervention> ivs) {
  auto rec = forward(*ctx.model, ctx.tokens, ivs, &ctx.baseline);
  const std::array<SitePosition, 4> sites = {SitePosition{layer, Site::Res}, SitePosition{layer - 1, Site::Res}, SitePosition{layer, Site::Mlp},
                                             SitePosition{layer, Site::Att}};
  annotate(rec, *ctx.bundle, sites);
  return rec;
}

inline std::vector<Intervention> interventions_for(const DeactivationContext& ctx, const std::vector<DeactivatedFeature>& feats,
                                                   std::size_t token, double r) {
  std::map<SitePosition, InterventionSpec> by_site;
  for (const auto& f : feats) {
    auto& spec = by_site[f.ref.position];
    spec.position = f.ref.position;
    spec.token = token;
    spec.r = r;
    const auto e = ctx.bundle->at(f.ref.position).embedding(f.ref.index);
    spec.features.push_back({f.ref.index, VectorD(e.begin(), e.end()), f.activation});
  }
  std::vector<Intervention> ivs;
  for (const auto& [p, spec] : by_site) ivs.push_back(spec.to_intervention());
  return ivs;
}

struct Outcome {
  double z_new = 0.0;
  double loss_new = 0.0;
  ActivationRecord record;
};

inline Outcome apply(const DeactivationContext& ctx, const FeatureRef& target, std::size_t token,
                     const std::vector<DeactivatedFeature>& feats, double r) {
  const auto ivs = interventions_for(ctx, feats, token, r);
  Outcome o;
  o.record = rerun(ctx, target.position.layer, ivs);
  o.z_new = o.record.feature(target.position, token, target.index);
  o.loss_new = next_token_loss(o.record);
  return o;
}

}  // namespace detail

/// Deactivates the predecessors chosen by `strategy` at `token` only. The
/// baseline z_old is pinned to the context's unmodified run.
inline DeactivationReport run_deactivation(const DeactivationContext& ctx, const FeatureRef& target, std::size_t token, Strategy strategy,
                                           double r, PredecessorMaps& maps, Rng* rng = nullptr) {
  DeactivationReport rep;
  rep.target = target;
  rep.token = token;
  rep.strategy = strategy;
  rep.r = r;
  rep.z_old = detail::require_active(ctx, target, token);
  rep.loss_old = ctx.baseline_loss;
  const int layer = target.position.layer;
  const auto cand = select_candidates(target.index, layer, strategy, maps, rng);
  rep.group = group_of(cand, layer, token, ctx.baseline);
  for (int s = 0; s < 3; ++s) {
    const auto pos = PredecessorMaps::pred(layer, kAllSites[s]);
    auto it = ctx.baseline.features.find(pos);
    if (it == ctx.baseline.features.end()) continue;
    for (auto j : cand[static_cast<std::size_t>(s)]) {
      const double a = it->second(token, j);
      if (a > 0.0) rep.deactivated.push_back({{pos, j}, a});
    }
  }
  rep.applicable = !rep.deactivated.empty();
  if (!rep.applicable) {
    // From nowhere: nothing to deactivate, reported as is.
    rep.z_new = rep.z_old;
    rep.loss_new = rep.loss_old;
    rep.activation_change = activation_change(rep.z_old, rep.z_new);
    rep.relative_loss_change = relative_loss_change(rep.loss_old, rep.loss_new);
    rep.post_hoc_group = rep.group;
    return rep;
  }
  const auto out = detail::apply(ctx, target, token, rep.deactivated, r);
  rep.z_new = out.z_new;
  rep.loss_new = out.loss_new;
  rep.activation_change = activation_change(rep.z_old, rep.z_new);
  rep.relative_loss_change = relative_loss_change(rep.loss_old, rep.loss_new);
  rep.success = rep.z_new == 0.0;
  if (rep.z_new > 0.0) rep.post_hoc_group = group_of(cand, layer, token, out.record);
  return rep;
}

struct OracleResult {
  std::optional<FeatureRef> best;
  double best_activation_change = 0.0;
  std::size_t evaluated = 0;
};

/// Deactivates every active feature at each predecessor site one at a time
/// and keeps the largest activation change.
inline OracleResult exhaustive_oracle(const DeactivationContext& ctx, const FeatureRef& target, std::size_t token, double r = 0.0) {
  const double z_old = detail::require_active(ctx, target, token);
  const int layer = target.position.layer;
  if (layer < 1) throw PreconditionError("deactivation: layer 0 has no previous residual");
  OracleResult res;
  for (Site site : kAllSites) {
    const auto pos = PredecessorMaps::pred(layer, site);
    auto it = ctx.baseline.features.find(pos);
    if (it == ctx.baseline.features.end()) continue;
    for (std::size_t j = 0; j < it->second.cols(); ++j) {
      const double a = it->second(token, j);
      if (!(a > 0.0)) continue;
      const auto out = detail::apply(ctx, target, token, {{{pos, j}, a}}, r);
      const double ac = *activation_change(z_old, out.z_new);
      ++res.evaluated;
      if (!res.best || ac > res.best_activation_change) {
        res.best = FeatureRef{pos, j};
        res.best_activation_change = ac;
      }
    }
  }
  return res;
}

/// Success rate as defined over instances that had an active predecessor;
/// the denominator is kept for auditing.
struct DeactivationSummary {
  std::size_t instances = 0;
  std::size_t with_active_predecessor = 0;
  std::size_t successes = 0;
  double mean_activation_change = 0.0;

  double success_rate() const {
    return with_active_predecessor == 0 ? 0.0 : static_cast<double>(successes) / static_cast<double>(with_active_predecessor);
  }
};

inline DeactivationSummary summarize(std::span<const DeactivationReport> reports) {
  DeactivationSummary s;
  double ac = 0.0;
  std::size_t n_ac = 0;
  for (const auto& r : reports) {
    ++s.instances;
    if (!r.applicable) continue;
    ++s.with_active_predecessor;
    s.successes += r.success ? 1 : 0;
    if (r.activation_change) {
      ac += *r.activation_change;
      ++n_ac;
    }
  }
  s.mean_activation_change = n_ac == 0 ? 0.0 : ac / static_cast<double>(n_ac);
  return s;
}

inline nlohmann::json to_json(const DeactivationReport& r) {
  using nlohmann::json;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json feats = json::array();
  for (const auto& f : r.deactivated) feats.push_back({{"feature", to_string(f.ref)}, {"activation", f.activation}});
  return {{"target", to_string(r.target)},
          {"token", r.token},
          {"strategy", strategy_name(r.strategy)},
          {"r", r.r},
          {"group", group_name(r.group)},
          {"deactivated", feats},
          {"z_old", r.z_old},
          {"z_new", r.z_new},
          {"activation_change", opt(r.activation_change)},
          {"applicable", r.applicable},
          {"success", r.success},
          {"loss_old", r.loss_old},
          {"loss_new", r.loss_new},
          {"relative_loss_change", opt(r.relative_loss_change)},
          {"post_hoc_group", r.post_hoc_group ? json(group_name(*r.post_hoc_group)) : json("deactivated")}};
}

inline nlohmann::json to_json(const DeactivationSummary& s) {
  return {{"instances", s.instances},
          {"with_active_predecessor", s.with_active_predecessor},
          {"successes", s.successes},
          {"success_rate", s.success_rate()},
          {"mean_activation_change", s.mean_activation_change}};
}

}  // namespace featureflow
