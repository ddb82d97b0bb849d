#pragma once

// Two SAEs plus a transition between them read as a cross-layer transcoder:
// encode at layer t, route activations through the transition, decode at t+1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "featureflow/detail/blocked_kernel.hpp"
#include "featureflow/matching.hpp"
#include "featureflow/sae.hpp"
#include "featureflow/tensors.hpp"

namespace featureflow {

/// 1 - sum ||y - y_hat||^2 / sum ||y - mean(y)||^2 over all samples (rows).
inline double explained_variance(const MatrixD& h_true, const MatrixD& h_pred) {
  if (h_true.rows() != h_pred.rows() || h_true.cols() != h_pred.cols()) {
    throw PreconditionError("explained_variance: shapes differ (" + std::to_string(h_true.rows()) + "x" + std::to_string(h_true.cols()) +
                            " vs " + std::to_string(h_pred.rows()) + "x" + std::to_string(h_pred.cols()) + ")");
  }
  if (h_true.rows() == 0) throw PreconditionError("explained_variance: no samples");
  const std::size_t n = h_true.rows(), d = h_true.cols();
  VectorD mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += h_true(r, c);
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  double res = 0.0, tot = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      const double e = h_true(r, c) - h_pred(r, c);
      const double v = h_true(r, c) - mean[c];
      res += e * e;
      tot += v * v;
    }
  }
  if (!(tot > 0.0)) throw PreconditionError("explained_variance: targets have zero variance");
  return 1.0 - res / tot;
}

// ---------------------------------------------------------------------------
// Attribution: W_dec^(A)T W_enc^(B)T, entry (i, j) = dec_A[:, i] . enc_B[j, :]

inline void require_attribution_dims(const FeatureDictionary& a, const FeatureDictionary& b) {
  if (a.model_dim() != b.model_dim()) {
    throw IncompatibleError("attribution_map: " + to_string(a.position()) + " (d=" + std::to_string(a.model_dim()) + ") and " +
                            to_string(b.position()) + " (d=" + std::to_string(b.model_dim()) + ") differ in width");
  }
}

/// Full D_A x D_B map, computed tile by tile.
inline MatrixD attribution_map(const FeatureDictionary& a, const FeatureDictionary& b, detail::TileShape tiles = {}) {
  require_attribution_dims(a, b);
  const auto dec = cast<double>(transpose(a.decoder()));  // D_A x d
  const auto enc = cast<double>(b.encoder());             // D_B x d
  MatrixD out(a.size(), b.size());
  detail::for_each_tile(dec, enc, tiles, [&](std::size_t i0, std::size_t j0, std::size_t mi, std::size_t nj, const double* tile, std::size_t ld) {
    for (std::size_t r = 0; r < mi; ++r) {
      for (std::size_t c = 0; c < nj; ++c) out(i0 + r, j0 + c) = tile[r * ld + c];
    }
  });
  return out;
}

/// Row i only: which B features does A feature i write into.
inline VectorD attribution_row(const FeatureDictionary& a, const FeatureDictionary& b, std::size_t i) {
  require_attribution_dims(a, b);
  if (i >= a.size()) throw PreconditionError("attribution_row: feature " + std::to_string(i) + " out of range");
  const auto col = a.decoder_column(i);
  return matvec(b.encoder(), col);
}

/// Top-k positive entries of each attribution row, streamed without the full map.
inline TransitionMap attribution_top_k(const FeatureDictionary& a, const FeatureDictionary& b, std::size_t k, detail::TileShape tiles = {}) {
  if (k < 1) throw PreconditionError("attribution_top_k: k must be >= 1");
  require_attribution_dims(a, b);
  const auto dec = cast<double>(transpose(a.decoder()));
  const auto enc = cast<double>(b.encoder());
  TransitionMap t;
  t.source = a.position();
  t.target = b.position();
  t.k = k;
  t.target_size = b.size();
  t.entries = detail::streaming_top_k(dec, std::vector<unsigned char>(a.size(), 1), enc, std::vector<unsigned char>(b.size(), 1), k, tiles);
  for (auto& row : t.entries) detail::drop_non_positive(row);
  return t;
}

// ---------------------------------------------------------------------------
// Bridge

struct BridgeTranscoder {
  const FeatureDictionary* source = nullptr;
  const FeatureDictionary* target = nullptr;
  std::variant<TransitionMap, Permutation> transition;
  /// Route in folded units: divide by the source mean activation, multiply by the target's.
  bool fold_source = false;
  bool fold_target = false;

  void validate() const {
    if (source == nullptr || target == nullptr) throw PreconditionError("bridge: missing dictionary");
    if (const auto* t = std::get_if<TransitionMap>(&transition)) {
      if (t->entries.size() != source->size() || t->target_size != target->size()) {
        throw PreconditionError("bridge: transition is " + std::to_string(t->entries.size()) + "->" + std::to_string(t->target_size) +
                                " but the dictionaries are " + std::to_string(source->size()) + "->" + std::to_string(target->size()));
      }
    } else {
      const auto& p = std::get<Permutation>(transition);
      if (p.mapping.size() != source->size() || source->size() != target->size()) throw PreconditionError("bridge: permutation size mismatch");
    }
    if (fold_source && !source->mean_activations()) throw PreconditionError("bridge: source folding needs mean activations");
    if (fold_target && !target->mean_activations()) throw PreconditionError("bridge: target folding needs mean activations");
  }
};

/// Source activations mapped into target feature space. For k > 1 each
/// source activation is split across its targets by normalized positive score.
inline VectorD bridge_route(const BridgeTranscoder& b, std::span<const double> z) {
  VectorD out(b.target->size(), 0.0);
  auto src_scale = [&](std::size_t i) {
    if (!b.fold_source) return 1.0;
    const double m = (*b.source->mean_activations())[i];
    return m > 0.0 ? 1.0 / m : 0.0;
  };
  auto tgt_scale = [&](std::size_t j) { return b.fold_target ? static_cast<double>((*b.target->mean_activations())[j]) : 1.0; };
  if (const auto* t = std::get_if<TransitionMap>(&b.transition)) {
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (z[i] == 0.0) continue;
      const auto& row = t->entries[i];
      double total = 0.0;
      for (const auto& e : row) total += e.score;
      if (!(total > 0.0)) continue;
      const double zi = z[i] * src_scale(i);
      for (const auto& e : row) out[e.target] += zi * (e.score / total) * tgt_scale(e.target);
    }
  } else {
    const auto& p = std::get<Permutation>(b.transition);
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (z[i] != 0.0) out[p.mapping[i]] += z[i] * src_scale(i) * tgt_scale(p.mapping[i]);
    }
  }
  return out;
}

inline VectorD bridge_predict(const BridgeTranscoder& b, std::span<const double> h) {
  b.validate();
  if (h.size() != b.source->model_dim()) {
    throw PreconditionError("bridge_predict: input has length " + std::to_string(h.size()) + ", source expects " +
                            std::to_string(b.source->model_dim()));
  }
  const auto z = sae_encode(*b.source, h);
  const auto routed = bridge_route(b, z);
  return sae_decode(*b.target, routed);
}

inline MatrixD bridge_predict_batch(const BridgeTranscoder& b, const MatrixD& h) {
  b.validate();
  if (h.cols() != b.source->model_dim()) throw PreconditionError("bridge_predict: sample width mismatch");
  MatrixD out(h.rows(), b.target->model_dim());
  const auto z = sae_encode_batch(*b.source, h);
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < h.rows(); ++r) {
    const auto y = sae_decode(*b.target, bridge_route(b, z.row(r)));
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  return out;
}

/// Plain encode-decode of one dictionary over a batch.
inline MatrixD reconstruct_batch(const FeatureDictionary& dict, const MatrixD& h) {
  const auto z = sae_encode_batch(dict, h);
  MatrixD out(h.rows(), dict.model_dim());
  for (std::size_t r = 0; r < h.rows(); ++r) {
    const auto y = sae_decode(dict, z.row(r));
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Variant comparison

struct TransitionVariant {
  std::string name;
  std::string family;  // "cosine", "permutation", "attribution"
  std::size_t k = 1;
  bool folded = false;
  std::optional<double> ev;
  std::string note;  // why ev is absent
};

struct TransitionReport {
  std::size_t samples = 0;
  double target_sae_ev = 0.0;  // ceiling: the target SAE reconstructing its own input
  std::vector<TransitionVariant> variants;  // ranked by EV, unavailable variants last
  std::string routing = "k>1: activation split across targets by normalized positive score";
  std::string reference = "full-scale reference ordering: cosine top-1 ranked first; orderings here are desk-scale";
  std::string config_hash;
};

struct CompareOptions {
  std::vector<std::size_t> ks{1, 2, 5};
  bool permutation = true;
  bool folded = true;
  bool attribution = true;
  PermutationOptions perm{};
};

/// Explained variance of every transition variant predicting `h_target` from
/// `h_source` (paired rows).
inline TransitionReport compare_transitions(const FeatureDictionary& a, const FeatureDictionary& b, const MatrixD& h_source,
                                            const MatrixD& h_target, const CompareOptions& opts = {}) {
  if (h_source.rows() != h_target.rows()) throw PreconditionError("compare_transitions: sample counts differ");
  TransitionReport rep;
  rep.samples = h_source.rows();
  rep.target_sae_ev = explained_variance(h_target, reconstruct_batch(b, h_target));
  const bool can_fold = opts.folded && a.mean_activations() && b.mean_activations();

  auto run = [&](TransitionVariant v, std::variant<TransitionMap, Permutation> t) {
    BridgeTranscoder br{&a, &b, std::move(t), v.folded, v.folded};
    v.ev = explained_variance(h_target, bridge_predict_batch(br, h_source));
    rep.variants.push_back(std::move(v));
  };
  for (std::size_t k : opts.ks) {
    const auto map = match_top_k(a, b, k);
    run({"cosine_top" + std::to_string(k), "cosine", k, false, {}, {}}, map);
    if (can_fold) run({"cosine_top" + std::to_string(k) + "_folded", "cosine", k, true, {}, {}}, map);
  }
  if (opts.permutation) {
    try {
      const auto p = permutation_match(a, b, opts.perm);
      run({"permutation", "permutation", 1, false, {}, {}}, p);
      if (can_fold) run({"permutation_folded", "permutation", 1, true, {}, {}}, p);
    } catch (const PreconditionError& e) {
      rep.variants.push_back({"permutation", "permutation", 1, false, std::nullopt, e.what()});
    }
  }
  if (opts.attribution) {
    for (std::size_t k : opts.ks) run({"attribution_top" + std::to_string(k), "attribution", k, false, {}, {}}, attribution_top_k(a, b, k));
  }
  if (opts.folded && !can_fold) rep.variants.push_back({"folded", "cosine", 1, true, std::nullopt, "no mean activations on one side"});
  rep.variants.push_back({"permutation_b_enc", "permutation", 1, false, std::nullopt, "construction not specified; unavailable"});

  std::stable_sort(rep.variants.begin(), rep.variants.end(), [](const TransitionVariant& x, const TransitionVariant& y) {
    if (x.ev.has_value() != y.ev.has_value()) return x.ev.has_value();
    return x.ev && *x.ev > *y.ev;
  });

  // FNV-1a over the inputs that determine the report.
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ c[i]) * 1099511628211ull;
  };
  mix(a.decoder().data(), a.decoder().size() * sizeof(float));
  mix(b.decoder().data(), b.decoder().size() * sizeof(float));
  mix(h_source.data(), h_source.size() * sizeof(double));
  mix(h_target.data(), h_target.size() * sizeof(double));
  for (auto k : opts.ks) mix(&k, sizeof k);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  rep.config_hash = buf;
  return rep;
}

inline nlohmann::json to_json(const TransitionReport& r) {
  using nlohmann::json;
  json vs = json::array();
  for (const auto& v : r.variants) {
    json e = {{"variant", v.name}, {"family", v.family}, {"k", v.k}, {"folded", v.folded}, {"ev", v.ev ? json(*v.ev) : json(nullptr)}};
    if (!v.note.empty()) e["note"] = v.note;
    vs.push_back(e);
  }
  return {{"samples", r.samples}, {"target_sae_ev", r.target_sae_ev}, {"variants", vs},
          {"routing", r.routing}, {"reference", r.reference},     {"config_hash", r.config_hash}};
}

}  // namespace featureflow
