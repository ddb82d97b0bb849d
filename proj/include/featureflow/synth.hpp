#pragma once

// Planted-circuit bundles: a toy transformer whose residual stream carries
// known orthonormal directions, plus JumpReLU dictionaries that read them.
// Every mechanism is wired into real weights, so interventions on the model
// have a ground-truth answer.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "featureflow/linalg.hpp"
#include "featureflow/sae.hpp"
#include "featureflow/tensors.hpp"
#include "featureflow/transformer.hpp"

namespace featureflow {

enum class Mechanism { Translated, MlpWritten, AttWritten, CoWritten };

inline std::string mechanism_name(Mechanism m) {
  switch (m) {
    case Mechanism::Translated: return "translated";
    case Mechanism::MlpWritten: return "mlp_written";
    case Mechanism::AttWritten: return "att_written";
    case Mechanism::CoWritten: return "co_written";
  }
  return "?";
}

/// New directions written at one layer.
struct LayerMechanisms {
  int mlp_written = 2;
  int att_written = 2;
  int co_written = 1;  // written by both MLP and attention
};

struct PlantedConfig {
  int layers = 4;
  int d = 64;
  int vocab = 256;
  int heads = 2;
  int token_features = 16;
  /// Probability that a token carries a second token feature.
  double second_feature_rate = 0.5;
  LayerMechanisms mechanisms{};
  /// Per-layer override; when non-empty its size must equal layers.
  std::vector<LayerMechanisms> per_layer;
  std::size_t dict_size = 256;
  /// Near-duplicate RES features per live RES feature (cosine decoy_cosine).
  int decoys = 0;
  double decoy_cosine = 0.8;
  /// Std-dev of the Gaussian perturbation added to live decoder columns.
  double noise = 0.0;
  double threshold = 0.15;
  bool theme = true;
  std::uint64_t seed = 1;
  /// Sequences used to calibrate mean activations (folding statistic).
  std::size_t calibration_sequences = 32;
};

struct PlantedFeature {
  SitePosition position;
  std::size_t index = 0;
  Mechanism mechanism = Mechanism::Translated;
  std::size_t direction = 0;
  /// Ground-truth predecessors (dictionary indices), where the mechanism has them.
  std::optional<std::size_t> res_parent;
  std::optional<std::size_t> mlp_parent;
  std::optional<std::size_t> att_parent;
};

struct PlantedDecoy {
  SitePosition position;
  std::size_t index = 0;
  std::size_t of = 0;  // index of the live feature it imitates, same dictionary
};

struct WrittenDirection {
  int layer = -1;  // -1: carried by token embeddings
  bool by_mlp = false;
  bool by_att = false;
  std::size_t mlp_trigger = 0;
  std::size_t att_trigger = 0;
};

struct PlantedTruth {
  MatrixD directions;  // n x d, orthonormal
  std::vector<WrittenDirection> written;
  /// (direction, coefficient) pairs making up each token embedding.
  std::vector<std::vector<std::pair<std::size_t, double>>> token_directions;
  std::map<std::pair<SitePosition, std::size_t>, std::size_t> index_of;  // (site, direction) -> feature
  std::vector<PlantedFeature> features;
  std::vector<PlantedDecoy> decoys;
  std::optional<std::size_t> theme_direction;
  std::vector<int> theme_tokens;

  std::optional<std::size_t> feature_index(SitePosition p, std::size_t direction) const {
    auto it = index_of.find({p, direction});
    if (it == index_of.end()) return std::nullopt;
    return it->second;
  }

  /// Lowest token id whose embedding carries `direction`, if any.
  std::optional<int> token_with(std::size_t direction) const {
    for (std::size_t t = 0; t < token_directions.size(); ++t) {
      for (const auto& [dir, c] : token_directions[t]) {
        if (dir == direction) return static_cast<int>(t);
      }
    }
    return std::nullopt;
  }
};

struct PlantedBundle {
  ModelBundle bundle;
  PlantedTruth truth;
};

namespace detail {

inline constexpr double kMlpGain = 0.3;
inline constexpr double kMlpBias = 0.5;
inline constexpr double kAttGain = 0.5;
inline constexpr double kThemeUnembed = 1.0;
inline constexpr float kDeadThreshold = 1e6f;

inline bool is_theme_token(int t) { return t >= '0' && t <= '9'; }

inline float unembed_bias_for(int t) {
  if (t == ' ' || (t >= 'a' && t <= 'z')) return 0.5f;
  if (is_theme_token(t)) return -1.0f;
  if (t >= 32 && t < 127) return 0.0f;
  return -4.0f;
}

/// One dictionary column to be placed: direction vector plus gate.
struct Column {
  VectorD direction;  // clean unit direction (encoder row)
  float threshold = 0.0f;
  bool noisy = true;
  int role = 0;  // 0 live, 1 decoy, 2 distractor
  std::size_t direction_id = 0;
  std::size_t decoy_of = 0;  // position in the live list
};

}  // namespace detail

inline PlantedBundle synth_planted_bundle(const PlantedConfig& cfg) {
  if (cfg.noise < 0.0) throw PreconditionError("synth: noise must be non-negative");
  if (cfg.layers < 1 || cfg.d < 2 || cfg.vocab < 1 || cfg.token_features < 1) {
    throw PreconditionError("synth: layers, d, vocab and token_features must be positive");
  }
  if (!cfg.per_layer.empty() && cfg.per_layer.size() != static_cast<std::size_t>(cfg.layers)) {
    throw PreconditionError("synth: per_layer must list every layer");
  }
  if (cfg.theme && cfg.vocab <= '9') throw PreconditionError("synth: theme tokens need a byte-level vocabulary");
  auto mech = [&](int l) { return cfg.per_layer.empty() ? cfg.mechanisms : cfg.per_layer[static_cast<std::size_t>(l)]; };

  const auto d = static_cast<std::size_t>(cfg.d);
  std::size_t count = static_cast<std::size_t>(cfg.token_features) + (cfg.theme ? 1 : 0);
  int max_mlp = 0, max_att = 0;
  for (int l = 0; l < cfg.layers; ++l) {
    const auto m = mech(l);
    if (m.mlp_written < 0 || m.att_written < 0 || m.co_written < 0) throw PreconditionError("synth: negative mechanism count");
    count += static_cast<std::size_t>(m.mlp_written + m.att_written + m.co_written);
    max_mlp = std::max(max_mlp, m.mlp_written + m.co_written);
    max_att = std::max(max_att, m.att_written + m.co_written);
  }
  if (count > d) {
    throw PreconditionError("synth: mechanism unrealizable, " + std::to_string(count) + " orthogonal directions do not fit in d=" +
                            std::to_string(d));
  }
  if (cfg.decoys > 0 && count == d) throw PreconditionError("synth: decoys need at least one spare dimension");
  if (max_att > cfg.d) throw PreconditionError("synth: more attention mechanisms than value channels");

  Rng rng(cfg.seed);
  PlantedBundle out;
  auto& truth = out.truth;
  // Orthonormal basis: planted directions first, the complement feeds decoys.
  const auto basis = random_orthonormal(d, d, rng);
  truth.directions = MatrixD(count, d);
  for (std::size_t i = 0; i < count; ++i) std::copy(basis.row(i).begin(), basis.row(i).end(), truth.directions.row(i).begin());
  truth.written.assign(count, {});

  const std::size_t tf = static_cast<std::size_t>(cfg.token_features);
  if (cfg.theme) truth.theme_direction = tf;
  std::size_t next_dir = tf + (cfg.theme ? 1 : 0);

  // Token embeddings.
  ToyConfig tc{cfg.layers, cfg.d, cfg.heads, cfg.vocab, std::max({max_mlp, 1})};
  if (cfg.d % cfg.heads != 0) throw PreconditionError("synth: d must be a multiple of heads");
  auto model = make_zero_transformer(tc);
  model.seed = cfg.seed;
  truth.token_directions.resize(static_cast<std::size_t>(cfg.vocab));
  for (int t = 0; t < cfg.vocab; ++t) {
    auto& dirs = truth.token_directions[static_cast<std::size_t>(t)];
    const std::size_t primary = static_cast<std::size_t>(t) % tf;
    dirs.emplace_back(primary, 0.6 + 0.8 * uniform01(rng));
    if (tf > 1 && uniform01(rng) < cfg.second_feature_rate) {
      std::size_t second = uniform_index(rng, tf - 1);
      if (second >= primary) ++second;
      dirs.emplace_back(second, 0.6 + 0.8 * uniform01(rng));
    }
    if (cfg.theme && detail::is_theme_token(t)) {
      dirs.emplace_back(*truth.theme_direction, 0.6 + 0.8 * uniform01(rng));
      truth.theme_tokens.push_back(t);
    }
    for (const auto& [dir, c] : dirs) {
      for (std::size_t i = 0; i < d; ++i) {
        model.embed(static_cast<std::size_t>(t), i) += static_cast<float>(c * truth.directions(dir, i));
      }
    }
  }

  // Per-layer module wiring. Triggers are token features.
  std::vector<std::vector<std::size_t>> mlp_dirs(static_cast<std::size_t>(cfg.layers));
  std::vector<std::vector<std::size_t>> att_dirs(static_cast<std::size_t>(cfg.layers));
  for (int l = 0; l < cfg.layers; ++l) {
    const auto m = mech(l);
    auto& w = model.layers[static_cast<std::size_t>(l)];
    std::size_t neuron = 0, channel = 0;
    auto wire_mlp = [&](std::size_t dir, std::size_t trigger) {
      for (std::size_t i = 0; i < d; ++i) {
        w.w_in(neuron, i) = static_cast<float>(truth.directions(trigger, i));
        w.w_out(i, neuron) = static_cast<float>(detail::kMlpGain * truth.directions(dir, i));
      }
      w.b_in[neuron] = static_cast<float>(-detail::kMlpBias);
      ++neuron;
      truth.written[dir].by_mlp = true;
      truth.written[dir].mlp_trigger = trigger;
      mlp_dirs[static_cast<std::size_t>(l)].push_back(dir);
    };
    auto wire_att = [&](std::size_t dir, std::size_t trigger) {
      for (std::size_t i = 0; i < d; ++i) {
        w.wv(channel, i) = static_cast<float>(truth.directions(trigger, i));
        w.wo(i, channel) = static_cast<float>(detail::kAttGain * truth.directions(dir, i));
      }
      ++channel;
      truth.written[dir].by_att = true;
      truth.written[dir].att_trigger = trigger;
      att_dirs[static_cast<std::size_t>(l)].push_back(dir);
    };
    auto fresh = [&]() {
      truth.written[next_dir].layer = l;
      return next_dir++;
    };
    for (int i = 0; i < m.mlp_written; ++i) wire_mlp(fresh(), uniform_index(rng, tf));
    for (int i = 0; i < m.att_written; ++i) wire_att(fresh(), uniform_index(rng, tf));
    for (int i = 0; i < m.co_written; ++i) {
      const auto dir = fresh();
      wire_mlp(dir, uniform_index(rng, tf));
      wire_att(dir, uniform_index(rng, tf));
    }
  }

  // Unembedding: small random rows, theme tokens also read the theme direction.
  for (int t = 0; t < cfg.vocab; ++t) {
    for (std::size_t i = 0; i < d; ++i) model.unembed(static_cast<std::size_t>(t), i) = static_cast<float>(0.05 * normal(rng));
    if (cfg.theme && detail::is_theme_token(t)) {
      for (std::size_t i = 0; i < d; ++i) {
        model.unembed(static_cast<std::size_t>(t), i) += static_cast<float>(detail::kThemeUnembed * truth.directions(*truth.theme_direction, i));
      }
    }
    model.unembed_bias[static_cast<std::size_t>(t)] = detail::unembed_bias_for(t);
  }

  // Dictionaries.
  auto& bundle = out.bundle;
  bundle.model_dim = d;
  bundle.layer_count = cfg.layers;
  bundle.name = "planted";
  bundle.seed = cfg.seed;
  bundle.provenance = "synth_planted_bundle";
  const std::size_t D = cfg.dict_size;
  const std::size_t spare = d - count;
  // Decoy noise directions live in the complement so decoys only see their original.
  std::map<std::pair<std::size_t, int>, VectorD> decoy_dirs;
  auto decoy_direction = [&](std::size_t dir, int j) -> const VectorD& {
    auto key = std::make_pair(dir, j);
    auto it = decoy_dirs.find(key);
    if (it != decoy_dirs.end()) return it->second;
    VectorD n(d, 0.0);
    for (std::size_t c = 0; c < spare; ++c) {
      const double g = normal(rng);
      for (std::size_t i = 0; i < d; ++i) n[i] += g * basis(count + c, i);
    }
    const double nn = norm2(n);
    const double s = std::sqrt(1.0 - cfg.decoy_cosine * cfg.decoy_cosine);
    VectorD v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = cfg.decoy_cosine * truth.directions(dir, i) + s * n[i] / nn;
    return decoy_dirs.emplace(key, std::move(v)).first->second;
  };

  auto build = [&](SitePosition pos, const std::vector<std::size_t>& live, int decoys) {
    std::vector<detail::Column> cols;
    for (std::size_t k = 0; k < live.size(); ++k) {
      VectorD v(truth.directions.row(live[k]).begin(), truth.directions.row(live[k]).end());
      cols.push_back({std::move(v), static_cast<float>(cfg.threshold), true, 0, live[k], 0});
    }
    for (std::size_t k = 0; k < live.size(); ++k) {
      for (int j = 0; j < decoys; ++j) {
        // Thresholds spread over the decoy's activation range so decoys fire on a subset of tokens.
        const float th = static_cast<float>(cfg.decoy_cosine * (0.5 + 0.9 * uniform01(rng)));
        cols.push_back({decoy_direction(live[k], j), th, true, 1, live[k], k});
      }
    }
    if (cols.size() > D) {
      throw PreconditionError("synth: dict_size " + std::to_string(D) + " too small for " + std::to_string(cols.size()) + " live and decoy features at " +
                              to_string(pos));
    }
    while (cols.size() < D) cols.push_back({random_unit(d, rng), detail::kDeadThreshold, false, 2, 0, 0});
    std::vector<std::size_t> slot(D);
    std::iota(slot.begin(), slot.end(), 0);
    shuffle(slot, rng);
    MatrixF dec(d, D), enc(D, d);
    VectorF th(D);
    for (std::size_t k = 0; k < D; ++k) {
      const auto& c = cols[k];
      const std::size_t s = slot[k];
      for (std::size_t i = 0; i < d; ++i) {
        const double noise = c.noisy && cfg.noise > 0.0 ? cfg.noise * normal(rng) : 0.0;
        dec(i, s) = static_cast<float>(c.direction[i] + noise);
        enc(s, i) = static_cast<float>(c.direction[i]);
      }
      th[s] = c.threshold;
      if (c.role == 0) truth.index_of[{pos, c.direction_id}] = s;
      if (c.role == 1) truth.decoys.push_back({pos, s, slot[c.decoy_of]});
    }
    bundle.dictionaries.emplace(pos, FeatureDictionary(pos, {ActivationKind::JumpReLU, 0}, std::move(dec), std::move(enc),
                                                       VectorF(D, 0.0f), VectorF(d, 0.0f), std::move(th)));
  };

  std::vector<std::size_t> present;
  for (std::size_t i = 0; i < tf; ++i) present.push_back(i);
  if (cfg.theme) present.push_back(*truth.theme_direction);
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& ml = mlp_dirs[static_cast<std::size_t>(l)];
    const auto& al = att_dirs[static_cast<std::size_t>(l)];
    std::vector<std::size_t> res = present;
    for (auto dir : ml) res.push_back(dir);
    for (auto dir : al) {
      if (std::find(res.begin(), res.end(), dir) == res.end()) res.push_back(dir);
    }
    build({l, Site::Res}, res, cfg.decoys);
    build({l, Site::Mlp}, ml, 0);
    build({l, Site::Att}, al, 0);

    for (auto dir : res) {
      PlantedFeature f;
      f.position = {l, Site::Res};
      f.index = truth.index_of.at({f.position, dir});
      f.direction = dir;
      const auto& wd = truth.written[dir];
      const bool fresh = wd.layer == l;
      if (!fresh && l == 0) continue;  // embedded at layer 0: no predecessor to speak of
      if (!fresh) {
        f.mechanism = Mechanism::Translated;
        f.res_parent = truth.index_of.at({{l - 1, Site::Res}, dir});
      } else {
        f.mechanism = wd.by_mlp && wd.by_att ? Mechanism::CoWritten : (wd.by_mlp ? Mechanism::MlpWritten : Mechanism::AttWritten);
        if (wd.by_mlp) f.mlp_parent = truth.index_of.at({{l, Site::Mlp}, dir});
        if (wd.by_att) f.att_parent = truth.index_of.at({{l, Site::Att}, dir});
      }
      truth.features.push_back(f);
    }
    for (auto dir : res) {
      if (std::find(present.begin(), present.end(), dir) == present.end()) present.push_back(dir);
    }
  }
  model.validate();
  bundle.model = std::move(model);

  // Verification: each fresh mechanism must fire on a probe carrying its trigger,
  // and each translated feature must be active on both sides of the layer boundary.
  const auto& m = *bundle.model;
  for (const auto& f : truth.features) {
    const auto& wd = truth.written[f.direction];
    std::size_t probe_dir = f.direction;
    if (f.mechanism == Mechanism::MlpWritten || f.mechanism == Mechanism::CoWritten) probe_dir = wd.mlp_trigger;
    if (f.mechanism == Mechanism::AttWritten) probe_dir = wd.att_trigger;
    std::optional<int> tok;
    if (wd.layer >= 0 && f.mechanism == Mechanism::Translated) {
      tok = truth.token_with(wd.by_mlp ? wd.mlp_trigger : wd.att_trigger);
    } else {
      tok = truth.token_with(probe_dir);
    }
    if (!tok) throw Error("synth: no token carries the trigger for " + to_string(FeatureRef{f.position, f.index}));
    std::vector<int> probe{*tok};
    std::vector<int> tokens = probe;
    auto rec = forward(m, tokens);
    annotate(rec, bundle);
    auto active = [&](SitePosition p, std::optional<std::size_t> idx) { return idx && rec.feature(p, 0, *idx) > 0.0; };
    bool ok = rec.feature(f.position, 0, f.index) > 0.0;
    const int l = f.position.layer;
    switch (f.mechanism) {
      case Mechanism::Translated: ok = ok && active({l - 1, Site::Res}, f.res_parent); break;
      case Mechanism::MlpWritten: ok = ok && active({l, Site::Mlp}, f.mlp_parent); break;
      case Mechanism::AttWritten: ok = ok && active({l, Site::Att}, f.att_parent); break;
      case Mechanism::CoWritten: ok = ok && active({l, Site::Mlp}, f.mlp_parent); break;
    }
    if (f.mechanism == Mechanism::CoWritten) {
      const auto att_tok = truth.token_with(wd.att_trigger);
      std::vector<int> t2{*att_tok};
      auto r2 = forward(m, t2);
      annotate(r2, bundle);
      ok = ok && r2.feature(f.position, 0, f.index) > 0.0 && r2.feature({l, Site::Att}, 0, *f.att_parent) > 0.0;
    }
    if (!ok) {
      throw Error("synth: planted " + mechanism_name(f.mechanism) + " feature " + to_string(FeatureRef{f.position, f.index}) +
                  " is not realized by the generated weights");
    }
  }

  // Mean nonzero activations from random calibration sequences.
  if (cfg.calibration_sequences > 0) {
    std::map<SitePosition, std::pair<VectorD, VectorD>> acc;
    for (const auto& [p, dict] : bundle.dictionaries) acc[p] = {VectorD(dict.size(), 0.0), VectorD(dict.size(), 0.0)};
    for (std::size_t s = 0; s < cfg.calibration_sequences; ++s) {
      std::vector<int> seq(12);
      for (auto& t : seq) t = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg.vocab)));
      auto rec = forward(m, seq);
      annotate(rec, bundle);
      for (auto& [p, sums] : acc) {
        const auto& z = rec.features.at(p);
        for (std::size_t r = 0; r < z.rows(); ++r) {
          for (std::size_t c = 0; c < z.cols(); ++c) {
            if (z(r, c) > 0.0) {
              sums.first[c] += z(r, c);
              sums.second[c] += 1.0;
            }
          }
        }
      }
    }
    for (auto& [p, sums] : acc) {
      VectorF mean(sums.first.size());
      for (std::size_t c = 0; c < mean.size(); ++c) {
        mean[c] = sums.second[c] > 0.0 ? static_cast<float>(sums.first[c] / sums.second[c]) : 0.0f;
      }
      bundle.dictionaries.at(p).set_mean_activations(std::move(mean));
    }
  }
  bundle.validate();
  return out;
}

/// Random byte-level texts drawn from the planted vocabulary (printable range).
inline std::vector<std::string> synth_corpus(std::size_t texts, std::size_t length, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < texts; ++i) {
    std::string s;
    for (std::size_t j = 0; j < length; ++j) s.push_back(static_cast<char>(32 + uniform_index(rng, 95)));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace featureflow
