#pragma once

// Desk-scale pre-norm decoder-only transformer with hook points at every
// residual, attention and MLP output. Weights are stored in f32 (the bundle
// format); all arithmetic runs in double so forward passes are bit-stable.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "featureflow/linalg.hpp"
#include "featureflow/site.hpp"

namespace featureflow {

struct ToyConfig {
  int layers = 4;
  int d = 32;
  int heads = 2;
  int vocab = 256;
  int d_ff = 128;
};

struct LayerWeights {
  VectorF att_norm;  // d
  MatrixF wq, wk, wv, wo;  // d x d, output rows
  VectorF mlp_norm;  // d
  MatrixF w_in;  // d_ff x d
  VectorF b_in;  // d_ff
  MatrixF w_out;  // d x d_ff
  VectorF b_out;  // d
};

struct ToyTransformer {
  ToyConfig config;
  std::uint64_t seed = 0;
  MatrixF embed;  // vocab x d
  std::vector<LayerWeights> layers;
  VectorF final_norm;  // d
  MatrixF unembed;  // vocab x d
  VectorF unembed_bias;  // vocab

  void validate() const {
    const auto d = static_cast<std::size_t>(config.d);
    const auto ff = static_cast<std::size_t>(config.d_ff);
    const auto v = static_cast<std::size_t>(config.vocab);
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ShapeError("toy model tensor '" + what + "' has the wrong shape");
    };
    if (config.d <= 0 || config.heads <= 0 || config.d % config.heads != 0) {
      throw ShapeError("toy model: d must be a positive multiple of heads");
    }
    need(embed.rows() == v && embed.cols() == d, "embed");
    need(layers.size() == static_cast<std::size_t>(config.layers), "layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& w = layers[l];
      const auto p = std::to_string(l) + "_";
      need(w.att_norm.size() == d, p + "att_norm");
      need(w.mlp_norm.size() == d, p + "mlp_norm");
      for (const auto* m : {&w.wq, &w.wk, &w.wv, &w.wo}) need(m->rows() == d && m->cols() == d, p + "attention");
      need(w.w_in.rows() == ff && w.w_in.cols() == d, p + "w_in");
      need(w.b_in.size() == ff, p + "b_in");
      need(w.w_out.rows() == d && w.w_out.cols() == ff, p + "w_out");
      need(w.b_out.size() == d, p + "b_out");
    }
    need(final_norm.size() == d, "final_norm");
    need(unembed.rows() == v && unembed.cols() == d, "unembed");
    need(unembed_bias.size() == v, "unembed_bias");
  }
};

/// All-zero weights with unit norm gains.
inline ToyTransformer make_zero_transformer(const ToyConfig& cfg) {
  ToyTransformer m;
  m.config = cfg;
  const auto d = static_cast<std::size_t>(cfg.d);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const auto v = static_cast<std::size_t>(cfg.vocab);
  m.embed = MatrixF(v, d);
  for (int l = 0; l < cfg.layers; ++l) {
    LayerWeights w;
    w.att_norm.assign(d, 1.0f);
    w.mlp_norm.assign(d, 1.0f);
    w.wq = w.wk = w.wv = w.wo = MatrixF(d, d);
    w.w_in = MatrixF(ff, d);
    w.b_in.assign(ff, 0.0f);
    w.w_out = MatrixF(d, ff);
    w.b_out.assign(d, 0.0f);
    m.layers.push_back(std::move(w));
  }
  m.final_norm.assign(d, 1.0f);
  m.unembed = MatrixF(v, d);
  m.unembed_bias.assign(v, 0.0f);
  return m;
}

inline ToyTransformer make_random_transformer(const ToyConfig& cfg, std::uint64_t seed) {
  auto m = make_zero_transformer(cfg);
  m.seed = seed;
  Rng rng(seed);
  auto fill = [&](MatrixF& w, double scale) {
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(scale * normal(rng));
  };
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  fill(m.embed, 1.0);
  for (auto& w : m.layers) {
    fill(w.wq, s);
    fill(w.wk, s);
    fill(w.wv, s);
    fill(w.wo, s);
    fill(w.w_in, s);
    fill(w.w_out, 1.0 / std::sqrt(static_cast<double>(cfg.d_ff)));
  }
  fill(m.unembed, s);
  return m;
}

/// Per-layer hook values, each tokens x d. res_post is the pre-norm
/// residual sum; res_out is the stream handed to the next layer, which only
/// differs from res_post when a RES intervention fired at this layer.
struct LayerRecord {
  MatrixD res_pre;
  MatrixD att_out;
  MatrixD mlp_out;
  MatrixD res_post;
  MatrixD res_out;
};

struct ActivationRecord {
  std::vector<int> tokens;
  std::vector<LayerRecord> layers;
  MatrixD logits;  // tokens x vocab
  /// SAE activations per dictionary position (tokens x D), filled by annotate().
  std::map<SitePosition, MatrixD> features;

  std::size_t token_count() const { return tokens.size(); }

  /// The vector a dictionary at `p` reads for `token`.
  std::span<const double> hook(SitePosition p, std::size_t token) const {
    const auto& l = layers.at(static_cast<std::size_t>(p.layer));
    switch (p.site) {
      case Site::Res: return l.res_out.row(token);
      case Site::Mlp: return l.mlp_out.row(token);
      case Site::Att: return l.att_out.row(token);
    }
    return {};
  }

  double feature(SitePosition p, std::size_t token, std::size_t index) const {
    return features.at(p)(token, index);
  }
};

/// Modifies one hook value in place. token == nullopt applies to every token.
struct Intervention {
  SitePosition position;
  std::optional<std::size_t> token;
  std::function<void(std::span<double> h, std::size_t token)> apply;
};

namespace detail {

inline constexpr double kNormEps = 1e-6;

inline void rms_norm(std::span<const double> x, const VectorF& gain, std::span<double> out) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  const double inv = 1.0 / std::sqrt(ms / static_cast<double>(x.size()) + kNormEps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * static_cast<double>(gain[i]);
}

inline void apply_hooks(std::span<const Intervention> ivs, SitePosition pos, MatrixD& values) {
  for (const auto& iv : ivs) {
    if (iv.position != pos) continue;
    if (iv.token) {
      if (*iv.token < values.rows()) iv.apply(values.row(*iv.token), *iv.token);
    } else {
      for (std::size_t t = 0; t < values.rows(); ++t) iv.apply(values.row(t), t);
    }
  }
}

inline void attention(const ToyTransformer& m, const LayerWeights& w, const MatrixD& x, MatrixD& out) {
  const std::size_t T = x.rows();
  const auto d = static_cast<std::size_t>(m.config.d);
  const auto heads = static_cast<std::size_t>(m.config.heads);
  const std::size_t hd = d / heads;
  MatrixD normed(T, d), q(T, d), k(T, d), v(T, d), mixed(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    rms_norm(x.row(t), w.att_norm, normed.row(t));
    for (std::size_t r = 0; r < d; ++r) {
      q(t, r) = dot(w.wq.row(r), std::span<const double>(normed.row(t)));
      k(t, r) = dot(w.wk.row(r), std::span<const double>(normed.row(t)));
      v(t, r) = dot(w.wv.row(r), std::span<const double>(normed.row(t)));
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> p(T);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t t = 0; t < T; ++t) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s <= t; ++s) {
        double a = 0.0;
        for (std::size_t c = 0; c < hd; ++c) a += q(t, off + c) * k(s, off + c);
        p[s] = a * scale;
        mx = std::max(mx, p[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        p[s] = std::exp(p[s] - mx);
        z += p[s];
      }
      for (std::size_t c = 0; c < hd; ++c) {
        double acc = 0.0;
        for (std::size_t s = 0; s <= t; ++s) acc += p[s] * v(s, off + c);
        mixed(t, off + c) = acc / z;
      }
    }
  }
  out = MatrixD(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t r = 0; r < d; ++r) out(t, r) = dot(w.wo.row(r), std::span<const double>(mixed.row(t)));
  }
}

inline void mlp(const ToyTransformer& m, const LayerWeights& w, const MatrixD& x, MatrixD& out) {
  const std::size_t T = x.rows();
  const auto d = static_cast<std::size_t>(m.config.d);
  const auto ff = static_cast<std::size_t>(m.config.d_ff);
  out = MatrixD(T, d);
  std::vector<double> normed(d), hidden(ff);
  for (std::size_t t = 0; t < T; ++t) {
    rms_norm(x.row(t), w.mlp_norm, normed);
    for (std::size_t j = 0; j < ff; ++j) {
      const double a = dot(w.w_in.row(j), std::span<const double>(normed)) + static_cast<double>(w.b_in[j]);
      hidden[j] = a > 0.0 ? a : 0.0;
    }
    for (std::size_t r = 0; r < d; ++r) {
      out(t, r) = dot(w.w_out.row(r), std::span<const double>(hidden)) + static_cast<double>(w.b_out[r]);
    }
  }
}

inline void layer_forward(const ToyTransformer& m, int l, std::span<const Intervention> ivs, LayerRecord& rec) {
  const auto& w = m.layers[static_cast<std::size_t>(l)];
  const std::size_t T = rec.res_pre.rows();
  const auto d = rec.res_pre.cols();
  attention(m, w, rec.res_pre, rec.att_out);
  apply_hooks(ivs, {l, Site::Att}, rec.att_out);
  MatrixD mid(T, d);
  for (std::size_t i = 0; i < mid.size(); ++i) mid.data()[i] = rec.res_pre.data()[i] + rec.att_out.data()[i];
  mlp(m, w, mid, rec.mlp_out);
  apply_hooks(ivs, {l, Site::Mlp}, rec.mlp_out);
  rec.res_post = MatrixD(T, d);
  for (std::size_t i = 0; i < mid.size(); ++i) rec.res_post.data()[i] = mid.data()[i] + rec.mlp_out.data()[i];
  rec.res_out = rec.res_post;
  apply_hooks(ivs, {l, Site::Res}, rec.res_out);
}

inline MatrixD unembed(const ToyTransformer& m, const MatrixD& final_res) {
  const auto d = static_cast<std::size_t>(m.config.d);
  const auto V = static_cast<std::size_t>(m.config.vocab);
  MatrixD logits(final_res.rows(), V);
  std::vector<double> normed(d);
  for (std::size_t t = 0; t < final_res.rows(); ++t) {
    rms_norm(final_res.row(t), m.final_norm, normed);
    for (std::size_t v = 0; v < V; ++v) {
      logits(t, v) = dot(m.unembed.row(v), std::span<const double>(normed)) + static_cast<double>(m.unembed_bias[v]);
    }
  }
  return logits;
}

}  // namespace detail

/// Full forward pass. When `cache` is a previous record over the same tokens,
/// layers strictly below the earliest intervened layer are reused from it.
inline ActivationRecord forward(const ToyTransformer& m, std::span<const int> tokens,
                                std::span<const Intervention> interventions = {},
                                const ActivationRecord* cache = nullptr) {
  if (tokens.empty()) throw PreconditionError("forward: empty token sequence");
  for (int t : tokens) {
    if (t < 0 || t >= m.config.vocab) throw PreconditionError("forward: token id " + std::to_string(t) + " out of vocabulary");
  }
  const std::size_t T = tokens.size();
  const auto d = static_cast<std::size_t>(m.config.d);
  ActivationRecord rec;
  rec.tokens.assign(tokens.begin(), tokens.end());
  rec.layers.resize(static_cast<std::size_t>(m.config.layers));

  int start = 0;
  if (cache != nullptr && cache->tokens == rec.tokens && cache->layers.size() == rec.layers.size()) {
    start = m.config.layers;
    for (const auto& iv : interventions) start = std::min(start, iv.position.layer);
    for (int l = 0; l < start; ++l) rec.layers[static_cast<std::size_t>(l)] = cache->layers[static_cast<std::size_t>(l)];
    if (start == m.config.layers) {
      rec.logits = cache->logits;
      return rec;
    }
  }

  for (int l = start; l < m.config.layers; ++l) {
    auto& lr = rec.layers[static_cast<std::size_t>(l)];
    if (l == 0) {
      lr.res_pre = MatrixD(T, d);
      for (std::size_t t = 0; t < T; ++t) {
        auto row = m.embed.row(static_cast<std::size_t>(tokens[t]));
        std::copy(row.begin(), row.end(), lr.res_pre.row(t).begin());
      }
    } else {
      lr.res_pre = rec.layers[static_cast<std::size_t>(l - 1)].res_out;
    }
    detail::layer_forward(m, l, interventions, lr);
  }
  rec.logits = detail::unembed(m, rec.layers.back().res_out);
  return rec;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

/// Mean next-token cross-entropy over the recorded sequence.
inline double next_token_loss(const ActivationRecord& rec) {
  if (rec.tokens.size() < 2) throw PreconditionError("loss needs at least two tokens");
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < rec.tokens.size(); ++t) {
    auto row = rec.logits.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += -(row[static_cast<std::size_t>(rec.tokens[t + 1])] - mx - std::log(z));
  }
  return total / static_cast<double>(rec.tokens.size() - 1);
}

struct SamplerConfig {
  double top_p = 0.7;
  double temperature = 1.27;
  std::size_t max_len = 36;
  bool greedy = false;
  std::uint64_t seed = 0;
};

/// Nucleus sampling; greedy (or temperature <= 0) picks the lowest-index argmax.
inline int sample_token(std::span<const double> logits, const SamplerConfig& cfg, Rng& rng) {
  if (cfg.greedy || cfg.temperature <= 0.0) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<double> scaled(logits.begin(), logits.end());
  for (auto& v : scaled) v /= cfg.temperature;
  const auto p = softmax(scaled);
  std::vector<int> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)]; });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += p[static_cast<std::size_t>(order[keep++])];
    if (mass >= cfg.top_p) break;
  }
  double u = uniform01(rng) * mass;
  for (std::size_t i = 0; i < keep; ++i) {
    u -= p[static_cast<std::size_t>(order[i])];
    if (u < 0.0) return order[i];
  }
  return order[keep - 1];
}

/// Autoregressive continuation of `prompt`; interventions apply at every step.
inline std::vector<int> generate(const ToyTransformer& m, std::span<const int> prompt, const SamplerConfig& cfg,
                                 std::span<const Intervention> interventions = {}) {
  if (cfg.max_len == 0) throw PreconditionError("generate: max_len must be positive");
  if (prompt.empty()) throw PreconditionError("generate: empty prompt");
  Rng rng(cfg.seed);
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  for (std::size_t step = 0; step < cfg.max_len; ++step) {
    const auto rec = forward(m, seq, interventions);
    const int next = sample_token(rec.logits.row(seq.size() - 1), cfg, rng);
    seq.push_back(next);
    out.push_back(next);
  }
  return out;
}

inline std::vector<int> encode_bytes(std::string_view text) {
  std::vector<int> t;
  t.reserve(text.size());
  for (unsigned char c : text) t.push_back(static_cast<int>(c));
  return t;
}

inline std::string decode_bytes(std::span<const int> tokens) {
  std::string s;
  s.reserve(tokens.size());
  for (int t : tokens) s.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  return s;
}

}  // namespace featureflow
