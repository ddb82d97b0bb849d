#pragma once

// SAE / transcoder inference and TopK training with hand-written gradients.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "featureflow/linalg.hpp"
#include "featureflow/tensors.hpp"
#include "featureflow/transformer.hpp"

namespace featureflow {

namespace detail {

/// Keeps the k largest entries (lowest index wins ties) and zeroes everything else,
/// then zeroes whatever kept entry is not strictly positive.
inline void top_k_inplace(std::span<double> v, std::size_t k) {
  if (k >= v.size()) {
    for (auto& x : v) x = x > 0.0 ? x : 0.0;
    return;
  }
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return v[a] > v[b] || (v[a] == v[b] && a < b);
  });
  std::vector<unsigned char> keep(v.size(), 0);
  for (std::size_t i = 0; i < k; ++i) keep[idx[i]] = 1;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!keep[i] || v[i] <= 0.0) v[i] = 0.0;
  }
}

}  // namespace detail

/// W_enc h + b_enc.
template <class X>
VectorD sae_preactivation(const FeatureDictionary& dict, std::span<const X> h) {
  if (h.size() != dict.model_dim()) {
    throw PreconditionError("sae_encode: input has length " + std::to_string(h.size()) + ", dictionary expects " +
                            std::to_string(dict.model_dim()));
  }
  auto pre = matvec(dict.encoder(), h);
  for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += dict.enc_bias()[i];
  return pre;
}

/// Applies the dictionary's activation function in place to one sample.
inline void apply_activation(const FeatureDictionary& dict, std::span<double> pre) {
  switch (dict.activation().kind) {
    case ActivationKind::JumpReLU:
      for (std::size_t i = 0; i < pre.size(); ++i) {
        if (!(pre[i] > static_cast<double>(dict.thresholds()[i]))) pre[i] = 0.0;
      }
      break;
    case ActivationKind::ReLU:
      for (auto& x : pre) x = x > 0.0 ? x : 0.0;
      break;
    case ActivationKind::TopK:
      detail::top_k_inplace(pre, static_cast<std::size_t>(dict.activation().k));
      break;
    case ActivationKind::BatchTopK:
      throw PreconditionError("BatchTopK activation needs a batch; use sae_encode_batch");
  }
}

template <class X>
VectorD sae_encode(const FeatureDictionary& dict, std::span<const X> h) {
  auto z = sae_preactivation(dict, h);
  apply_activation(dict, z);
  return z;
}

inline VectorD sae_encode(const FeatureDictionary& dict, const VectorD& h) {
  return sae_encode(dict, std::span<const double>(h));
}

/// Encodes every row of `h`. BatchTopK keeps the k * rows largest
/// pre-activations across the whole batch.
inline MatrixD sae_encode_batch(const FeatureDictionary& dict, const MatrixD& h) {
  MatrixD z(h.rows(), dict.size());
  for (std::size_t r = 0; r < h.rows(); ++r) {
    auto pre = sae_preactivation(dict, h.row(r));
    std::copy(pre.begin(), pre.end(), z.row(r).begin());
  }
  if (dict.activation().kind == ActivationKind::BatchTopK) {
    const std::size_t keep = static_cast<std::size_t>(dict.activation().k) * h.rows();
    detail::top_k_inplace(std::span<double>(z.data(), z.size()), keep);
  } else {
    for (std::size_t r = 0; r < z.rows(); ++r) apply_activation(dict, z.row(r));
  }
  return z;
}

/// W_dec z + b_dec.
template <class Z>
VectorD sae_decode(const FeatureDictionary& dict, std::span<const Z> z) {
  if (z.size() != dict.size()) throw PreconditionError("sae_decode: activation length mismatch");
  auto h = matvec(dict.decoder(), z);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += dict.dec_bias()[i];
  return h;
}

inline VectorD sae_decode(const FeatureDictionary& dict, const VectorD& z) {
  return sae_decode(dict, std::span<const double>(z));
}

/// SAE activations (tokens x D) of the dictionary at `pos` over one record.
inline MatrixD encode_site(const ActivationRecord& record, const ModelBundle& bundle, SitePosition pos) {
  const auto& dict = bundle.matchable(pos);
  MatrixD h(record.token_count(), dict.model_dim());
  for (std::size_t t = 0; t < record.token_count(); ++t) {
    auto src = record.hook(pos, t);
    std::copy(src.begin(), src.end(), h.row(t).begin());
  }
  return sae_encode_batch(dict, h);
}

/// Fills record.features for every dictionary whose width matches the model.
inline void annotate(ActivationRecord& record, const ModelBundle& bundle) {
  for (const auto& [pos, dict] : bundle.dictionaries) {
    if (!bundle.match_compatible(pos) || pos.layer >= static_cast<int>(record.layers.size())) continue;
    record.features[pos] = encode_site(record, bundle, pos);
  }
}

/// Only the listed positions; absent or incompatible ones are skipped.
inline void annotate(ActivationRecord& record, const ModelBundle& bundle, std::span<const SitePosition> positions) {
  for (const auto& pos : positions) {
    if (!bundle.match_compatible(pos) || pos.layer < 0 || pos.layer >= static_cast<int>(record.layers.size())) continue;
    record.features[pos] = encode_site(record, bundle, pos);
  }
}

/// Mean of strictly positive activations per feature; zero for features that never fire.
inline VectorD mean_nonzero_activation(const MatrixD& z) {
  VectorD sum(z.cols(), 0.0), cnt(z.cols(), 0.0);
  for (std::size_t r = 0; r < z.rows(); ++r) {
    for (std::size_t c = 0; c < z.cols(); ++c) {
      if (z(r, c) > 0.0) {
        sum[c] += z(r, c);
        cnt[c] += 1.0;
      }
    }
  }
  for (std::size_t c = 0; c < sum.size(); ++c) sum[c] = cnt[c] > 0.0 ? sum[c] / cnt[c] : 0.0;
  return sum;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  SitePosition position;
  std::size_t dict_size = 8;
  int k = 2;
  std::size_t steps = 2000;
  std::size_t batch = 64;  // 0 = full batch
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  /// Initialise decoder columns from normalised training targets.
  bool init_from_data = true;
  /// Every resample_every steps (during the first resample_until fraction of
  /// training) features firing on fewer than resample_ratio * k / D of an
  /// evaluation chunk are re-seeded from the worst-reconstructed samples.
  std::size_t resample_every = 250;
  double resample_until = 0.5;
  double resample_ratio = 0.25;
};

struct SaeParams {
  MatrixD encoder;  // D x d_in
  VectorD enc_bias;  // D
  MatrixD decoder;  // d_out x D
  VectorD dec_bias;  // d_out
};

/// Mean over rows of ||y - (W_dec topk(W_enc x + b_enc) + b_dec)||^2, with the
/// exact gradient (the TopK mask is treated as locally constant) written to
/// *grad when non-null.
inline double topk_loss(const SaeParams& p, const MatrixD& x, const MatrixD& y, int k, SaeParams* grad) {
  const std::size_t n = x.rows();
  const std::size_t D = p.encoder.rows();
  const std::size_t din = p.encoder.cols();
  const std::size_t dout = p.decoder.rows();
  if (grad != nullptr) {
    grad->encoder = MatrixD(D, din);
    grad->enc_bias.assign(D, 0.0);
    grad->decoder = MatrixD(dout, D);
    grad->dec_bias.assign(dout, 0.0);
  }
  double loss = 0.0;
  VectorD z(D), e(dout), gz(D);
  for (std::size_t s = 0; s < n; ++s) {
    auto xs = x.row(s);
    for (std::size_t i = 0; i < D; ++i) z[i] = dot(p.encoder.row(i), xs) + p.enc_bias[i];
    detail::top_k_inplace(z, static_cast<std::size_t>(k));
    for (std::size_t r = 0; r < dout; ++r) {
      double acc = p.dec_bias[r];
      for (std::size_t i = 0; i < D; ++i) {
        if (z[i] != 0.0) acc += p.decoder(r, i) * z[i];
      }
      e[r] = acc - y(s, r);
      loss += e[r] * e[r];
    }
    if (grad == nullptr) continue;
    const double scale = 2.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < dout; ++r) {
      const double g = scale * e[r];
      grad->dec_bias[r] += g;
      for (std::size_t i = 0; i < D; ++i) {
        if (z[i] != 0.0) grad->decoder(r, i) += g * z[i];
      }
    }
    for (std::size_t i = 0; i < D; ++i) {
      if (z[i] == 0.0) continue;
      double acc = 0.0;
      for (std::size_t r = 0; r < dout; ++r) acc += p.decoder(r, i) * e[r];
      const double g = scale * acc;
      grad->enc_bias[i] += g;
      for (std::size_t c = 0; c < din; ++c) grad->encoder(i, c) += g * xs[c];
    }
  }
  return loss / static_cast<double>(n);
}

struct TrainResult {
  FeatureDictionary dictionary;
  std::vector<double> loss_history;  // per step, on the batch used for that step
};

namespace detail {

inline void renormalize_decoder(MatrixD& dec) {
  for (std::size_t c = 0; c < dec.cols(); ++c) {
    double ss = 0.0;
    for (std::size_t r = 0; r < dec.rows(); ++r) ss += dec(r, c) * dec(r, c);
    const double n = std::sqrt(ss);
    if (n < kDegenerateNorm) continue;
    for (std::size_t r = 0; r < dec.rows(); ++r) dec(r, c) /= n;
  }
}

/// Re-seeds rarely firing features from the residuals of the samples the
/// current parameters reconstruct worst. Returns the number re-seeded.
inline std::size_t resample_rare(SaeParams& p, SaeParams& vel, const MatrixD& x, const MatrixD& y, const TrainConfig& cfg) {
  const std::size_t D = p.encoder.rows();
  const std::size_t n = std::min<std::size_t>(x.rows(), 2048);
  const std::size_t dout = p.decoder.rows();
  std::vector<std::size_t> fires(D, 0);
  std::vector<std::pair<double, std::size_t>> err(n);
  std::vector<VectorD> residual(n, VectorD(dout));
  VectorD z(D);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < D; ++i) z[i] = dot(p.encoder.row(i), x.row(s)) + p.enc_bias[i];
    top_k_inplace(z, static_cast<std::size_t>(cfg.k));
    double e2 = 0.0;
    for (std::size_t r = 0; r < dout; ++r) {
      double acc = p.dec_bias[r];
      for (std::size_t i = 0; i < D; ++i) acc += p.decoder(r, i) * z[i];
      residual[s][r] = y(s, r) - acc;
      e2 += residual[s][r] * residual[s][r];
    }
    for (std::size_t i = 0; i < D; ++i) fires[i] += z[i] > 0.0 ? 1 : 0;
    err[s] = {e2, s};
  }
  const double floor = cfg.resample_ratio * static_cast<double>(cfg.k) / static_cast<double>(D) * static_cast<double>(n);
  std::stable_sort(err.begin(), err.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::size_t next = 0, count = 0;
  for (std::size_t i = 0; i < D && next < n; ++i) {
    if (static_cast<double>(fires[i]) >= floor) continue;
    const auto& res = residual[err[next++].second];
    const double nn = norm2(res);
    if (nn < kDegenerateNorm) continue;
    for (std::size_t r = 0; r < dout; ++r) {
      p.decoder(r, i) = res[r] / nn;
      vel.decoder(r, i) = 0.0;
    }
    // An SAE reads what it writes; a transcoder's encoder reads the input sample instead.
    const std::size_t src = err[next - 1].second;
    const double xn = norm2(x.row(src));
    for (std::size_t c = 0; c < p.encoder.cols(); ++c) {
      p.encoder(i, c) = &x == &y ? res[c] / nn : (xn > 0.0 ? x(src, c) / xn : 0.0);
      vel.encoder(i, c) = 0.0;
    }
    p.enc_bias[i] = 0.0;
    vel.enc_bias[i] = 0.0;
    ++count;
  }
  return count;
}

inline TrainResult train_topk(const MatrixD& x, const MatrixD& y, const TrainConfig& cfg) {
  if (x.rows() == 0) throw PreconditionError("train: no training samples (N = 0)");
  if (x.rows() != y.rows()) throw PreconditionError("train: input and target sample counts differ");
  if (cfg.k < 1 || cfg.dict_size == 0) throw PreconditionError("train: need k >= 1 and a non-empty dictionary");
  const std::size_t n = x.rows();
  const std::size_t D = cfg.dict_size;
  const std::size_t din = x.cols();
  const std::size_t dout = y.cols();
  if (din != dout) throw PreconditionError("train: input and target widths must both equal the model dimension");
  Rng rng(cfg.seed);

  SaeParams p{MatrixD(D, din), VectorD(D, 0.0), MatrixD(dout, D), VectorD(dout, 0.0)};
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  for (std::size_t i = 0; i < D; ++i) {
    VectorD col;
    if (cfg.init_from_data) {
      auto row = y.row(order[i % n]);
      col.assign(row.begin(), row.end());
      for (auto& v : col) v += 1e-3 * normal(rng);
    } else {
      col = random_unit(dout, rng);
    }
    const double nn = norm2(std::span<const double>(col));
    for (std::size_t r = 0; r < dout; ++r) p.decoder(r, i) = col[r] / nn;
  }
  // Encoder starts as the decoder transpose.
  for (std::size_t i = 0; i < D; ++i) {
    for (std::size_t c = 0; c < din; ++c) p.encoder(i, c) = p.decoder(c, i);
  }

  SaeParams vel{MatrixD(D, din), VectorD(D, 0.0), MatrixD(dout, D), VectorD(dout, 0.0)};
  const std::size_t bs = cfg.batch == 0 || cfg.batch >= n ? n : cfg.batch;
  MatrixD bx(bs, din), by(bs, dout);
  std::vector<double> history;
  history.reserve(cfg.steps);
  std::size_t cursor = n;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const MatrixD* xb = &x;
    const MatrixD* yb = &y;
    if (bs < n) {
      for (std::size_t s = 0; s < bs; ++s) {
        if (cursor >= n) {
          shuffle(order, rng);
          cursor = 0;
        }
        const auto src = order[cursor++];
        std::copy(x.row(src).begin(), x.row(src).end(), bx.row(s).begin());
        std::copy(y.row(src).begin(), y.row(src).end(), by.row(s).begin());
      }
      xb = &bx;
      yb = &by;
    }
    SaeParams g;
    const double loss = topk_loss(p, *xb, *yb, cfg.k, &g);
    if (!std::isfinite(loss)) throw Error("training loss became non-finite at step " + std::to_string(step));
    history.push_back(loss);
    auto update = [&](double* w, double* v, const double* gr, std::size_t len) {
      for (std::size_t i = 0; i < len; ++i) {
        v[i] = cfg.momentum * v[i] + gr[i];
        w[i] -= cfg.learning_rate * v[i];
      }
    };
    update(p.encoder.data(), vel.encoder.data(), g.encoder.data(), p.encoder.size());
    update(p.enc_bias.data(), vel.enc_bias.data(), g.enc_bias.data(), D);
    update(p.decoder.data(), vel.decoder.data(), g.decoder.data(), p.decoder.size());
    update(p.dec_bias.data(), vel.dec_bias.data(), g.dec_bias.data(), dout);
    renormalize_decoder(p.decoder);
    const bool resample_window = static_cast<double>(step + 1) <= cfg.resample_until * static_cast<double>(cfg.steps);
    if (cfg.resample_every > 0 && (step + 1) % cfg.resample_every == 0 && resample_window) resample_rare(p, vel, x, y, cfg);
  }

  auto to_f = [](const VectorD& v) { return cast<float>(v); };
  FeatureDictionary dict(cfg.position, Activation{ActivationKind::TopK, cfg.k}, cast<float>(p.decoder), cast<float>(p.encoder),
                         to_f(p.enc_bias), to_f(p.dec_bias));
  return {std::move(dict), std::move(history)};
}

}  // namespace detail

/// TopK SAE fit to reconstruct `acts` (N x d).
inline TrainResult train_sae(const MatrixD& acts, const TrainConfig& cfg) {
  return detail::train_topk(acts, acts, cfg);
}

/// TopK transcoder mapping pre_acts to post_acts.
inline TrainResult train_transcoder(const MatrixD& pre_acts, const MatrixD& post_acts, const TrainConfig& cfg) {
  return detail::train_topk(pre_acts, post_acts, cfg);
}

}  // namespace featureflow
