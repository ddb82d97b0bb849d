#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "featureflow/linalg.hpp"
#include "featureflow/site.hpp"
#include "featureflow/transformer.hpp"

namespace featureflow {

inline constexpr double kDegenerateNorm = 1e-8;

enum class ActivationKind { JumpReLU, TopK, BatchTopK, ReLU };

struct Activation {
  ActivationKind kind = ActivationKind::ReLU;
  int k = 0;  // TopK / BatchTopK only

  friend bool operator==(const Activation&, const Activation&) = default;
};

inline std::string activation_name(ActivationKind k) {
  switch (k) {
    case ActivationKind::JumpReLU: return "jumprelu";
    case ActivationKind::TopK: return "topk";
    case ActivationKind::BatchTopK: return "batchtopk";
    case ActivationKind::ReLU: return "relu";
  }
  return "?";
}

inline ActivationKind parse_activation(const std::string& s) {
  if (s == "jumprelu") return ActivationKind::JumpReLU;
  if (s == "topk") return ActivationKind::TopK;
  if (s == "batchtopk") return ActivationKind::BatchTopK;
  if (s == "relu") return ActivationKind::ReLU;
  throw LoadError("unknown activation kind '" + s + "'");
}

struct NormalizedColumns {
  MatrixD matrix;
  std::vector<std::size_t> degenerate;  // column indices with norm < 1e-8, left as zero
};

/// Scales every column to unit L2 norm; degenerate columns become zero.
template <class T>
NormalizedColumns normalize_columns(const Matrix<T>& m) {
  NormalizedColumns out{MatrixD(m.rows(), m.cols()), {}};
  for (std::size_t c = 0; c < m.cols(); ++c) {
    double ss = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) ss += static_cast<double>(m(r, c)) * static_cast<double>(m(r, c));
    const double n = std::sqrt(ss);
    if (n < kDegenerateNorm) {
      out.degenerate.push_back(c);
      continue;
    }
    for (std::size_t r = 0; r < m.rows(); ++r) out.matrix(r, c) = static_cast<double>(m(r, c)) / n;
  }
  return out;
}

/// One SAE (or transcoder) at one site. Raw tensors keep their f32 storage;
/// embeddings() is the unit-norm, feature-major (D x d) view used for matching.
class FeatureDictionary {
 public:
  FeatureDictionary() = default;

  FeatureDictionary(SitePosition position, Activation activation, MatrixF decoder, MatrixF encoder,
                    VectorF enc_bias, VectorF dec_bias, VectorF thresholds = {})
      : position_(position),
        activation_(activation),
        decoder_(std::move(decoder)),
        encoder_(std::move(encoder)),
        enc_bias_(std::move(enc_bias)),
        dec_bias_(std::move(dec_bias)),
        thresholds_(std::move(thresholds)) {
    const auto name = to_string(position_);
    const std::size_t d = decoder_.rows();
    const std::size_t D = decoder_.cols();
    if (d == 0 || D == 0) throw ShapeError(name + " decoder: empty dictionary");
    if (encoder_.rows() != D || encoder_.cols() != d) throw ShapeError(name + " encoder: expected " + std::to_string(D) + "x" + std::to_string(d));
    if (enc_bias_.size() != D) throw ShapeError(name + " enc_bias: expected length " + std::to_string(D));
    if (dec_bias_.size() != d) throw ShapeError(name + " dec_bias: expected length " + std::to_string(d));
    if (!thresholds_.empty() && thresholds_.size() != D) throw ShapeError(name + " thresholds: expected length " + std::to_string(D));
    if (activation_.kind == ActivationKind::JumpReLU && thresholds_.empty()) {
      throw ShapeError(name + " thresholds: JumpReLU dictionary without thresholds");
    }
    if ((activation_.kind == ActivationKind::TopK || activation_.kind == ActivationKind::BatchTopK) && activation_.k < 1) {
      throw ShapeError(name + ": TopK dictionary needs k >= 1");
    }
    build_view();
  }

  SitePosition position() const { return position_; }
  const Activation& activation() const { return activation_; }
  std::size_t model_dim() const { return decoder_.rows(); }
  std::size_t size() const { return decoder_.cols(); }

  const MatrixF& decoder() const { return decoder_; }  // d x D
  const MatrixF& encoder() const { return encoder_; }  // D x d
  const VectorF& enc_bias() const { return enc_bias_; }
  const VectorF& dec_bias() const { return dec_bias_; }
  const VectorF& thresholds() const { return thresholds_; }

  /// Normalized decoder columns as rows (D x d).
  const MatrixD& embeddings() const { return embeddings_; }
  std::span<const double> embedding(std::size_t i) const { return embeddings_.row(i); }
  bool degenerate(std::size_t i) const { return degenerate_[i] != 0; }
  std::size_t degenerate_count() const { return degenerate_count_; }

  VectorD decoder_column(std::size_t i) const {
    VectorD c(model_dim());
    for (std::size_t r = 0; r < c.size(); ++r) c[r] = decoder_(r, i);
    return c;
  }

  bool folded() const { return folded_; }
  void set_folded(bool f) { folded_ = f; }

  /// Mean nonzero activation per feature from a calibration set, if known.
  const std::optional<VectorF>& mean_activations() const { return mean_acts_; }
  void set_mean_activations(VectorF m) {
    if (m.size() != size()) throw ShapeError(to_string(position_) + " mean_act: expected length " + std::to_string(size()));
    mean_acts_ = std::move(m);
  }

 private:
  void build_view() {
    const std::size_t d = model_dim();
    const std::size_t D = size();
    embeddings_ = MatrixD(D, d);
    degenerate_.assign(D, 0);
    degenerate_count_ = 0;
    for (std::size_t c = 0; c < D; ++c) {
      double ss = 0.0;
      for (std::size_t r = 0; r < d; ++r) ss += static_cast<double>(decoder_(r, c)) * decoder_(r, c);
      const double n = std::sqrt(ss);
      if (n < kDegenerateNorm) {
        degenerate_[c] = 1;
        ++degenerate_count_;
        continue;
      }
      for (std::size_t r = 0; r < d; ++r) embeddings_(c, r) = decoder_(r, c) / n;
    }
  }

  SitePosition position_;
  Activation activation_;
  MatrixF decoder_;
  MatrixF encoder_;
  VectorF enc_bias_;
  VectorF dec_bias_;
  VectorF thresholds_;
  MatrixD embeddings_;
  std::vector<unsigned char> degenerate_;
  std::size_t degenerate_count_ = 0;
  bool folded_ = false;
  std::optional<VectorF> mean_acts_;
};

struct ModelBundle {
  std::size_t model_dim = 0;
  int layer_count = 0;
  std::string name;
  std::uint64_t seed = 0;
  std::string provenance;
  std::map<SitePosition, FeatureDictionary> dictionaries;
  std::optional<ToyTransformer> model;
  /// Optional human annotations keyed by "layer/site/index".
  std::map<std::string, std::string> interpretations;

  bool has(SitePosition p) const { return dictionaries.count(p) != 0; }

  const FeatureDictionary& at(SitePosition p) const {
    auto it = dictionaries.find(p);
    if (it == dictionaries.end()) throw PreconditionError("no dictionary at " + to_string(p));
    return it->second;
  }

  /// Sites whose dictionary width differs from model_dim load fine but refuse matching.
  bool match_compatible(SitePosition p) const { return has(p) && at(p).model_dim() == model_dim; }

  const FeatureDictionary& matchable(SitePosition p) const {
    const auto& dict = at(p);
    if (dict.model_dim() != model_dim) {
      throw IncompatibleError(to_string(p) + " has width " + std::to_string(dict.model_dim()) +
                              " but the bundle model dimension is " + std::to_string(model_dim));
    }
    return dict;
  }

  std::size_t degenerate_count() const {
    std::size_t n = 0;
    for (const auto& [p, dict] : dictionaries) n += dict.degenerate_count();
    return n;
  }

  const ToyTransformer& toy_model() const {
    if (!model) throw PreconditionError("bundle '" + name + "' carries no toy model weights");
    return *model;
  }

  void validate() const {
    for (const auto& [p, dict] : dictionaries) {
      if (p.layer < 0 || p.layer >= layer_count) {
        throw ShapeError(to_string(p) + ": layer outside [0, " + std::to_string(layer_count) + ")");
      }
    }
    if (model) {
      model->validate();
      if (static_cast<std::size_t>(model->config.d) != model_dim || model->config.layers != layer_count) {
        throw ShapeError("toy model dimensions disagree with the manifest");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Raw f32 tensor files: little-endian, row-major, no header.

namespace io {

inline std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected, const std::string& tensor) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("missing tensor file for '" + tensor + "': " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  if (bytes != expected * 4) {
    throw ShapeError("tensor '" + tensor + "' has " + std::to_string(bytes / 4) + " values, manifest shape implies " +
                     std::to_string(expected));
  }
  std::vector<float> v(expected);
  std::vector<unsigned char> raw(bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t u = static_cast<std::uint32_t>(raw[4 * i]) | static_cast<std::uint32_t>(raw[4 * i + 1]) << 8 |
                      static_cast<std::uint32_t>(raw[4 * i + 2]) << 16 | static_cast<std::uint32_t>(raw[4 * i + 3]) << 24;
    v[i] = std::bit_cast<float>(u);
  }
  if (!all_finite(v)) throw LoadError("tensor '" + tensor + "' contains non-finite values");
  return v;
}

inline void write_f32(const std::filesystem::path& path, std::span<const float> v) {
  std::vector<unsigned char> raw(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(v[i]);
    raw[4 * i] = static_cast<unsigned char>(u);
    raw[4 * i + 1] = static_cast<unsigned char>(u >> 8);
    raw[4 * i + 2] = static_cast<unsigned char>(u >> 16);
    raw[4 * i + 3] = static_cast<unsigned char>(u >> 24);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

inline MatrixF read_matrix(const std::filesystem::path& dir, const std::string& file, std::size_t rows, std::size_t cols) {
  return MatrixF(rows, cols, read_f32(dir / file, rows * cols, file));
}

}  // namespace io

inline std::string tensor_file(SitePosition p, const std::string& tensor) {
  return std::to_string(p.layer) + "_" + std::string(site_name(p.site)) + "_" + tensor + ".f32";
}

namespace detail {

using nlohmann::json;

struct ModelTensor {
  std::string name;
  std::vector<std::size_t> shape;
};

inline std::vector<std::pair<std::string, std::vector<float>*>> model_vectors(ToyTransformer& m) {
  std::vector<std::pair<std::string, std::vector<float>*>> v;
  v.emplace_back("final_norm", &m.final_norm);
  v.emplace_back("unembed_bias", &m.unembed_bias);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& w = m.layers[l];
    const auto p = std::to_string(l) + "_model_";
    v.emplace_back(p + "att_norm", &w.att_norm);
    v.emplace_back(p + "mlp_norm", &w.mlp_norm);
    v.emplace_back(p + "b_in", &w.b_in);
    v.emplace_back(p + "b_out", &w.b_out);
  }
  return v;
}

inline std::vector<std::pair<std::string, MatrixF*>> model_matrices(ToyTransformer& m) {
  std::vector<std::pair<std::string, MatrixF*>> v;
  v.emplace_back("embed", &m.embed);
  v.emplace_back("unembed", &m.unembed);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& w = m.layers[l];
    const auto p = std::to_string(l) + "_model_";
    v.emplace_back(p + "wq", &w.wq);
    v.emplace_back(p + "wk", &w.wk);
    v.emplace_back(p + "wv", &w.wv);
    v.emplace_back(p + "wo", &w.wo);
    v.emplace_back(p + "w_in", &w.w_in);
    v.emplace_back(p + "w_out", &w.w_out);
  }
  return v;
}

inline std::string model_file(const std::string& name) {
  return name.find("_model_") != std::string::npos ? name + ".f32" : "model_" + name + ".f32";
}

}  // namespace detail

/// Writes manifest.json plus one .f32 file per tensor.
inline void save_bundle(const ModelBundle& b, const std::filesystem::path& dir) {
  using nlohmann::json;
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "featureflow-bundle/1";
  manifest["name"] = b.name;
  manifest["seed"] = b.seed;
  manifest["provenance"] = b.provenance;
  manifest["model_dim"] = b.model_dim;
  manifest["layer_count"] = b.layer_count;
  json dicts = json::array();
  for (const auto& [p, dict] : b.dictionaries) {
    json files;
    auto put = [&](const std::string& tensor, std::span<const float> data) {
      const auto f = tensor_file(p, tensor);
      io::write_f32(dir / f, data);
      files[tensor] = f;
    };
    put("decoder", dict.decoder().storage());
    put("encoder", dict.encoder().storage());
    put("enc_bias", dict.enc_bias());
    put("dec_bias", dict.dec_bias());
    if (!dict.thresholds().empty()) put("thresholds", dict.thresholds());
    if (dict.mean_activations()) put("mean_act", *dict.mean_activations());
    json entry;
    entry["position"] = {{"layer", p.layer}, {"site", std::string(site_name(p.site))}};
    entry["D"] = dict.size();
    entry["d"] = dict.model_dim();
    entry["activation_kind"] = activation_name(dict.activation().kind);
    const auto kind = dict.activation().kind;
    entry["k"] = (kind == ActivationKind::TopK || kind == ActivationKind::BatchTopK) ? json(dict.activation().k) : json(nullptr);
    entry["folded"] = dict.folded();
    entry["files"] = files;
    dicts.push_back(entry);
  }
  manifest["dictionaries"] = dicts;
  if (b.model) {
    auto m = *b.model;
    json mm;
    mm["d"] = m.config.d;
    mm["heads"] = m.config.heads;
    mm["vocab"] = m.config.vocab;
    mm["d_ff"] = m.config.d_ff;
    mm["layers"] = m.config.layers;
    mm["seed"] = m.seed;
    json tensors = json::array();
    for (auto& [name, mat] : detail::model_matrices(m)) {
      io::write_f32(dir / detail::model_file(name), mat->storage());
      tensors.push_back({{"name", name}, {"shape", {mat->rows(), mat->cols()}}, {"file", detail::model_file(name)}});
    }
    for (auto& [name, vec] : detail::model_vectors(m)) {
      io::write_f32(dir / detail::model_file(name), *vec);
      tensors.push_back({{"name", name}, {"shape", {vec->size()}}, {"file", detail::model_file(name)}});
    }
    mm["tensors"] = tensors;
    manifest["model"] = mm;
  }
  if (!b.interpretations.empty()) manifest["interpretations"] = b.interpretations;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

inline ModelBundle load_bundle(const std::filesystem::path& dir) {
  using nlohmann::json;
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("missing manifest: " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("malformed manifest: " + std::string(e.what()));
  }
  ModelBundle b;
  try {
    b.model_dim = manifest.at("model_dim").get<std::size_t>();
    b.layer_count = manifest.at("layer_count").get<int>();
    b.name = manifest.value("name", "");
    b.seed = manifest.value("seed", std::uint64_t{0});
    b.provenance = manifest.value("provenance", "");
    for (const auto& e : manifest.at("dictionaries")) {
      SitePosition p{e.at("position").at("layer").get<int>(), parse_site(e.at("position").at("site").get<std::string>())};
      const auto D = e.at("D").get<std::size_t>();
      const auto d = e.value("d", b.model_dim);
      Activation act{parse_activation(e.at("activation_kind").get<std::string>()), 0};
      if (!e.at("k").is_null()) act.k = e.at("k").get<int>();
      const auto& files = e.at("files");
      auto file = [&](const char* t) { return files.at(t).get<std::string>(); };
      auto vec = [&](const char* t, std::size_t n) { return io::read_f32(dir / file(t), n, to_string(p) + "/" + t); };
      MatrixF dec(d, D, vec("decoder", d * D));
      MatrixF enc(D, d, vec("encoder", D * d));
      auto eb = vec("enc_bias", D);
      auto db = vec("dec_bias", d);
      VectorF th;
      if (files.contains("thresholds")) th = vec("thresholds", D);
      FeatureDictionary dict(p, act, std::move(dec), std::move(enc), std::move(eb), std::move(db), std::move(th));
      dict.set_folded(e.value("folded", false));
      if (files.contains("mean_act")) dict.set_mean_activations(vec("mean_act", D));
      b.dictionaries.emplace(p, std::move(dict));
    }
    if (manifest.contains("model")) {
      const auto& mm = manifest["model"];
      ToyConfig cfg;
      cfg.d = mm.at("d").get<int>();
      cfg.heads = mm.at("heads").get<int>();
      cfg.vocab = mm.at("vocab").get<int>();
      cfg.d_ff = mm.at("d_ff").get<int>();
      cfg.layers = mm.at("layers").get<int>();
      auto m = make_zero_transformer(cfg);
      m.seed = mm.value("seed", std::uint64_t{0});
      std::map<std::string, std::vector<std::size_t>> shapes;
      for (const auto& t : mm.at("tensors")) shapes[t.at("name").get<std::string>()] = t.at("shape").get<std::vector<std::size_t>>();
      for (auto& [name, mat] : detail::model_matrices(m)) {
        auto it = shapes.find(name);
        if (it == shapes.end()) throw LoadError("manifest lists no model tensor '" + name + "'");
        if (it->second != std::vector<std::size_t>{mat->rows(), mat->cols()}) throw ShapeError("model tensor '" + name + "' shape disagrees with model config");
        *mat = MatrixF(mat->rows(), mat->cols(), io::read_f32(dir / detail::model_file(name), mat->size(), name));
      }
      for (auto& [name, vec] : detail::model_vectors(m)) {
        auto it = shapes.find(name);
        if (it == shapes.end()) throw LoadError("manifest lists no model tensor '" + name + "'");
        if (it->second != std::vector<std::size_t>{vec->size()}) throw ShapeError("model tensor '" + name + "' shape disagrees with model config");
        *vec = io::read_f32(dir / detail::model_file(name), vec->size(), name);
      }
      b.model = std::move(m);
    }
    if (manifest.contains("interpretations")) {
      b.interpretations = manifest["interpretations"].get<std::map<std::string, std::string>>();
    }
  } catch (const json::exception& e) {
    throw LoadError("manifest field error: " + std::string(e.what()));
  }
  b.validate();
  return b;
}

}  // namespace featureflow
