#pragma once

// Multi-layer steering: add (or rescale) residual features at every token
// during generation, with per-layer coefficients from a schedule, and score
// the generations.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "featureflow/flowgraph.hpp"
#include "featureflow/sae.hpp"
#include "featureflow/tensors.hpp"
#include "featureflow/transformer.hpp"

namespace featureflow {

inline constexpr double kDefaultAlpha = -0.05;
inline constexpr double kDefaultSStar = 1.0;

enum class ScheduleKind { Constant, Linear, Exponential };

inline std::string schedule_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Constant: return "constant";
    case ScheduleKind::Linear: return "linear";
    case ScheduleKind::Exponential: return "exponential";
  }
  return "?";
}

inline ScheduleKind parse_schedule(const std::string& s) {
  if (s == "constant") return ScheduleKind::Constant;
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "exponential") return ScheduleKind::Exponential;
  throw PreconditionError("unknown schedule '" + s + "' (constant, linear, exponential)");
}

struct Schedule {
  ScheduleKind kind = ScheduleKind::Constant;
  double s = 1.0;
  double alpha = kDefaultAlpha;
  double s_star = kDefaultSStar;
};

/// s'_l for each requested layer. Linear interpolates (l_start, s) to (l_end, s*).
inline std::vector<double> schedule_coefficients(const Schedule& sch, std::span<const int> layers, int l_start, int l_end) {
  std::vector<double> out;
  out.reserve(layers.size());
  switch (sch.kind) {
    case ScheduleKind::Constant:
      out.assign(layers.size(), sch.s);
      break;
    case ScheduleKind::Exponential:
      for (int l : layers) out.push_back(sch.s * std::exp(sch.alpha * static_cast<double>(l)));
      break;
    case ScheduleKind::Linear: {
      if (l_end == l_start) throw PreconditionError("linear schedule needs l_end != l_start");
      const double k = (sch.s_star - sch.s) / static_cast<double>(l_end - l_start);
      const double b = sch.s - k * static_cast<double>(l_start);
      for (int l : layers) out.push_back(k * static_cast<double>(l) + b);
      break;
    }
  }
  for (double v : out) {
    if (!std::isfinite(v)) throw PreconditionError("schedule produced a non-finite coefficient");
  }
  return out;
}

inline double schedule_coefficient(const Schedule& sch, int layer, int l_start, int l_end) {
  const int l[1] = {layer};
  return schedule_coefficients(sch, l, l_start, l_end).front();
}

enum class SteeringMode { Add, Rescale };

/// single(l) steers one layer; cumulative steers every layer in [from, to].
struct LayerRange {
  bool cumulative = false;
  int from = 0;
  int to = 0;

  static LayerRange single(int l) { return {false, l, l}; }
  static LayerRange range(int a, int b) { return {true, a, b}; }
};

struct SteeringPlan {
  std::vector<FeatureRef> features;  // residual features only
  int l_start = 0;                    // graph span, anchors the linear schedule
  int l_end = 0;
  LayerRange strategy;
  Schedule schedule;
  SteeringMode mode = SteeringMode::Add;
  double r = 1.0;  // rescale mode only
  bool folding = false;
  bool all_tokens = true;

  std::vector<int> layers() const {
    std::vector<int> ls;
    for (int l = strategy.from; l <= strategy.to; ++l) ls.push_back(l);
    return ls;
  }

  void validate(const ModelBundle& bundle) const {
    if (!all_tokens) throw PreconditionError("steering plan: steering applies to all tokens");
    if (l_start > l_end) throw PreconditionError("steering plan: span start after span end");
    if (strategy.from > strategy.to) throw PreconditionError("steering plan: empty layer range");
    if (strategy.from < l_start || strategy.to > l_end) throw PreconditionError("steering plan: strategy range outside the plan span");
    if (!std::isfinite(r) || !std::isfinite(schedule.s) || !std::isfinite(schedule.alpha) || !std::isfinite(schedule.s_star)) {
      throw PreconditionError("steering plan: coefficients must be finite");
    }
    for (const auto& f : features) {
      if (f.position.site != Site::Res) throw PreconditionError("steering plan: " + to_string(f) + " is not a residual feature");
      if (f.position.layer < l_start || f.position.layer > l_end) {
        throw PreconditionError("steering plan: " + to_string(f) + " lies outside the span [" + std::to_string(l_start) + ", " +
                                std::to_string(l_end) + "]");
      }
      const auto& dict = bundle.matchable(f.position);
      if (f.index >= dict.size()) throw PreconditionError("steering plan: " + to_string(f) + " out of range");
      if (folding && !dict.mean_activations()) {
        throw PreconditionError("steering plan: folding needs mean activations at " + to_string(f.position));
      }
    }
  }
};

/// Spine of a flow graph as a plan over its span.
inline SteeringPlan plan_from_graph(const FlowGraph& g, const Schedule& sch, LayerRange strategy) {
  SteeringPlan p;
  p.features = g.spine();
  p.l_start = g.l_start;
  p.l_end = g.l_end;
  p.strategy = strategy;
  p.schedule = sch;
  return p;
}

inline nlohmann::json to_json(const SteeringPlan& p) {
  using nlohmann::json;
  json feats = json::array();
  for (const auto& f : p.features) feats.push_back(to_string(f));
  json strat = p.strategy.cumulative ? json{{"kind", "cumulative"}, {"from", p.strategy.from}, {"to", p.strategy.to}}
                                     : json{{"kind", "single"}, {"layer", p.strategy.from}};
  return {{"features", feats},
          {"span", {p.l_start, p.l_end}},
          {"strategy", strat},
          {"schedule", {{"kind", schedule_name(p.schedule.kind)}, {"s", p.schedule.s}, {"alpha", p.schedule.alpha}, {"s_star", p.schedule.s_star}}},
          {"mode", p.mode == SteeringMode::Add ? "add" : "rescale"},
          {"r", p.r},
          {"folding", p.folding},
          {"all_tokens", p.all_tokens}};
}

/// Missing fields take defaults; the span defaults to the features' layer range.
inline SteeringPlan steering_plan_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw PreconditionError("steering plan must be a JSON object");
  SteeringPlan p;
  try {
    for (const auto& f : j.at("features")) p.features.push_back(parse_feature_ref(f.get<std::string>()));
    if (j.contains("span")) {
      p.l_start = j.at("span").at(0).get<int>();
      p.l_end = j.at("span").at(1).get<int>();
    } else if (!p.features.empty()) {
      p.l_start = p.l_end = p.features.front().position.layer;
      for (const auto& f : p.features) {
        p.l_start = std::min(p.l_start, f.position.layer);
        p.l_end = std::max(p.l_end, f.position.layer);
      }
    }
    if (j.contains("strategy")) {
      const auto& s = j.at("strategy");
      const auto kind = s.at("kind").get<std::string>();
      if (kind == "single") {
        p.strategy = LayerRange::single(s.at("layer").get<int>());
      } else if (kind == "cumulative") {
        p.strategy = LayerRange::range(s.value("from", p.l_start), s.at("to").get<int>());
      } else {
        throw PreconditionError("unknown steering strategy '" + kind + "' (single, cumulative)");
      }
    } else {
      p.strategy = LayerRange::range(p.l_start, p.l_end);
    }
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      p.schedule.kind = parse_schedule(s.value("kind", std::string("constant")));
      p.schedule.s = s.value("s", 1.0);
      p.schedule.alpha = s.value("alpha", kDefaultAlpha);
      p.schedule.s_star = s.value("s_star", kDefaultSStar);
    }
    const auto mode = j.value("mode", std::string("add"));
    if (mode != "add" && mode != "rescale") throw PreconditionError("unknown steering mode '" + mode + "' (add, rescale)");
    p.mode = mode == "add" ? SteeringMode::Add : SteeringMode::Rescale;
    p.r = j.value("r", 1.0);
    p.folding = j.value("folding", false);
    p.all_tokens = j.value("all_tokens", true);
  } catch (const nlohmann::json::exception& e) {
    throw PreconditionError(std::string("malformed steering plan: ") + e.what());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Applying a plan

/// RES-hook interventions for every token. Add mode: h += sum s'_l v per
/// layer. Rescale mode: h += (r-1) sum a_i v_i with a from the live hook.
inline std::vector<Intervention> steering_interventions(const ModelBundle& bundle, const SteeringPlan& plan) {
  plan.validate(bundle);
  std::map<int, std::vector<std::size_t>> by_layer;
  for (const auto& f : plan.features) by_layer[f.position.layer].push_back(f.index);
  std::vector<Intervention> out;
  const auto layers = plan.layers();
  const auto coef = plan.mode == SteeringMode::Add ? schedule_coefficients(plan.schedule, layers, plan.l_start, plan.l_end)
                                                   : std::vector<double>(layers.size(), 0.0);
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const int l = layers[li];
    auto it = by_layer.find(l);
    if (it == by_layer.end()) continue;
    const SitePosition pos{l, Site::Res};
    const auto& dict = bundle.matchable(pos);
    const std::size_t d = dict.model_dim();
    auto scale_of = [&](std::size_t i) { return plan.folding ? static_cast<double>((*dict.mean_activations())[i]) : 1.0; };
    if (plan.mode == SteeringMode::Add) {
      VectorD delta(d, 0.0);
      for (auto i : it->second) {
        const auto v = dict.embedding(i);
        const double c = coef[li] * scale_of(i);
        for (std::size_t r = 0; r < d; ++r) delta[r] += c * v[r];
      }
      out.push_back({pos, std::nullopt, [delta = std::move(delta)](std::span<double> h, std::size_t) {
                       for (std::size_t r = 0; r < h.size(); ++r) h[r] += delta[r];
                     }});
    } else {
      if (plan.r == 1.0) continue;
      const auto idx = it->second;
      const double c = plan.r - 1.0;
      out.push_back({pos, std::nullopt, [&dict, idx, c, folding = plan.folding](std::span<double> h, std::size_t) {
                       const auto z = sae_encode(dict, VectorD(h.begin(), h.end()));
                       VectorD delta(h.size(), 0.0);
                       for (auto i : idx) {
                         if (z[i] == 0.0) continue;
                         const double a = folding ? z[i] * static_cast<double>((*dict.mean_activations())[i]) : z[i];
                         const auto v = dict.embedding(i);
                         for (std::size_t r = 0; r < h.size(); ++r) delta[r] += a * v[r];
                       }
                       for (std::size_t r = 0; r < h.size(); ++r) h[r] += c * delta[r];
                     }});
    }
  }
  return out;
}

inline std::string apply_steering(const ModelBundle& bundle, const SteeringPlan& plan, const std::string& prompt, const SamplerConfig& cfg) {
  const auto ivs = steering_interventions(bundle, plan);
  const auto tokens = encode_bytes(prompt);
  return decode_bytes(generate(bundle.toy_model(), tokens, cfg, ivs));
}

inline std::string generate_text(const ModelBundle& bundle, const std::string& prompt, const SamplerConfig& cfg) {
  const auto tokens = encode_bytes(prompt);
  return decode_bytes(generate(bundle.toy_model(), tokens, cfg));
}

// ---------------------------------------------------------------------------
// Scoring

enum class ScoreMode { Activation, Deactivation };

inline std::string score_mode_name(ScoreMode m) { return m == ScoreMode::Activation ? "activation" : "deactivation"; }

inline ScoreMode parse_score_mode(const std::string& s) {
  if (s == "activation") return ScoreMode::Activation;
  if (s == "deactivation") return ScoreMode::Deactivation;
  throw PreconditionError("unknown score mode '" + s + "' (activation, deactivation)");
}

struct GenerationScore {
  double behavioral = 0.0;
  double coherence = 0.0;
  ScoreMode mode = ScoreMode::Activation;

  double combined() const {
    if (mode == ScoreMode::Activation) return behavioral * coherence / 25.0;
    return (1.0 - behavioral / 5.0) * coherence / 5.0;
  }
};

struct Theme {
  std::string name;
  std::string characters;             // token class counted by the builtin scorer
  std::vector<std::string> keywords;  // whole words, lower case

  static Theme digits() { return {"digits", "0123456789", {}}; }
};

/// Anything that maps a text to a score; nullopt means missing.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::optional<GenerationScore> score(const std::string& text, const Theme& theme, ScoreMode mode) = 0;
  virtual std::string name() const = 0;
};

/// Desk-scale stand-in for the LLM judge: theme frequency and printable
/// fraction, each mapped to 0..5 through fixed bins.
class BuiltinScorer : public Scorer {
 public:
  static constexpr std::array<double, 5> kThemeBins{0.02, 0.1, 0.25, 0.45, 0.7};
  static constexpr std::array<double, 5> kCoherenceBins{0.5, 0.7, 0.8, 0.9, 0.97};

  static double bin(double x, const std::array<double, 5>& edges) {
    double b = 0.0;
    for (double e : edges) b += x >= e ? 1.0 : 0.0;
    return b;
  }

  static double theme_frequency(const std::string& text, const Theme& theme) {
    if (text.empty()) return 0.0;
    if (!theme.keywords.empty()) {
      std::size_t words = 0, hits = 0;
      std::string w;
      auto flush = [&]() {
        if (w.empty()) return;
        ++words;
        hits += std::find(theme.keywords.begin(), theme.keywords.end(), w) != theme.keywords.end() ? 1 : 0;
        w.clear();
      };
      for (unsigned char c : text) {
        if (std::isalnum(c)) {
          w.push_back(static_cast<char>(std::tolower(c)));
        } else {
          flush();
        }
      }
      flush();
      return words == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(words);
    }
    std::size_t hits = 0;
    for (char c : text) hits += theme.characters.find(c) != std::string::npos ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(text.size());
  }

  static double printable_fraction(const std::string& text) {
    if (text.empty()) return 0.0;
    std::size_t ok = 0;
    for (unsigned char c : text) ok += (c >= 32 && c < 127) ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(text.size());
  }

  std::optional<GenerationScore> score(const std::string& text, const Theme& theme, ScoreMode mode) override {
    return GenerationScore{bin(theme_frequency(text, theme), kThemeBins), bin(printable_fraction(text), kCoherenceBins), mode};
  }
  std::string name() const override { return "builtin"; }
};

inline std::optional<GenerationScore> score_generation(const std::string& text, const Theme& theme, Scorer& scorer,
                                                       ScoreMode mode = ScoreMode::Activation) {
  return scorer.score(text, theme, mode);
}

inline nlohmann::json to_json(const std::optional<GenerationScore>& s) {
  if (!s) return {{"missing", true}, {"behavioral", nullptr}, {"coherence", nullptr}, {"combined", nullptr}};
  return {{"missing", false}, {"behavioral", s->behavioral}, {"coherence", s->coherence}, {"combined", s->combined()}, {"mode", score_mode_name(s->mode)}};
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepConfig {
  SteeringPlan base;         // features, span, schedule kind and parameters
  std::vector<int> layers;   // strategy end layers; empty = every layer in the span
  std::vector<double> values;  // s (add mode) or r (rescale mode)
  bool single = true;
  bool cumulative = true;
  std::size_t generations = 10;
  std::string prompt = "I think ";
  SamplerConfig sampler;     // sampler.seed + i seeds generation i
  Theme theme = Theme::digits();
  ScoreMode score_mode = ScoreMode::Activation;
};

struct SweepRow {
  int layer = 0;
  double value = 0.0;
  std::string strategy;  // "single", "cumulative" or "baseline"
  std::size_t scored = 0;
  std::size_t missing = 0;
  std::optional<double> mean_combined;
  std::optional<double> mean_behavioral;
  std::optional<double> mean_coherence;
  bool best_layer = false;  // best mean_combined among layers at this (value, strategy)
  std::vector<std::string> texts;
};

struct SweepReport {
  std::vector<SweepRow> rows;  // baseline first

  const SweepRow& baseline() const { return rows.front(); }
  /// Best mean combined score for a strategy at one value, over layers.
  std::optional<double> best(const std::string& strategy, double value) const {
    std::optional<double> b;
    for (const auto& r : rows) {
      if (r.strategy == strategy && r.value == value && r.mean_combined) b = b ? std::max(*b, *r.mean_combined) : *r.mean_combined;
    }
    return b;
  }
};

namespace detail {

inline SweepRow score_row(const ModelBundle& bundle, const SweepConfig& cfg, const SteeringPlan* plan, Scorer& scorer) {
  SweepRow row;
  double c = 0.0, b = 0.0, h = 0.0;
  const auto ivs = plan ? steering_interventions(bundle, *plan) : std::vector<Intervention>{};
  const auto prompt = encode_bytes(cfg.prompt);
  for (std::size_t i = 0; i < cfg.generations; ++i) {
    auto sc = cfg.sampler;
    sc.seed = cfg.sampler.seed + i;
    const auto text = decode_bytes(generate(bundle.toy_model(), prompt, sc, ivs));
    const auto s = scorer.score(text, cfg.theme, cfg.score_mode);
    row.texts.push_back(text);
    if (!s) {
      ++row.missing;
      continue;
    }
    ++row.scored;
    c += s->combined();
    b += s->behavioral;
    h += s->coherence;
  }
  if (row.scored > 0) {
    const double n = static_cast<double>(row.scored);
    row.mean_combined = c / n;
    row.mean_behavioral = b / n;
    row.mean_coherence = h / n;
  }
  return row;
}

}  // namespace detail

/// Every (layer, value, strategy) plan plus an unsteered baseline row, each
/// over the same generation seeds. Plans run in parallel.
inline SweepReport steering_sweep(const ModelBundle& bundle, const SweepConfig& cfg, Scorer& scorer) {
  if (cfg.values.empty()) throw PreconditionError("sweep: no coefficient values");
  if (!cfg.single && !cfg.cumulative) throw PreconditionError("sweep: no strategy selected");
  std::vector<int> layers = cfg.layers;
  if (layers.empty()) {
    for (int l = cfg.base.l_start; l <= cfg.base.l_end; ++l) layers.push_back(l);
  }
  struct Job {
    int layer;
    double value;
    std::string strategy;
    SteeringPlan plan;
  };
  std::vector<Job> jobs;
  for (double v : cfg.values) {
    for (int l : layers) {
      for (int cum = 0; cum < 2; ++cum) {
        if ((cum == 0 && !cfg.single) || (cum == 1 && !cfg.cumulative)) continue;
        SteeringPlan p = cfg.base;
        p.strategy = cum ? LayerRange::range(p.l_start, l) : LayerRange::single(l);
        if (p.mode == SteeringMode::Add) {
          p.schedule.s = v;
        } else {
          p.r = v;
        }
        p.validate(bundle);
        jobs.push_back({l, v, cum ? "cumulative" : "single", std::move(p)});
      }
    }
  }
  SweepReport rep;
  rep.rows.resize(jobs.size() + 1);
  std::atomic<bool> failed{false};
  std::string error;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i <= jobs.size(); ++i) {
    try {
      auto row = detail::score_row(bundle, cfg, i == 0 ? nullptr : &jobs[i - 1].plan, scorer);
      if (i == 0) {
        row.strategy = "baseline";
        row.layer = -1;
      } else {
        row.layer = jobs[i - 1].layer;
        row.value = jobs[i - 1].value;
        row.strategy = jobs[i - 1].strategy;
      }
      rep.rows[i] = std::move(row);
    } catch (const std::exception& e) {
#pragma omp critical(featureflow_sweep_error)
      {
        if (!failed.exchange(true)) error = e.what();
      }
    }
  }
  if (failed) throw Error("sweep: " + error);
  // Best-layer markers.
  std::map<std::pair<double, std::string>, std::size_t> best;
  for (std::size_t i = 1; i < rep.rows.size(); ++i) {
    const auto& r = rep.rows[i];
    if (!r.mean_combined) continue;
    auto key = std::make_pair(r.value, r.strategy);
    auto it = best.find(key);
    if (it == best.end() || *r.mean_combined > *rep.rows[it->second].mean_combined) best[key] = i;
  }
  for (const auto& [k, i] : best) rep.rows[i].best_layer = true;
  return rep;
}

inline nlohmann::json to_json(const SweepRow& r) {
  using nlohmann::json;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"layer", r.layer},         {"value", r.value},
          {"strategy", r.strategy},   {"scored", r.scored},
          {"missing", r.missing},     {"mean_combined", opt(r.mean_combined)},
          {"mean_behavioral", opt(r.mean_behavioral)}, {"mean_coherence", opt(r.mean_coherence)},
          {"best_layer", r.best_layer}, {"texts", r.texts}};
}

/// Line-delimited records, baseline first.
inline std::string sweep_lines(const SweepReport& rep) {
  std::string out;
  for (const auto& r : rep.rows) out += to_json(r).dump() + "\n";
  return out;
}

}  // namespace featureflow
