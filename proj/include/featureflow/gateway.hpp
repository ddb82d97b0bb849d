#pragma once

// Service layer shared by the CLI and the HTTP server. Every artifact both
// front ends can produce is rendered by one function here, which is what
// keeps their bytes identical.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "featureflow/flowgraph.hpp"
#include "featureflow/intervention.hpp"
#include "featureflow/judge.hpp"
#include "featureflow/matching.hpp"
#include "featureflow/stats.hpp"
#include "featureflow/steering.hpp"
#include "featureflow/tensors.hpp"

namespace featureflow::gateway {

using nlohmann::json;

inline constexpr int kDefaultPort = 7431;

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of the canonical (sorted-key) JSON dump.
inline std::string config_hash(const json& config) { return hex64(fnv1a(config.dump())); }

// ---------------------------------------------------------------------------
// Request parsing helpers

/// Client-side mistakes map to 400, unknown things to 404.
struct BadRequest : Error {
  using Error::Error;
};
struct NotFound : Error {
  using Error::Error;
};
struct Conflict : Error {
  using Error::Error;
};

inline SamplerConfig sampler_from_json(const json& j) {
  SamplerConfig c;
  if (j.is_null()) return c;
  if (!j.is_object()) throw BadRequest("sampler must be an object");
  c.top_p = j.value("top_p", c.top_p);
  c.temperature = j.value("temperature", c.temperature);
  c.max_len = j.value("max_len", c.max_len);
  c.greedy = j.value("greedy", c.greedy);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline json to_json(const SamplerConfig& c) {
  return {{"top_p", c.top_p}, {"temperature", c.temperature}, {"max_len", c.max_len}, {"greedy", c.greedy}, {"seed", c.seed}};
}

inline Theme theme_from_json(const json& j) {
  if (j.is_null()) return Theme::digits();
  if (j.is_string()) {
    const auto n = j.get<std::string>();
    if (n == "digits") return Theme::digits();
    return {n, "", {}};
  }
  if (!j.is_object()) throw BadRequest("theme must be a name or an object");
  Theme t;
  t.name = j.value("name", std::string("custom"));
  t.characters = j.value("characters", std::string());
  t.keywords = j.value("keywords", std::vector<std::string>{});
  return t;
}

inline FeatureRef feature_in_bundle(const ModelBundle& b, const std::string& text) {
  FeatureRef f;
  try {
    f = parse_feature_ref(text);
  } catch (const PreconditionError& e) {
    throw BadRequest(e.what());
  }
  if (!b.has(f.position) || f.index >= b.at(f.position).size()) throw NotFound("unknown feature " + to_string(f));
  return f;
}

// ---------------------------------------------------------------------------
// Artifacts

inline json bundle_manifest(const ModelBundle& b) {
  json dicts = json::array();
  for (const auto& [p, d] : b.dictionaries) {
    const auto kind = d.activation().kind;
    dicts.push_back({{"position", to_string(p)},
                     {"layer", p.layer},
                     {"site", std::string(site_name(p.site))},
                     {"D", d.size()},
                     {"d", d.model_dim()},
                     {"activation", activation_name(kind)},
                     {"k", (kind == ActivationKind::TopK || kind == ActivationKind::BatchTopK) ? json(d.activation().k) : json(nullptr)},
                     {"folded", d.folded()},
                     {"mean_activations", d.mean_activations().has_value()},
                     {"match_compatible", b.match_compatible(p)}});
  }
  json j = {{"name", b.name},
            {"layer_count", b.layer_count},
            {"model_dim", b.model_dim},
            {"seed", b.seed},
            {"provenance", b.provenance},
            {"has_model", b.model.has_value()},
            {"dictionaries", dicts}};
  if (b.model) j["vocab"] = b.model->config.vocab;
  return j;
}

inline json feature_scores(const ModelBundle& b, int layer, Site site, std::size_t index) {
  const SitePosition p{layer, site};
  if (!b.has(p) || index >= b.at(p).size()) throw NotFound("unknown feature " + to_string(FeatureRef{p, index}));
  if (site != Site::Res) throw BadRequest("similarity scores are defined for residual features");
  const auto s = site_scores(index, layer, b);
  auto one = [](const std::optional<SiteMatch>& m) {
    return m ? json{{"score", m->score}, {"index", m->index}} : json(nullptr);
  };
  return {{"feature", to_string(FeatureRef{p, index})}, {"layer", layer}, {"res", one(s.res)}, {"mlp", one(s.mlp)}, {"att", one(s.att)},
          {"evolution", evolution_name(classify_evolution(s, 0.5, 0.15))}};
}

struct FlowRequest {
  FeatureRef seed;
  FlowConfig config;
  GraphFormat format = GraphFormat::Json;
};

inline FlowRequest flow_request_from_json(const json& j) {
  if (!j.is_object() || !j.contains("seed")) throw BadRequest("flowgraph request needs a seed feature");
  FlowRequest r;
  try {
    r.seed = parse_feature_ref(j.at("seed").get<std::string>());
    r.config.t_res = j.value("t_res", r.config.t_res);
    r.config.t_module = j.value("t_module", r.config.t_module);
    r.config.forward = j.value("forward", r.config.forward);
    r.format = parse_graph_format(j.value("format", std::string("json")));
  } catch (const json::exception& e) {
    throw BadRequest(std::string("malformed flowgraph request: ") + e.what());
  } catch (const PreconditionError& e) {
    throw BadRequest(e.what());
  }
  return r;
}

/// The flow-graph artifact. CLI `flow` writes exactly these bytes.
inline std::string flow_artifact(const ModelBundle& b, const FlowRequest& r) {
  if (!b.has(r.seed.position) || r.seed.index >= b.at(r.seed.position).size()) throw NotFound("unknown feature " + to_string(r.seed));
  return export_graph(build_flow_graph(r.seed, b, r.config), r.format);
}

inline std::string match_artifact(const ModelBundle& b, SitePosition source, SitePosition target, std::size_t k, bool permutation) {
  const auto& a = b.matchable(source);
  const auto& t = b.matchable(target);
  if (permutation) {
    const auto p = permutation_match(a, t);
    return json{{"source", to_string(source)}, {"target", to_string(target)}, {"mapping", p.mapping}, {"objective", p.objective}}.dump() + "\n";
  }
  return to_json(match_top_k(a, t, k)).dump() + "\n";
}

// ---------------------------------------------------------------------------
// Deactivation

struct DeactivationTarget {
  std::string text;
  std::size_t token = 0;
  FeatureRef target;
};

/// Eligible: residual target above layer 0, in range, active at that token.
inline bool eligible(const DeactivationContext& ctx, const DeactivationTarget& t) {
  if (t.target.position.site != Site::Res || t.target.position.layer < 1) return false;
  if (t.token >= ctx.tokens.size() || !ctx.bundle->has(t.target.position)) return false;
  const auto& z = ctx.baseline.features.at(t.target.position);
  return t.target.index < z.cols() && z(t.token, t.target.index) > 0.0;
}

/// One report per eligible target, in input order; contexts are shared per text.
inline std::vector<DeactivationReport> deactivate_targets(const ModelBundle& b, const std::vector<DeactivationTarget>& targets, Strategy strategy,
                                                          double r, PredecessorMaps& maps, std::uint64_t seed) {
  std::map<std::string, DeactivationContext> contexts;
  Rng rng(seed);
  std::vector<DeactivationReport> out;
  for (const auto& t : targets) {
    auto it = contexts.find(t.text);
    if (it == contexts.end()) {
      const auto tokens = encode_bytes(t.text);
      if (tokens.size() < 2) continue;
      it = contexts.emplace(t.text, make_context(b, tokens)).first;
    }
    if (!eligible(it->second, t)) continue;
    out.push_back(run_deactivation(it->second, t.target, t.token, strategy, r, maps, &rng));
  }
  return out;
}

/// Every active residual feature (layer >= 1) at the sampled tokens.
inline std::vector<DeactivationTarget> sampled_targets(const ModelBundle& b, const std::vector<std::string>& corpus, const SampleProtocol& protocol) {
  std::vector<DeactivationTarget> out;
  for (const auto& s : sample_corpus(corpus, protocol)) {
    auto rec = forward(b.toy_model(), s.tokens);
    annotate(rec, b);
    const auto text = decode_bytes(s.tokens);
    for (int l = 1; l < b.layer_count; ++l) {
      auto it = rec.features.find({l, Site::Res});
      if (it == rec.features.end()) continue;
      for (auto t : s.positions) {
        for (std::size_t f = 0; f < it->second.cols(); ++f) {
          if (it->second(t, f) > 0.0) out.push_back({text, t, {{l, Site::Res}, f}});
        }
      }
    }
  }
  return out;
}

inline std::string deactivation_lines(const std::vector<DeactivationReport>& reports) {
  std::string s;
  for (const auto& r : reports) s += featureflow::to_json(r).dump() + "\n";
  return s;
}

/// Registers Pearson maps computed over a corpus.
inline void add_pearson(PredecessorMaps& maps, const ModelBundle& b, const std::vector<std::string>& corpus, std::size_t max_tokens = 64) {
  const auto acts = collect_activations(b, corpus, max_tokens);
  for (auto& [key, m] : pearson_maps(b, acts)) maps.set_pearson(key.layer, key.site, std::move(m));
}

// ---------------------------------------------------------------------------
// Steering

struct SteerRequest {
  SteeringPlan plan;
  SamplerConfig sampler;
  std::string prompt = "I think ";
  Theme theme = Theme::digits();
  ScoreMode mode = ScoreMode::Activation;
  bool compare_baseline = false;
};

/// Body keys: plan, optional r (switches to rescale mode), sampler, prompt,
/// theme, score_mode, compare_baseline.
inline SteerRequest steer_request_from_json(const ModelBundle& b, const json& body) {
  if (!body.is_object() || !body.contains("plan")) throw BadRequest("steer needs a plan");
  SteerRequest r;
  try {
    r.plan = steering_plan_from_json(body.at("plan"));
    if (body.contains("r")) {
      r.plan.mode = SteeringMode::Rescale;
      r.plan.r = body.at("r").get<double>();
    }
    r.plan.validate(b);
    r.sampler = sampler_from_json(body.value("sampler", json()));
    r.prompt = body.value("prompt", r.prompt);
    r.theme = theme_from_json(body.value("theme", json()));
    r.mode = r.plan.mode == SteeringMode::Add ? ScoreMode::Activation : ScoreMode::Deactivation;
    if (body.contains("score_mode")) r.mode = parse_score_mode(body.at("score_mode").get<std::string>());
    r.compare_baseline = body.value("compare_baseline", false);
  } catch (const json::exception& e) {
    throw BadRequest(std::string("malformed steer request: ") + e.what());
  } catch (const PreconditionError& e) {
    throw BadRequest(e.what());
  }
  return r;
}

/// `degraded` is set when a judge scorer came back empty.
inline json steer_response(const ModelBundle& b, const SteerRequest& r, Scorer& scorer, bool is_judge) {
  const auto text = apply_steering(b, r.plan, r.prompt, r.sampler);
  const auto score = scorer.score(text, r.theme, r.mode);
  json out = {{"text", text},
              {"prompt", r.prompt},
              {"sampler", to_json(r.sampler)},
              {"plan", featureflow::to_json(r.plan)},
              {"scorer", scorer.name()},
              {"score", featureflow::to_json(score)},
              {"degraded", is_judge && !score}};
  if (is_judge && !score) {
    if (auto* j = dynamic_cast<JudgeClient*>(&scorer)) out["judge_error"] = j->last_error();
  }
  if (r.compare_baseline) out["baseline_text"] = generate_text(b, r.prompt, r.sampler);
  return out;
}

// ---------------------------------------------------------------------------
// Run registry: one directory per run holding run.json, config.json and
// artifacts. Completed runs are never rewritten.

struct RunRecord {
  std::string id;
  std::string kind;
  std::string config_hash;
  std::string status;  // running, completed, failed
  std::vector<std::string> artifacts;
  std::string created;
  std::string finished;
  std::string error;
};

inline json to_json(const RunRecord& r) {
  json j = {{"id", r.id},         {"kind", r.kind},           {"config_hash", r.config_hash}, {"status", r.status},
            {"artifacts", r.artifacts}, {"created", r.created}, {"finished", r.finished.empty() ? json(nullptr) : json(r.finished)}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

inline RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.id = j.at("id").get<std::string>();
  r.kind = j.at("kind").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.status = j.at("status").get<std::string>();
  r.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  r.created = j.at("created").get<std::string>();
  if (!j.at("finished").is_null()) r.finished = j.at("finished").get<std::string>();
  r.error = j.value("error", std::string());
  return r;
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline bool valid_kind(const std::string& k) {
  return k == "flow" || k == "deactivate" || k == "steer" || k == "sweep" || k == "stats";
}

class RunRegistry {
 public:
  explicit RunRegistry(std::filesystem::path root) : root_(std::move(root)) { std::filesystem::create_directories(root_); }

  const std::filesystem::path& root() const { return root_; }

  /// New running record. An explicit id that already exists is a conflict;
  /// otherwise the next free "<kind>-NNNNNN" is taken.
  RunRecord begin(const std::string& kind, const json& config, const std::optional<std::string>& requested = std::nullopt) {
    if (!valid_kind(kind)) throw BadRequest("unknown run kind '" + kind + "'");
    std::lock_guard lock(mu_);
    RunRecord r;
    r.kind = kind;
    r.config_hash = config_hash(config);
    r.status = "running";
    r.created = utc_now();
    if (requested) {
      if (!std::regex_match(*requested, std::regex("[A-Za-z0-9_.-]{1,64}"))) throw BadRequest("run id must be 1-64 characters of [A-Za-z0-9_.-]");
      if (!std::filesystem::create_directory(root_ / *requested)) throw Conflict("run id '" + *requested + "' already exists");
      r.id = *requested;
    } else {
      for (std::size_t n = next_index(kind);; ++n) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%06zu", n);
        const auto id = kind + "-" + buf;
        if (std::filesystem::create_directory(root_ / id)) {
          r.id = id;
          break;
        }
      }
    }
    std::ofstream(root_ / r.id / "config.json") << config.dump(2) << "\n";
    save(r);
    return r;
  }

  void write_artifact(RunRecord& r, const std::string& name, const std::string& content) {
    std::lock_guard lock(mu_);
    if (r.status != "running") throw Error("run " + r.id + " is complete; artifacts are immutable");
    std::ofstream(root_ / r.id / name, std::ios::binary) << content;
    r.artifacts.push_back(name);
    save(r);
  }

  void finish(RunRecord& r, bool ok, const std::string& error = {}) {
    std::lock_guard lock(mu_);
    if (r.status != "running") throw Error("run " + r.id + " already finished");
    r.status = ok ? "completed" : "failed";
    r.error = error;
    r.finished = utc_now();
    save(r);
  }

  std::optional<RunRecord> get(const std::string& id) const {
    std::lock_guard lock(mu_);
    if (id.find('/') != std::string::npos || id.find("..") != std::string::npos) return std::nullopt;
    std::ifstream in(root_ / id / "run.json");
    if (!in) return std::nullopt;
    try {
      return run_record_from_json(json::parse(in));
    } catch (const json::exception&) {
      return std::nullopt;
    }
  }

  std::vector<RunRecord> list() const {
    std::vector<std::string> ids;
    {
      std::lock_guard lock(mu_);
      for (const auto& e : std::filesystem::directory_iterator(root_)) {
        if (e.is_directory() && std::filesystem::exists(e.path() / "run.json")) ids.push_back(e.path().filename().string());
      }
    }
    std::sort(ids.begin(), ids.end());
    std::vector<RunRecord> out;
    for (const auto& id : ids) {
      if (auto r = get(id)) out.push_back(*r);
    }
    return out;
  }

  std::optional<std::string> artifact(const std::string& id, const std::string& name) const {
    const auto r = get(id);
    if (!r || std::find(r->artifacts.begin(), r->artifacts.end(), name) == r->artifacts.end()) return std::nullopt;
    std::ifstream in(root_ / id / name, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  }

 private:
  std::size_t next_index(const std::string& kind) const {
    std::size_t n = 1;
    const std::regex re(kind + "-(\\d{6})");
    for (const auto& e : std::filesystem::directory_iterator(root_)) {
      std::smatch m;
      const auto name = e.path().filename().string();
      if (std::regex_match(name, m, re)) n = std::max(n, static_cast<std::size_t>(std::stoul(m[1])) + 1);
    }
    return n;
  }

  // Atomic replace so concurrent readers never see a half-written record.
  void save(const RunRecord& r) const {
    const auto dir = root_ / r.id;
    const auto tmp = dir / "run.json.tmp";
    std::ofstream(tmp) << to_json(r).dump(2) << "\n";
    std::filesystem::rename(tmp, dir / "run.json");
  }

  std::filesystem::path root_;
  mutable std::mutex mu_;
};

// ---------------------------------------------------------------------------
// HTTP service

struct ServiceConfig {
  std::filesystem::path runs_dir = "runs";
  std::optional<JudgeConfig> judge;                 // nullopt: builtin scorer only
  std::optional<std::vector<std::string>> corpus;   // enables the Pearson strategy
  std::optional<std::filesystem::path> static_dir;  // optional UI bundle
};

class Service {
 public:
  Service(const ModelBundle& bundle, ServiceConfig cfg)
      : bundle_(bundle), cfg_(std::move(cfg)), registry_(cfg_.runs_dir), maps_(bundle) {
    if (cfg_.judge) judge_ = std::make_unique<JudgeClient>(*cfg_.judge);
  }

  ~Service() { wait_background(); }

  RunRegistry& registry() { return registry_; }

  void wait_background() {
    std::vector<std::thread> ts;
    {
      std::lock_guard lock(bg_mu_);
      ts.swap(background_);
    }
    for (auto& t : ts) t.join();
  }

  void mount(httplib::Server& s) {
    s.Get("/api/bundle", [this](const httplib::Request&, httplib::Response& res) { reply(res, [&] { return bundle_manifest(bundle_); }); });
    s.Get(R"(/api/features/(\d+)/(res|mlp|att)/(\d+)/scores)", [this](const httplib::Request& req, httplib::Response& res) {
      reply(res, [&] {
        return feature_scores(bundle_, std::stoi(req.matches[1]), parse_site(std::string(req.matches[2])),
                              static_cast<std::size_t>(std::stoull(req.matches[3])));
      });
    });
    s.Post("/api/flowgraph", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = parse_body(req);
        const auto fr = flow_request_from_json(body);
        auto run = registry_.begin("flow", body, requested_id(body));
        const auto art = flow_artifact(bundle_, fr);
        registry_.write_artifact(run, fr.format == GraphFormat::Json ? "graph.json" : "graph.dot", art);
        registry_.finish(run, true);
        res.set_header("X-Run-Id", run.id);
        res.set_content(art, fr.format == GraphFormat::Json ? "application/json" : "text/vnd.graphviz");
      });
    });
    s.Post("/api/deactivate", [this](const httplib::Request& req, httplib::Response& res) { reply(res, [&] { return deactivate(parse_body(req)); }); });
    s.Post("/api/generate", [this](const httplib::Request& req, httplib::Response& res) {
      reply(res, [&] {
        const auto body = parse_body(req);
        const auto sc = sampler_from_json(body.value("sampler", json()));
        const auto prompt = body.value("prompt", std::string("I think "));
        return json{{"text", generate_text(bundle_, prompt, sc)}, {"prompt", prompt}, {"sampler", to_json(sc)}};
      });
    });
    s.Post("/api/steer", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto out = steer(parse_body(req));
        if (out.value("degraded", false)) res.status = 503;
        res.set_content(out.dump(), "application/json");
      });
    });
    s.Post("/api/sweep", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto id = sweep_async(parse_body(req));
        res.status = 202;
        res.set_content(json{{"run_id", id}, {"status", "running"}, {"progress", "/api/runs/" + id}}.dump(), "application/json");
      });
    });
    s.Get("/api/runs", [this](const httplib::Request&, httplib::Response& res) {
      reply(res, [&] {
        json arr = json::array();
        for (const auto& r : registry_.list()) arr.push_back(to_json(r));
        return arr;
      });
    });
    s.Get(R"(/api/runs/([A-Za-z0-9_.-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      reply(res, [&] {
        const auto r = registry_.get(req.matches[1]);
        if (!r) throw NotFound("unknown run " + std::string(req.matches[1]));
        return to_json(*r);
      });
    });
    s.Get(R"(/api/runs/([A-Za-z0-9_.-]+)/artifacts/([A-Za-z0-9_.-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto a = registry_.artifact(req.matches[1], req.matches[2]);
        if (!a) throw NotFound("unknown artifact");
        res.set_content(*a, "application/octet-stream");
      });
    });
    if (cfg_.static_dir) s.set_mount_point("/", cfg_.static_dir->string());
  }

  json deactivate(const json& body) {
    if (!body.contains("text") || !body.contains("target")) throw BadRequest("deactivate needs text and target");
    DeactivationTarget t;
    Strategy strategy;
    double r;
    std::uint64_t seed;
    try {
      t.text = body.at("text").get<std::string>();
      t.token = body.value("token", std::size_t{1});
      strategy = parse_strategy(body.value("strategy", std::string("top1")));
      r = body.value("r", 0.0);
      seed = body.value("seed", std::uint64_t{0});
    } catch (const json::exception& e) {
      throw BadRequest(std::string("malformed deactivate request: ") + e.what());
    } catch (const PreconditionError& e) {
      throw BadRequest(e.what());
    }
    t.target = feature_in_bundle(bundle_, body.at("target").get<std::string>());
    if (strategy == Strategy::Pearson) ensure_pearson();
    const auto tokens = encode_bytes(t.text);
    if (tokens.size() < 2) throw BadRequest("text needs at least two tokens");
    auto run = registry_.begin("deactivate", body, requested_id(body));
    try {
      auto ctx = make_context(bundle_, tokens);
      if (!eligible(ctx, t)) throw BadRequest("target " + to_string(t.target) + " is not active at token " + std::to_string(t.token));
      Rng rng(seed);
      const auto rep = run_deactivation(ctx, t.target, t.token, strategy, r, maps_, &rng);
      auto j = featureflow::to_json(rep);
      registry_.write_artifact(run, "report.json", j.dump(2) + "\n");
      registry_.finish(run, true);
      j["run_id"] = run.id;
      return j;
    } catch (const std::exception& e) {
      registry_.finish(run, false, e.what());
      throw;
    }
  }

  json steer(const json& body) {
    auto req = steer_request_from_json(bundle_, body);
    auto run = registry_.begin("steer", body, requested_id(body));
    Scorer& scorer = pick_scorer(body);
    auto out = steer_response(bundle_, req, scorer, &scorer == judge_.get());
    registry_.write_artifact(run, "steer.json", out.dump(2) + "\n");
    registry_.finish(run, true);
    out["run_id"] = run.id;
    return out;
  }

  std::string sweep_async(const json& body) {
    if (!body.contains("plan") || !body.contains("values")) throw BadRequest("sweep needs a plan and values");
    SweepConfig cfg;
    try {
      cfg.base = steering_plan_from_json(body.at("plan"));
      cfg.values = body.at("values").get<std::vector<double>>();
      cfg.layers = body.value("layers", std::vector<int>{});
      cfg.generations = body.value("generations", std::size_t{10});
      cfg.prompt = body.value("prompt", cfg.prompt);
      cfg.sampler = sampler_from_json(body.value("sampler", json()));
      cfg.theme = theme_from_json(body.value("theme", json()));
      const auto strategies = body.value("strategies", std::vector<std::string>{"single", "cumulative"});
      cfg.single = std::find(strategies.begin(), strategies.end(), "single") != strategies.end();
      cfg.cumulative = std::find(strategies.begin(), strategies.end(), "cumulative") != strategies.end();
      if (body.value("mode", std::string("add")) == "rescale") cfg.base.mode = SteeringMode::Rescale;
      cfg.score_mode = cfg.base.mode == SteeringMode::Add ? ScoreMode::Activation : ScoreMode::Deactivation;
      cfg.base.validate(bundle_);
    } catch (const json::exception& e) {
      throw BadRequest(std::string("malformed sweep request: ") + e.what());
    } catch (const PreconditionError& e) {
      throw BadRequest(e.what());
    }
    auto run = registry_.begin("sweep", body, requested_id(body));
    Scorer* scorer = &pick_scorer(body);
    std::lock_guard lock(bg_mu_);
    background_.emplace_back([this, cfg, run, scorer]() mutable {
      try {
        const auto rep = steering_sweep(bundle_, cfg, *scorer);
        registry_.write_artifact(run, "sweep.jsonl", sweep_lines(rep));
        registry_.finish(run, true);
      } catch (const std::exception& e) {
        registry_.finish(run, false, e.what());
      }
    });
    return run.id;
  }

 private:
  static json parse_body(const httplib::Request& req) {
    auto j = json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw BadRequest("request body must be a JSON object");
    return j;
  }

  static std::optional<std::string> requested_id(const json& body) {
    if (!body.contains("run_id")) return std::nullopt;
    if (!body["run_id"].is_string()) throw BadRequest("run_id must be a string");
    return body["run_id"].get<std::string>();
  }

  Scorer& pick_scorer(const json& body) {
    if (judge_ && body.value("scorer", std::string("judge")) != "builtin") return *judge_;
    return builtin_;
  }

  void ensure_pearson() {
    std::lock_guard lock(pearson_mu_);
    if (pearson_ready_) return;
    if (!cfg_.corpus) throw BadRequest("the pearson strategy needs the server to be started with a corpus");
    add_pearson(maps_, bundle_, *cfg_.corpus);
    pearson_ready_ = true;
  }

  template <class F>
  static void guarded(httplib::Response& res, F&& f) {
    auto fail = [&](int status, const std::string& msg) {
      res.status = status;
      res.set_content(json{{"error", msg}}.dump(), "application/json");
    };
    try {
      f();
    } catch (const BadRequest& e) {
      fail(400, e.what());
    } catch (const NotFound& e) {
      fail(404, e.what());
    } catch (const Conflict& e) {
      fail(409, e.what());
    } catch (const PreconditionError& e) {
      fail(400, e.what());
    } catch (const IncompatibleError& e) {
      fail(400, e.what());
    } catch (const std::exception& e) {
      fail(500, e.what());
    }
  }

  template <class F>
  static void reply(httplib::Response& res, F&& f) {
    guarded(res, [&] { res.set_content(f().dump(), "application/json"); });
  }

  const ModelBundle& bundle_;
  ServiceConfig cfg_;
  RunRegistry registry_;
  PredecessorMaps maps_;
  BuiltinScorer builtin_;
  std::unique_ptr<JudgeClient> judge_;
  std::mutex pearson_mu_;
  bool pearson_ready_ = false;
  std::mutex bg_mu_;
  std::vector<std::thread> background_;
};

}  // namespace featureflow::gateway
