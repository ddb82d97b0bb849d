// featureflow: command-line front end over the library and the HTTP service.

#include <csignal>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "featureflow/gateway.hpp"
#include "featureflow/synth.hpp"
#include "featureflow/transbridge.hpp"

using namespace featureflow;
using nlohmann::json;

namespace {

void write_out(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::cout << content << std::flush;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << content;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read " + path);
  auto j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw LoadError(path + " is not valid JSON");
  return j;
}

std::string bundle_path(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("FEATUREFLOW_BUNDLE")) return env;
  throw PreconditionError("no bundle: pass --bundle or set FEATUREFLOW_BUNDLE");
}

// Loaded corpus, or a synthetic one seeded by --seed when none is given.
std::vector<std::string> corpus_or_synth(const std::string& path, std::size_t texts, std::uint64_t seed) {
  if (!path.empty()) return load_corpus(path);
  return synth_corpus(texts, 48, seed);
}

std::string jsonl(const std::vector<json>& rows) {
  std::string s;
  for (const auto& r : rows) s += r.dump() + "\n";
  return s;
}

struct Common {
  std::string bundle;
  std::string out;
  std::uint64_t seed = 0;
};

void add_common(CLI::App* sub, Common& c, bool needs_bundle = true) {
  if (needs_bundle) sub->add_option("--bundle", c.bundle, "Bundle directory (default $FEATUREFLOW_BUNDLE)");
  sub->add_option("--out", c.out, "Output file (default stdout)");
  sub->add_option("--seed", c.seed, "Seed for every random choice");
}

httplib::Server* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"featureflow: track and steer sparse features across layers"};
  app.require_subcommand(1);

  // match
  Common match_c;
  std::string m_source, m_target, m_corpus;
  std::size_t m_k = 1, m_texts = 64;
  bool m_perm = false, m_compare = false;
  auto* match = app.add_subcommand("match", "Match two dictionaries (top-k cosine, permutation, or a bridge comparison)");
  add_common(match, match_c);
  match->add_option("--source", m_source, "Source position, e.g. 1:res")->required();
  match->add_option("--target", m_target, "Target position, e.g. 2:res")->required();
  match->add_option("--k", m_k, "Top-k entries per source feature");
  match->add_flag("--permutation", m_perm, "Solve the one-to-one assignment instead");
  match->add_flag("--compare", m_compare, "Rank transition variants by explained variance of the bridge");
  match->add_option("--corpus", m_corpus, "Corpus for --compare (default: synthetic)");
  match->add_option("--texts", m_texts, "Synthetic corpus size for --compare");

  // flow
  Common flow_c;
  std::string f_seed, f_format = "json";
  double f_tres = 0.5, f_tmod = 0.15;
  bool f_backward_only = false;
  auto* flow = app.add_subcommand("flow", "Build a flow graph from a seed feature");
  add_common(flow, flow_c);
  flow->add_option("--seed-feature", f_seed, "Seed feature LAYER:SITE:INDEX")->required();
  flow->add_option("--t-res", f_tres, "Residual-link threshold");
  flow->add_option("--t-module", f_tmod, "Module-link threshold");
  flow->add_option("--format", f_format, "json or dot")->check(CLI::IsMember({"json", "dot"}));
  flow->add_flag("--backward-only", f_backward_only, "Do not extend the spine past the seed");

  // groups / stats share the sampling options
  Common groups_c, stats_c;
  std::string g_corpus, g_matcher = "cosine", s_corpus;
  SampleProtocol g_proto, s_proto;
  auto* groups = app.add_subcommand("groups", "Per-layer origin-group table (line-delimited)");
  add_common(groups, groups_c);
  groups->add_option("--corpus", g_corpus, "Corpus file or directory (default: synthetic)");
  groups->add_option("--matcher", g_matcher, "cosine or pearson")->check(CLI::IsMember({"cosine", "pearson"}));
  groups->add_option("--texts", g_proto.texts, "Texts to sample");
  groups->add_option("--tokens", g_proto.tokens_per_text, "Tokens per text");
  auto* stats = app.add_subcommand("stats", "Group separation report and intersection matrix (line-delimited)");
  add_common(stats, stats_c);
  stats->add_option("--corpus", s_corpus, "Corpus file or directory (default: synthetic)");
  stats->add_option("--texts", s_proto.texts, "Texts to sample");
  stats->add_option("--tokens", s_proto.tokens_per_text, "Tokens per text");

  // deactivate
  Common deact_c;
  std::string d_targets, d_corpus, d_strategy = "top1";
  double d_r = 0.0;
  SampleProtocol d_proto;
  d_proto.texts = 20;
  auto* deact = app.add_subcommand("deactivate", "Deactivate features through their predecessors");
  add_common(deact, deact_c);
  deact->add_option("--targets", d_targets, "JSONL of {text, token, target}; default: sample active features from a corpus");
  deact->add_option("--corpus", d_corpus, "Corpus to sample targets from (default: synthetic)");
  deact->add_option("--texts", d_proto.texts, "Texts to sample");
  deact->add_option("--tokens", d_proto.tokens_per_text, "Tokens per text");
  deact->add_option("--strategy", d_strategy, "permutation, top1, top5, random or pearson");
  deact->add_option("--r", d_r, "Rescaling coefficient");

  // steer
  Common steer_c;
  std::string st_plan, st_prompt = "I think ", st_scorer = "builtin", st_theme = "digits";
  std::optional<double> st_r;
  std::size_t st_len = 36;
  bool st_greedy = false, st_baseline = false;
  auto* steer = app.add_subcommand("steer", "Generate text under a steering plan and score it");
  add_common(steer, steer_c);
  steer->add_option("--plan", st_plan, "Steering plan JSON")->required();
  steer->add_option("--r", st_r, "Rescale the plan's features by r instead of adding them");
  steer->add_option("--prompt", st_prompt, "Prompt text");
  steer->add_option("--max-len", st_len, "Tokens to generate");
  steer->add_flag("--greedy", st_greedy, "Greedy decoding");
  steer->add_option("--scorer", st_scorer, "builtin or judge (JUDGE_URL, JUDGE_API_KEY)")->check(CLI::IsMember({"builtin", "judge"}));
  steer->add_option("--theme", st_theme, "Theme name for scoring");
  steer->add_flag("--baseline", st_baseline, "Also generate the unsteered text");

  // sweep
  Common sweep_c;
  std::string sw_plan, sw_scorer = "builtin", sw_mode = "add";
  std::vector<double> sw_values;
  std::vector<int> sw_layers;
  std::vector<std::string> sw_strategies{"single", "cumulative"};
  std::size_t sw_gens = 10, sw_len = 36;
  auto* sweep = app.add_subcommand("sweep", "Steering sweep over strengths and end layers (line-delimited)");
  add_common(sweep, sweep_c);
  sweep->add_option("--plan", sw_plan, "Base steering plan JSON")->required();
  sweep->add_option("--values", sw_values, "Strengths s (add) or coefficients r (rescale)")->required();
  sweep->add_option("--layers", sw_layers, "End layers (default: every layer of the span)");
  sweep->add_option("--strategies", sw_strategies, "single and/or cumulative");
  sweep->add_option("--generations", sw_gens, "Generations per cell");
  sweep->add_option("--max-len", sw_len, "Tokens per generation");
  sweep->add_option("--mode", sw_mode, "add or rescale")->check(CLI::IsMember({"add", "rescale"}));
  sweep->add_option("--scorer", sw_scorer, "builtin or judge")->check(CLI::IsMember({"builtin", "judge"}));

  // synth
  Common synth_c;
  PlantedConfig sy;
  std::string sy_corpus_out;
  std::size_t sy_corpus_texts = 200;
  auto* synth = app.add_subcommand("synth", "Write a planted synthetic bundle");
  add_common(synth, synth_c, false);
  synth->add_option("--layers", sy.layers, "Layer count");
  synth->add_option("--d", sy.d, "Model dimension");
  synth->add_option("--dict-size", sy.dict_size, "Features per dictionary");
  synth->add_option("--token-features", sy.token_features, "Planted token features");
  synth->add_option("--decoys", sy.decoys, "Near-duplicate residual features per live feature");
  synth->add_option("--noise", sy.noise, "Decoder perturbation std-dev");
  synth->add_option("--corpus-out", sy_corpus_out, "Also write a synthetic corpus (one text per line)");
  synth->add_option("--corpus-texts", sy_corpus_texts, "Texts in that corpus");

  // train-sae
  Common train_c;
  std::string t_site, t_corpus;
  TrainConfig tc;
  std::size_t t_texts = 64;
  auto* train = app.add_subcommand("train-sae", "Train a TopK SAE on one hook of the toy model and write an updated bundle");
  add_common(train, train_c);
  train->add_option("--site", t_site, "Position, e.g. 1:res")->required();
  train->add_option("--corpus", t_corpus, "Corpus (default: synthetic)");
  train->add_option("--texts", t_texts, "Synthetic corpus size");
  train->add_option("--dict-size", tc.dict_size, "Dictionary size");
  train->add_option("--k", tc.k, "Active features per sample");
  train->add_option("--steps", tc.steps, "Optimisation steps");
  train->add_option("--lr", tc.learning_rate, "Learning rate");

  // serve
  Common serve_c;
  std::string sv_runs, sv_corpus, sv_static, sv_host = "127.0.0.1";
  int sv_port = gateway::kDefaultPort;
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  add_common(serve, serve_c);
  serve->add_option("--runs-dir", sv_runs, "Run registry directory (default $FEATUREFLOW_RUNS_DIR or ./runs)");
  serve->add_option("--port", sv_port, "Port");
  serve->add_option("--host", sv_host, "Bind address");
  serve->add_option("--corpus", sv_corpus, "Corpus enabling the pearson strategy");
  serve->add_option("--static", sv_static, "Directory of UI assets to mount at /");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*synth) {
      sy.seed = synth_c.seed;
      if (synth_c.out.empty()) throw PreconditionError("synth needs --out DIR");
      const auto planted = synth_planted_bundle(sy);
      save_bundle(planted.bundle, synth_c.out);
      if (!sy_corpus_out.empty()) {
        std::string s;
        for (const auto& t : synth_corpus(sy_corpus_texts, 48, synth_c.seed)) s += t + "\n";
        write_out(sy_corpus_out, s);
      }
      std::cerr << "wrote " << planted.bundle.dictionaries.size() << " dictionaries to " << synth_c.out << "\n";
      return 0;
    }

    if (*serve) {
      const auto bundle = load_bundle(bundle_path(serve_c.bundle));
      gateway::ServiceConfig cfg;
      if (!sv_runs.empty()) cfg.runs_dir = sv_runs;
      else if (const char* env = std::getenv("FEATUREFLOW_RUNS_DIR")) cfg.runs_dir = env;
      cfg.judge = JudgeConfig::from_env();
      if (!sv_corpus.empty()) cfg.corpus = load_corpus(sv_corpus);
      if (!sv_static.empty()) cfg.static_dir = sv_static;
      gateway::Service service(bundle, cfg);
      httplib::Server server;
      service.mount(server);
      g_server = &server;
      std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
      std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
      std::cerr << "serving " << bundle.name << " on http://" << sv_host << ":" << sv_port << " (runs in " << cfg.runs_dir.string() << ")\n";
      if (!server.listen(sv_host, sv_port)) throw Error("cannot bind " + sv_host + ":" + std::to_string(sv_port));
      return 0;
    }

    if (*flow) {
      const auto bundle = load_bundle(bundle_path(flow_c.bundle));
      gateway::FlowRequest r;
      r.seed = parse_feature_ref(f_seed);
      r.config.t_res = f_tres;
      r.config.t_module = f_tmod;
      r.config.forward = !f_backward_only;
      r.format = parse_graph_format(f_format);
      write_out(flow_c.out, gateway::flow_artifact(bundle, r));
      return 0;
    }

    if (*match) {
      const auto bundle = load_bundle(bundle_path(match_c.bundle));
      const auto src = parse_position(m_source), tgt = parse_position(m_target);
      if (!m_compare) {
        write_out(match_c.out, gateway::match_artifact(bundle, src, tgt, m_k, m_perm));
        return 0;
      }
      // Hidden states at both hooks over every non-initial token.
      const auto corpus = corpus_or_synth(m_corpus, m_texts, match_c.seed);
      const auto& model = bundle.toy_model();
      std::vector<double> hs, ht;
      std::size_t rows = 0;
      for (const auto& text : corpus) {
        const auto tokens = encode_bytes(std::string_view(text).substr(0, 64));
        if (tokens.size() < 2) continue;
        const auto rec = forward(model, tokens);
        for (std::size_t t = 1; t < tokens.size(); ++t) {
          const auto a = rec.hook(src, t), b = rec.hook(tgt, t);
          hs.insert(hs.end(), a.begin(), a.end());
          ht.insert(ht.end(), b.begin(), b.end());
          ++rows;
        }
      }
      const MatrixD h_src(rows, bundle.model_dim, std::move(hs)), h_tgt(rows, bundle.model_dim, std::move(ht));
      CompareOptions opts;
      opts.permutation = bundle.matchable(src).size() == bundle.matchable(tgt).size();
      const auto rep = compare_transitions(bundle.matchable(src), bundle.matchable(tgt), h_src, h_tgt, opts);
      write_out(match_c.out, to_json(rep).dump(2) + "\n");
      return 0;
    }

    if (*groups || *stats) {
      const auto& c = *groups ? groups_c : stats_c;
      auto proto = *groups ? g_proto : s_proto;
      proto.seed = c.seed;
      const auto bundle = load_bundle(bundle_path(c.bundle));
      const auto corpus = corpus_or_synth(*groups ? g_corpus : s_corpus, proto.texts, c.seed);
      const auto sample = sample_corpus(corpus, proto);
      const bool pearson = *groups && parse_matcher(g_matcher) == Matcher::Pearson;
      const auto maps = pearson ? OriginMapSet::from_pearson(pearson_maps(bundle, collect_activations(bundle, corpus, proto.max_tokens)))
                                : OriginMapSet::cosine(bundle);
      const auto dist = group_distribution(bundle, sample, maps);
      std::vector<json> rows;
      if (*groups) {
        const auto table = to_json(dist);
        for (const auto& l : table["layers"]) rows.push_back({{"record", "layer"}, {"matcher", g_matcher}, {"layer", l["layer"]},
                                                                      {"instances", l["instances"]}, {"percent", l["percent"]}});
        rows.push_back({{"record", "total"}, {"from_nowhere_percent", dist.nowhere_share()}, {"instances", dist.instances.size()}});
      } else {
        for (const auto& e : group_separation_report(group_scores(bundle, dist))) {
          auto j = to_json(e);
          j["record"] = "separation";
          rows.push_back(j);
        }
        try {
          rows.push_back({{"record", "intersection"}, {"matrix", to_json(intersection_matrix(labels_by_feature(dist)))}});
        } catch (const PreconditionError& e) {
          std::cerr << "intersection matrix skipped: " << e.what() << "\n";
        }
      }
      write_out(c.out, jsonl(rows));
      return 0;
    }

    if (*deact) {
      const auto bundle = load_bundle(bundle_path(deact_c.bundle));
      const auto strategy = parse_strategy(d_strategy);
      std::vector<gateway::DeactivationTarget> targets;
      d_proto.seed = deact_c.seed;
      std::optional<std::vector<std::string>> corpus;
      if (!d_targets.empty()) {
        std::ifstream in(d_targets);
        if (!in) throw LoadError("cannot read " + d_targets);
        for (std::string line; std::getline(in, line);) {
          if (line.empty()) continue;
          const auto j = json::parse(line);
          targets.push_back({j.at("text").get<std::string>(), j.at("token").get<std::size_t>(), parse_feature_ref(j.at("target").get<std::string>())});
        }
      } else {
        corpus = corpus_or_synth(d_corpus, d_proto.texts, deact_c.seed);
        targets = gateway::sampled_targets(bundle, *corpus, d_proto);
      }
      PredecessorMaps maps(bundle);
      if (strategy == Strategy::Pearson) {
        if (!corpus) corpus = corpus_or_synth(d_corpus, 200, deact_c.seed);
        gateway::add_pearson(maps, bundle, *corpus);
      }
      const auto reports = gateway::deactivate_targets(bundle, targets, strategy, d_r, maps, deact_c.seed);
      write_out(deact_c.out, gateway::deactivation_lines(reports));
      std::cerr << reports.size() << " eligible of " << targets.size() << " targets; summary "
                << to_json(summarize(reports)).dump() << "\n";
      return 0;
    }

    if (*steer) {
      const auto bundle = load_bundle(bundle_path(steer_c.bundle));
      json body = {{"plan", read_json_file(st_plan)},
                   {"prompt", st_prompt},
                   {"theme", st_theme},
                   {"compare_baseline", st_baseline},
                   {"sampler", {{"seed", steer_c.seed}, {"max_len", st_len}, {"greedy", st_greedy}}}};
      if (st_r) body["r"] = *st_r;
      const auto req = gateway::steer_request_from_json(bundle, body);
      BuiltinScorer builtin;
      std::unique_ptr<JudgeClient> judge;
      if (st_scorer == "judge") {
        auto cfg = JudgeConfig::from_env();
        if (!cfg) throw PreconditionError("judge scorer needs JUDGE_URL (and JUDGE_API_KEY)");
        judge = std::make_unique<JudgeClient>(*cfg);
      }
      Scorer& scorer = judge ? static_cast<Scorer&>(*judge) : builtin;
      const auto out = gateway::steer_response(bundle, req, scorer, judge != nullptr);
      write_out(steer_c.out, out.dump(2) + "\n");
      return out["degraded"].get<bool>() ? 3 : 0;
    }

    if (*sweep) {
      const auto bundle = load_bundle(bundle_path(sweep_c.bundle));
      SweepConfig cfg;
      cfg.base = steering_plan_from_json(read_json_file(sw_plan));
      if (sw_mode == "rescale") cfg.base.mode = SteeringMode::Rescale;
      cfg.base.validate(bundle);
      cfg.values = sw_values;
      cfg.layers = sw_layers;
      cfg.generations = sw_gens;
      cfg.sampler.seed = sweep_c.seed;
      cfg.sampler.max_len = sw_len;
      cfg.single = std::find(sw_strategies.begin(), sw_strategies.end(), "single") != sw_strategies.end();
      cfg.cumulative = std::find(sw_strategies.begin(), sw_strategies.end(), "cumulative") != sw_strategies.end();
      cfg.score_mode = cfg.base.mode == SteeringMode::Add ? ScoreMode::Activation : ScoreMode::Deactivation;
      BuiltinScorer builtin;
      std::unique_ptr<JudgeClient> judge;
      if (sw_scorer == "judge") {
        auto jc = JudgeConfig::from_env();
        if (!jc) throw PreconditionError("judge scorer needs JUDGE_URL (and JUDGE_API_KEY)");
        judge = std::make_unique<JudgeClient>(*jc);
      }
      Scorer& scorer = judge ? static_cast<Scorer&>(*judge) : builtin;
      write_out(sweep_c.out, sweep_lines(steering_sweep(bundle, cfg, scorer)));
      return 0;
    }

    if (*train) {
      auto bundle = load_bundle(bundle_path(train_c.bundle));
      if (train_c.out.empty()) throw PreconditionError("train-sae needs --out DIR for the updated bundle");
      const auto pos = parse_position(t_site);
      if (pos.layer < 0 || pos.layer >= bundle.layer_count) throw PreconditionError("site layer outside the bundle");
      const auto corpus = corpus_or_synth(t_corpus, t_texts, train_c.seed);
      std::vector<double> v;
      std::size_t rows = 0;
      for (const auto& text : corpus) {
        const auto tokens = encode_bytes(std::string_view(text).substr(0, 64));
        if (tokens.size() < 2) continue;
        const auto rec = forward(bundle.toy_model(), tokens);
        for (std::size_t t = 1; t < tokens.size(); ++t) {
          const auto h = rec.hook(pos, t);
          v.insert(v.end(), h.begin(), h.end());
          ++rows;
        }
      }
      tc.position = pos;
      tc.seed = train_c.seed;
      const MatrixD acts(rows, bundle.model_dim, std::move(v));
      auto res = train_sae(acts, tc);
      const auto z = sae_encode_batch(res.dictionary, acts);
      const auto m = mean_nonzero_activation(z);
      res.dictionary.set_mean_activations(VectorF(m.begin(), m.end()));
      const double ev = explained_variance(acts, reconstruct_batch(res.dictionary, acts));
      bundle.dictionaries.insert_or_assign(pos, std::move(res.dictionary));
      save_bundle(bundle, train_c.out);
      std::cout << json{{"position", to_string(pos)}, {"samples", rows}, {"final_loss", res.loss_history.back()}, {"explained_variance", ev}}.dump()
                << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
