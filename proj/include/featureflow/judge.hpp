#pragma once

// Client for an external LLM judge (OpenAI-style chat completions endpoint).
// Prompts and input formatting are fixed; a text that cannot be scored after
// the retries is reported missing, never as zero.

#include <algorithm>
#include <cctype>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <optional>
#include <string>

#include "httplib.h"
#include "json.hpp"

#include "featureflow/steering.hpp"

namespace featureflow {

namespace judge_prompts {

// Theme deactivation: three subjects scored at once, behavioral is [a, b, c].
inline constexpr const char* kDeactivationSystem = R"PROMPT(You will receive a text that was generated by some language model.

You need to evaluate this text based on the following criteria:

1. Coherence score: text is gramatically correct, language is clear and coherent.
2. Behavioral score: text is directly related to some predefined subject.

The subjects are:
a) ** Personalities, their influence and achievements **. Text may contain 
references to individual or group achievements or lack of results, discussion 
about Nobel prizes etc.
b) ** Scientific concepts and entities **. Text relates to some specific 
scientific concepts, such as particles, black holes, particular theories, 
Standard Model, quantum wavefunctions, gravitation etc.
c) ** Research methodology and experimentation **. Text relates to methodology 
and philosophy of science, scientific research techniques and procedures, 
especially method of experiment, empirical basis of theories etc.

Rate the behavioral score in this order, i.e. [a, b, c].

Give an integer score from 0 to 5 for each criteria.
Do not judge text based on ethical considerations, preferences etc., it is 
important for that evaluation to be objective.

Format your output as JSON:

{
    "coherence": 5,
    "behavioral": [1, 1, 1]
}

)PROMPT";

// Theme activation: one subject given in the input.
inline constexpr const char* kActivationSystem = R"PROMPT(You will receive a text that was generated by some language model.

You need to evaluate this text based on the following criteria:

1. Coherence score: text is gramatically correct, language is clear and coherent.
2. Behavioral score: text has explainable relation to some predefined subject.

Give an integer score from 0 to 5 for each criteria.

Do not judge text based on ethical considerations, preferences etc., it is 
important for that evaluation to be objective.

To evaluate behavioral score, also consider related terminology or entities 
which may be not directly discuss the subject, but associated with it. The name 
of the subject is just an orienting point for further search of ** explainable ** 
connection to that theme in text. For example, if subject is the History of Rome, 
then strong presence of latin or italian language, or discussion about not 
history, but architecture of ancient Rome should also lead to high behavioral 
score, because it has strong explainable connection.

Format your output as JSON:

{
    "coherence": 5,
    "behavioral": 1
}

)PROMPT";

inline constexpr const char* kDeactivationSubjects[3] = {
    "Personalities, their influence and achievements",
    "Scientific concepts and entities",
    "Research methodology and experimentation",
};

}  // namespace judge_prompts

inline std::string judge_system_prompt(ScoreMode mode) {
  return mode == ScoreMode::Activation ? judge_prompts::kActivationSystem : judge_prompts::kDeactivationSystem;
}

inline std::string judge_user_message(const std::string& text, const Theme& theme, ScoreMode mode) {
  const std::string body = "Text:\n\"\"\"\n" + text + "\n\"\"\"\n";
  if (mode == ScoreMode::Activation) return "Subject: " + theme.name + "\n" + body;
  return "\n" + body;
}

namespace detail {

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

/// Position of the theme among the deactivation subjects ("a".."c" also accepted).
inline std::optional<std::size_t> subject_index(const Theme& theme) {
  const auto n = lower(theme.name);
  if (n == "a" || n == "b" || n == "c") return static_cast<std::size_t>(n[0] - 'a');
  for (std::size_t i = 0; i < 3; ++i) {
    if (lower(judge_prompts::kDeactivationSubjects[i]) == n) return i;
  }
  return std::nullopt;
}

inline std::optional<double> score_value(const nlohmann::json& v) {
  if (!v.is_number()) return std::nullopt;
  const double x = v.get<double>();
  if (!(x >= 0.0 && x <= 5.0)) return std::nullopt;
  return x;
}

}  // namespace detail

/// Accepts the judge's JSON object directly, or a chat-completions envelope
/// whose first message content holds it (code fences tolerated).
inline std::optional<GenerationScore> parse_judge_response(const std::string& body, const Theme& theme, ScoreMode mode) {
  using nlohmann::json;
  auto j = json::parse(body, nullptr, false);
  if (j.is_discarded()) return std::nullopt;
  if (j.is_object() && j.contains("choices")) {
    try {
      const auto content = j.at("choices").at(0).at("message").at("content").get<std::string>();
      const auto a = content.find('{');
      const auto b = content.rfind('}');
      if (a == std::string::npos || b == std::string::npos || b < a) return std::nullopt;
      j = json::parse(content.substr(a, b - a + 1), nullptr, false);
      if (j.is_discarded()) return std::nullopt;
    } catch (const json::exception&) {
      return std::nullopt;
    }
  }
  if (!j.is_object() || !j.contains("coherence") || !j.contains("behavioral")) return std::nullopt;
  const auto coh = detail::score_value(j["coherence"]);
  std::optional<double> beh;
  const auto& b = j["behavioral"];
  if (b.is_array()) {
    const auto idx = detail::subject_index(theme);
    if (!idx || b.size() <= *idx) return std::nullopt;
    beh = detail::score_value(b[*idx]);
  } else {
    beh = detail::score_value(b);
  }
  if (!coh || !beh) return std::nullopt;
  return GenerationScore{*beh, *coh, mode};
}

struct JudgeConfig {
  std::string url;  // http://host:port/path
  std::string api_key;
  std::string model = "gpt-4o-mini";
  int retries = 2;
  std::size_t max_in_flight = 4;
  int timeout_seconds = 60;

  /// JUDGE_URL and JUDGE_API_KEY; nullopt when no URL is set.
  static std::optional<JudgeConfig> from_env() {
    const char* url = std::getenv("JUDGE_URL");
    if (url == nullptr || *url == '\0') return std::nullopt;
    JudgeConfig c;
    c.url = url;
    if (const char* key = std::getenv("JUDGE_API_KEY")) c.api_key = key;
    return c;
  }
};

class JudgeClient : public Scorer {
 public:
  explicit JudgeClient(JudgeConfig cfg) : cfg_(std::move(cfg)) {
    const auto scheme_end = cfg_.url.find("://");
    if (scheme_end == std::string::npos) throw PreconditionError("judge URL must include a scheme: " + cfg_.url);
    const auto path_start = cfg_.url.find('/', scheme_end + 3);
    origin_ = cfg_.url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : cfg_.url.substr(path_start);
    if (cfg_.max_in_flight == 0) throw PreconditionError("judge: max_in_flight must be positive");
  }

  std::optional<GenerationScore> score(const std::string& text, const Theme& theme, ScoreMode mode) override {
    const nlohmann::json req = {{"model", cfg_.model},
                                {"messages",
                                 {{{"role", "system"}, {"content", judge_system_prompt(mode)}},
                                  {{"role", "user"}, {"content", judge_user_message(text, theme, mode)}}}}};
    const auto body = req.dump();
    Slot slot(*this);
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
      httplib::Client cli(origin_);
      if (!cli.is_valid()) {
        note_error("judge URL not usable by this build: " + origin_);
        return std::nullopt;
      }
      cli.set_connection_timeout(cfg_.timeout_seconds);
      cli.set_read_timeout(cfg_.timeout_seconds);
      httplib::Headers headers;
      if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
      auto res = cli.Post(path_, headers, body, "application/json");
      if (!res) {
        note_error("judge unreachable: " + httplib::to_string(res.error()));
        continue;
      }
      if (res->status != 200) {
        note_error("judge returned HTTP " + std::to_string(res->status));
        continue;
      }
      if (auto s = parse_judge_response(res->body, theme, mode)) return s;
      note_error("judge response unparseable");
    }
    return std::nullopt;
  }

  std::string name() const override { return "judge"; }

  std::string last_error() const {
    std::lock_guard lock(mu_);
    return last_error_;
  }

  std::size_t peak_in_flight() const {
    std::lock_guard lock(mu_);
    return peak_;
  }

 private:
  struct Slot {
    explicit Slot(JudgeClient& c) : c_(c) {
      std::unique_lock lock(c_.mu_);
      c_.cv_.wait(lock, [&] { return c_.in_flight_ < c_.cfg_.max_in_flight; });
      ++c_.in_flight_;
      c_.peak_ = std::max(c_.peak_, c_.in_flight_);
    }
    ~Slot() {
      {
        std::lock_guard lock(c_.mu_);
        --c_.in_flight_;
      }
      c_.cv_.notify_one();
    }
    JudgeClient& c_;
  };

  void note_error(std::string e) {
    std::lock_guard lock(mu_);
    last_error_ = std::move(e);
  }

  JudgeConfig cfg_;
  std::string origin_;
  std::string path_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::size_t in_flight_ = 0;
  std::size_t peak_ = 0;
  std::string last_error_;
};

}  // namespace featureflow
