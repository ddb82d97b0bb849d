#pragma once

#include <compare>
#include <stdexcept>
#include <string>
#include <string_view>

namespace featureflow {

/// Base for all library errors; what() names the offending object.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LoadError : Error {
  using Error::Error;
};
struct ShapeError : LoadError {
  using LoadError::LoadError;
};
/// A matching request touched a dictionary whose model dimension differs.
struct IncompatibleError : Error {
  using Error::Error;
};
struct PreconditionError : Error {
  using Error::Error;
};

enum class Site : unsigned char { Res, Mlp, Att };

inline constexpr Site kAllSites[] = {Site::Res, Site::Mlp, Site::Att};

inline std::string_view site_name(Site s) {
  switch (s) {
    case Site::Res: return "res";
    case Site::Mlp: return "mlp";
    case Site::Att: return "att";
  }
  return "?";
}

inline Site parse_site(std::string_view s) {
  if (s == "res" || s == "RES") return Site::Res;
  if (s == "mlp" || s == "MLP") return Site::Mlp;
  if (s == "att" || s == "ATT") return Site::Att;
  throw PreconditionError("unknown site '" + std::string(s) + "'");
}

struct SitePosition {
  int layer = 0;
  Site site = Site::Res;

  auto operator<=>(const SitePosition&) const = default;
};

/// "3/res"
inline std::string to_string(SitePosition p) {
  return std::to_string(p.layer) + "/" + std::string(site_name(p.site));
}

/// Feature address: layer, site and index within that site's dictionary.
struct FeatureRef {
  SitePosition position;
  std::size_t index = 0;

  auto operator<=>(const FeatureRef&) const = default;
};

/// "7/mlp/6110"
inline std::string to_string(const FeatureRef& f) {
  return to_string(f.position) + "/" + std::to_string(f.index);
}

/// Accepts "24:res:14548" or "24/res/14548".
inline FeatureRef parse_feature_ref(std::string_view text) {
  std::string s(text);
  for (auto& c : s) {
    if (c == ':') c = '/';
  }
  const auto a = s.find('/');
  const auto b = s.find('/', a == std::string::npos ? a : a + 1);
  if (a == std::string::npos || b == std::string::npos) {
    throw PreconditionError("feature reference must look like layer:site:index, got '" + std::string(text) + "'");
  }
  try {
    FeatureRef f;
    f.position.layer = std::stoi(s.substr(0, a));
    f.position.site = parse_site(s.substr(a + 1, b - a - 1));
    const long long idx = std::stoll(s.substr(b + 1));
    if (f.position.layer < 0 || idx < 0) throw PreconditionError("negative layer or index");
    f.index = static_cast<std::size_t>(idx);
    return f;
  } catch (const std::logic_error&) {
    throw PreconditionError("malformed feature reference '" + std::string(text) + "'");
  }
}

}  // namespace featureflow
