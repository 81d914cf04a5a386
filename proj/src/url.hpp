#pragma once

#include <string>
#include <string_view>

#include "radprep/common.hpp"

namespace radprep::detail {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;    // starts with '/'
};

inline SplitUrl split_url(std::string_view url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) throw ValidationError("URL needs an http:// or https:// scheme: " + std::string(url));
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw ValidationError("unsupported URL scheme: " + std::string(url));
  const auto path_start = url.find('/', scheme_end + 3);
  SplitUrl out;
  if (path_start == std::string_view::npos) {
    out.origin = std::string(url);
    out.path = "/";
  } else {
    out.origin = std::string(url.substr(0, path_start));
    out.path = std::string(url.substr(path_start));
  }
  if (out.origin.size() <= scheme_end + 3) throw ValidationError("URL has no host: " + std::string(url));
  return out;
}

}  // namespace radprep::detail
