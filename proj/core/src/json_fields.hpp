#pragma once

#include <initializer_list>
#include <string>
#include <string_view>
#include <type_traits>

#include "json.hpp"
#include "rayfusion/errors.hpp"

namespace rayfusion::detail {

using Json = nlohmann::ordered_json;

inline std::string key_path(const std::string& parent, std::string_view key) {
  return parent.empty() ? std::string(key) : parent + "." + std::string(key);
}

inline void require_object(const Json& j, const std::string& path) {
  if (!j.is_object()) {
    throw ConfigError((path.empty() ? std::string("document") : "'" + path + "'") +
                      " must be a JSON object");
  }
}

inline void reject_unknown_keys(const Json& j, const std::string& path,
                                std::initializer_list<std::string_view> allowed) {
  require_object(j, path);
  for (const auto& item : j.items()) {
    bool known = false;
    for (auto key : allowed) known = known || item.key() == key;
    if (!known) throw ConfigError("unknown key '" + key_path(path, item.key()) + "'");
  }
}

// Overwrites `out` when `key` is present; type mismatches name the key path.
template <typename T>
void read_field(const Json& j, const std::string& path, std::string_view key, T& out) {
  const auto it = j.find(std::string(key));
  if (it == j.end()) return;
  try {
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!it->is_number_integer() || it->template get<long long>() < 0) {
        throw ConfigError("expected a non-negative integer");
      }
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError("expected a boolean");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError("expected a number");
    }
    out = it->template get<T>();
  } catch (const std::exception& e) {
    throw ConfigError("'" + key_path(path, key) + "': " + e.what());
  }
}

}  // namespace rayfusion::detail
