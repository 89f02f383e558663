#pragma once

// Strict JSON field access: unknown keys, missing keys and wrong types all
// raise ConfigError naming the offending key.

#include <initializer_list>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "svfm/errors.hpp"

namespace svfm::json_util {

inline void check_keys(const nlohmann::json& j, const std::string& context, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(context + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw ConfigError(context + ": unknown key '" + key + "'");
  }
}

template <class T>
T get(const nlohmann::json& j, const std::string& key, const std::string& context) {
  if (!j.contains(key)) throw ConfigError(context + ": missing key '" + key + "'");
  try {
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!j.at(key).is_number_unsigned()) throw ConfigError(context + ": key '" + key + "' must be a non-negative integer");
    }
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(context + ": key '" + key + "' has the wrong type");
  }
}

template <class T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback, const std::string& context) {
  return j.contains(key) ? get<T>(j, key, context) : fallback;
}

}  // namespace svfm::json_util
