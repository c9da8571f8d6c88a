#pragma once

// Field accessors that report the offending JSON path on failure.

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "studyrig/error.hpp"

namespace studyrig::detail {

using nlohmann::json;

inline std::string field_path(const std::string& path, const char* key) {
  return path.empty() ? std::string(key) : path + "." + key;
}

inline void require_object(const json& v, const std::string& path) {
  if (!v.is_object()) {
    throw errors::malformed((path.empty() ? std::string("body") : path) + ": expected object");
  }
}

inline const json* find_field(const json& o, const char* key) {
  auto it = o.find(key);
  if (it == o.end() || it->is_null()) return nullptr;
  return &*it;
}

inline std::string req_string(const json& o, const char* key, const std::string& path) {
  const json* v = find_field(o, key);
  if (v == nullptr) throw errors::malformed(field_path(path, key) + ": required");
  if (!v->is_string()) throw errors::malformed(field_path(path, key) + ": expected string");
  return v->get<std::string>();
}

inline std::optional<std::string> opt_string(const json& o, const char* key,
                                             const std::string& path) {
  const json* v = find_field(o, key);
  if (v == nullptr) return std::nullopt;
  if (!v->is_string()) throw errors::malformed(field_path(path, key) + ": expected string");
  return v->get<std::string>();
}

inline std::string string_or(const json& o, const char* key, const std::string& path,
                             std::string fallback) {
  return opt_string(o, key, path).value_or(std::move(fallback));
}

inline bool bool_or(const json& o, const char* key, const std::string& path, bool fallback) {
  const json* v = find_field(o, key);
  if (v == nullptr) return fallback;
  if (!v->is_boolean()) throw errors::malformed(field_path(path, key) + ": expected boolean");
  return v->get<bool>();
}

inline std::optional<std::int64_t> opt_int(const json& o, const char* key,
                                           const std::string& path) {
  const json* v = find_field(o, key);
  if (v == nullptr) return std::nullopt;
  if (!v->is_number_integer()) {
    throw errors::malformed(field_path(path, key) + ": expected integer");
  }
  return v->get<std::int64_t>();
}

inline std::optional<double> opt_number(const json& o, const char* key,
                                        const std::string& path) {
  const json* v = find_field(o, key);
  if (v == nullptr) return std::nullopt;
  if (!v->is_number()) throw errors::malformed(field_path(path, key) + ": expected number");
  return v->get<double>();
}

inline const json& req_array(const json& o, const char* key, const std::string& path) {
  const json* v = find_field(o, key);
  if (v == nullptr) throw errors::malformed(field_path(path, key) + ": required");
  if (!v->is_array()) throw errors::malformed(field_path(path, key) + ": expected array");
  return *v;
}

inline const json& array_or_empty(const json& o, const char* key, const std::string& path) {
  static const json kEmpty = json::array();
  const json* v = find_field(o, key);
  if (v == nullptr) return kEmpty;
  if (!v->is_array()) throw errors::malformed(field_path(path, key) + ": expected array");
  return *v;
}

inline std::string index_path(const std::string& path, std::size_t i) {
  return path + "[" + std::to_string(i) + "]";
}

template <typename T>
json nullable(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace studyrig::detail
