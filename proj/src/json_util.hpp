// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include "json.hpp"

namespace msdetr::detail {

/// Rejects keys of `j` outside `allowed` so typos in configs fail loudly.
inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                       std::string_view context) {
  if (!j.is_object()) {
    throw std::invalid_argument(std::string(context) + ": expected a JSON object");
  }
  for (const auto& item : j.items()) {
    bool ok = false;
    for (std::string_view a : allowed) ok = ok || item.key() == a;
    if (!ok) {
      throw std::invalid_argument(std::string(context) + ": unknown key '" + item.key() + "'");
    }
  }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace msdetr::detail
