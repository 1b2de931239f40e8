#pragma once

// Shared between translation units only; nlohmann stays out of the public
// headers so installed consumers do not inherit the dependency.

#include <nlohmann/json.hpp>

#include "cascade/cnn.hpp"

namespace cascade {

nlohmann::json network_to_json(const NetworkSpec& spec);
NetworkSpec network_from_json(const nlohmann::json& j);

}  // namespace cascade
