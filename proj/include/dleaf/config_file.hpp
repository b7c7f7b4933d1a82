#pragma once

// Plain key = value configuration files.
//
//   # comment
//   num_layers = 32
//   image_span = 4-20      (half-open [begin, end))
//   end_token = none
//
// Unknown keys and malformed values raise ConfigError naming the line.

#include <filesystem>
#include <istream>
#include <map>
#include <string>

#include "json.hpp"

#include "dleaf/engine.hpp"
#include "dleaf/model.hpp"

namespace dleaf {

using KeyValues = std::map<std::string, std::pair<std::string, std::size_t>>;  // key -> (value, line)

KeyValues parse_key_values(std::istream& in);
KeyValues read_key_values(const std::filesystem::path& path);

ModelConfig model_config_from(const KeyValues& kv);
DleafConfig dleaf_config_from(const KeyValues& kv);
ModelConfig read_model_config(const std::filesystem::path& path);
DleafConfig read_dleaf_config(const std::filesystem::path& path);

// Serialised forms parse back to an equal config.
std::string to_config_text(const ModelConfig& c);
std::string to_config_text(const DleafConfig& c);

nlohmann::ordered_json to_json(const ModelConfig& c);
nlohmann::ordered_json to_json(const DleafConfig& c);

}  // namespace dleaf
