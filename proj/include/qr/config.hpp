#pragma once

// Run configuration: built-in defaults, overlaid by a JSON file, overlaid by
// dotted-key overrides from the command line.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qr/error.hpp"
#include "qr/retrieval.hpp"
#include "qr/scorer.hpp"
#include "qr/synthetic.hpp"
#include "qr/view_head.hpp"

namespace qr {

inline nlohmann::json default_config_json() {
  const ViewTrainConfig v;
  const ScorerTrainConfig s;
  return {
      {"seed", nullptr},
      {"paths", {{"images", ""}, {"labels", ""}, {"owk", ""}, {"output", "run"}}},
      {"normalize", true},
      {"threads", 0},
      {"views",
       {{"count", v.views},
        {"lambda", v.lambda},
        {"learning_rate", v.learning_rate},
        {"epochs", v.epochs},
        {"batch_size", v.batch_size},
        {"temperature", v.temperature},
        {"init_sigma", v.init_sigma}}},
      {"search", {{"mode", "proposed"}}},
      {"scorer",
       {{"hidden", s.hidden},
        {"shared", s.shared},
        {"learning_rate", s.learning_rate},
        {"epochs", s.epochs},
        {"batch_size", s.batch_size},
        {"lambda", s.lambda},
        {"temperature", s.temperature},
        {"normalize_fused", s.normalize_fused},
        {"unit_components", s.unit_components}}},
      {"synth", SyntheticSpec{}.to_json()},
  };
}

namespace detail {

inline bool same_kind(const nlohmann::json& def, const nlohmann::json& v) {
  if (def.is_null()) return v.is_null() || v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_string()) return v.is_string();
  if (def.is_number_float()) return v.is_number();
  if (def.is_number()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  if (def.is_object()) return v.is_object();
  return false;
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("config" + (prefix.empty() ? "" : " key '" + prefix + "'") + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (!same_kind(slot, it.value())) throw ConfigError("config key '" + key + "' has the wrong type");
    if (slot.is_object()) {
      merge_into(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

// Command-line values are JSON when they parse as JSON, plain strings otherwise.
inline nlohmann::json parse_override_value(const std::string& text) {
  auto v = nlohmann::json::parse(text, nullptr, false);
  return v.is_discarded() ? nlohmann::json(text) : v;
}

}  // namespace detail

struct RunConfig {
  nlohmann::json raw;  // fully merged document

  std::uint64_t seed = 0;
  std::filesystem::path images, labels, owk, output;
  bool normalize = true;
  std::size_t threads = 0;
  ViewTrainConfig views;
  SearchMode search_mode = SearchMode::proposed;
  ScorerTrainConfig scorer;
  SyntheticSpec synth;

  // Applies `patch` and then `overrides` (dotted key, value text) to the defaults.
  static RunConfig build(const nlohmann::json& patch = nlohmann::json::object(),
                         const std::vector<std::pair<std::string, std::string>>& overrides = {},
                         bool require_seed = true) {
    auto doc = default_config_json();
    detail::merge_into(doc, patch, "");
    for (const auto& [key, text] : overrides) {
      nlohmann::json nested = detail::parse_override_value(text);
      std::string rest = key;
      std::vector<std::string> parts;
      for (std::size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1)) {
        parts.push_back(rest.substr(0, dot));
      }
      parts.push_back(rest);
      // A string default keeps a numeric-looking value as text.
      const nlohmann::json* def = &doc;
      for (const auto& p : parts) def = def->is_object() && def->contains(p) ? &(*def)[p] : nullptr;
      if (def && def->is_string() && !nested.is_string()) nested = text;
      for (auto it = parts.rbegin(); it != parts.rend(); ++it) nested = nlohmann::json{{*it, nested}};
      detail::merge_into(doc, nested, "");
    }
    return from_json(doc, require_seed);
  }

  static RunConfig load(const std::filesystem::path& file,
                        const std::vector<std::pair<std::string, std::string>>& overrides = {},
                        bool require_seed = true) {
    nlohmann::json patch = nlohmann::json::object();
    if (!file.empty()) {
      std::ifstream in(file);
      if (!in) throw ConfigError("cannot open config file " + file.string());
      patch = nlohmann::json::parse(in, nullptr, false);
      if (patch.is_discarded()) throw ConfigError(file.string() + ": not valid JSON");
    }
    return build(patch, overrides, require_seed);
  }

  static RunConfig from_json(const nlohmann::json& doc, bool require_seed = true) {
    RunConfig c;
    c.raw = doc;
    if (doc.at("seed").is_null()) {
      if (require_seed) throw ConfigError("config key 'seed' is required");
    } else {
      c.seed = doc.at("seed").get<std::uint64_t>();
    }
    const auto& p = doc.at("paths");
    c.images = p.at("images").get<std::string>();
    c.labels = p.at("labels").get<std::string>();
    c.owk = p.at("owk").get<std::string>();
    c.output = p.at("output").get<std::string>();
    c.normalize = doc.at("normalize").get<bool>();
    c.threads = doc.at("threads").get<std::size_t>();

    const auto& v = doc.at("views");
    c.views.views = v.at("count").get<std::size_t>();
    c.views.lambda = v.at("lambda").get<double>();
    c.views.learning_rate = v.at("learning_rate").get<double>();
    c.views.epochs = v.at("epochs").get<std::size_t>();
    c.views.batch_size = v.at("batch_size").get<std::size_t>();
    c.views.temperature = v.at("temperature").get<double>();
    c.views.init_sigma = v.at("init_sigma").get<double>();
    c.views.seed = c.seed;

    c.search_mode = parse_search_mode(doc.at("search").at("mode").get<std::string>());

    const auto& s = doc.at("scorer");
    c.scorer.hidden = s.at("hidden").get<std::size_t>();
    c.scorer.shared = s.at("shared").get<bool>();
    c.scorer.learning_rate = s.at("learning_rate").get<double>();
    c.scorer.epochs = s.at("epochs").get<std::size_t>();
    c.scorer.batch_size = s.at("batch_size").get<std::size_t>();
    c.scorer.lambda = s.at("lambda").get<double>();
    c.scorer.temperature = s.at("temperature").get<double>();
    c.scorer.normalize_fused = s.at("normalize_fused").get<bool>();
    c.scorer.unit_components = s.at("unit_components").get<bool>();
    c.scorer.seed = c.seed + 1;

    c.synth = SyntheticSpec::from_json(doc.at("synth"));
    c.validate();
    return c;
  }

  void validate() const {
    if (views.views < 2) throw ConfigError("views.count must be at least 2");
    if (!(views.lambda >= 0.0)) throw ConfigError("views.lambda must be non-negative");
    if (!(scorer.lambda >= 0.0)) throw ConfigError("scorer.lambda must be non-negative");
    if (views.batch_size < 2 || scorer.batch_size < 2) throw ConfigError("batch sizes must be at least 2");
    for (double x : {views.learning_rate, scorer.learning_rate, views.temperature, scorer.temperature}) {
      if (!(x > 0.0) || !std::isfinite(x)) throw ConfigError("learning rates and temperatures must be positive");
    }
    if (!(views.init_sigma >= 0.0)) throw ConfigError("views.init_sigma must be non-negative");
  }
};

// Splits "--a.b=v" / "--a.b v" arguments into (key, value) pairs.
inline std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& args) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const auto& a = args[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) throw ConfigError("unexpected argument '" + a + "'");
    const auto body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else if (i + 1 < args.size()) {
      out.emplace_back(body, args[++i]);
    } else {
      throw ConfigError("option '" + a + "' needs a value");
    }
  }
  return out;
}

}  // namespace qr
