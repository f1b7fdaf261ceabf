#pragma once

#include <algorithm>
#include <cctype>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "qr/error.hpp"

namespace qr {

// A location or time label split into components ordered fine -> coarse,
// e.g. "Zurich, Switzerland, Europe" or "03-01-2023" (day, month, year).
class HierarchicalLabel {
 public:
  HierarchicalLabel() = default;
  explicit HierarchicalLabel(std::vector<std::string> components) : components_(std::move(components)) {
    if (components_.empty()) throw DataError("hierarchical label has no components");
  }

  const std::vector<std::string>& components() const { return components_; }
  std::size_t levels() const { return components_.size(); }

  // Progressive labels anchored at the coarsest component:
  // {Zurich,Switzerland,Europe}, {Switzerland,Europe}, {Europe}.
  std::vector<std::vector<std::string>> chains() const {
    std::vector<std::vector<std::string>> out;
    for (std::size_t i = 0; i < components_.size(); ++i) {
      out.emplace_back(components_.begin() + static_cast<std::ptrdiff_t>(i), components_.end());
    }
    return out;
  }

  std::set<std::string> component_set() const { return {components_.begin(), components_.end()}; }

  // Canonical comma form, "a, b, c".
  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < components_.size(); ++i) {
      if (i) out += ", ";
      out += components_[i];
    }
    return out;
  }

  bool operator==(const HierarchicalLabel&) const = default;

 private:
  std::vector<std::string> components_;
};

namespace detail {

inline std::string trim(std::string_view s) {
  auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

}  // namespace detail

// All-digit dates such as 03-01-2023 or 2023/01/03 are rewritten to comma
// form before splitting; anything else is split on commas as-is.
inline std::string normalize_time_label(std::string_view text) {
  static const std::regex date(R"(^\s*\d{1,4}([-/.]\d{1,4})+\s*$)");
  std::string s(text);
  if (!std::regex_match(s, date)) return s;
  std::replace_if(s.begin(), s.end(), [](char c) { return c == '-' || c == '/' || c == '.'; }, ',');
  return s;
}

inline HierarchicalLabel parse_hierarchy(std::string_view label_text) {
  const std::string normalized = normalize_time_label(label_text);
  if (detail::trim(normalized).empty()) throw DataError("empty hierarchical label");
  auto parts = detail::split(normalized, ',');
  for (const auto& p : parts) {
    if (p.empty()) throw DataError("hierarchical label has an empty component: '" + std::string(label_text) + "'");
  }
  return HierarchicalLabel(std::move(parts));
}

// 2|GT ∩ Pred| / (|GT| + |Pred|) over the component sets of the two labels.
inline double example_f1(const HierarchicalLabel& gt, const HierarchicalLabel& pred) {
  const auto a = gt.component_set();
  const auto b = pred.component_set();
  std::size_t common = 0;
  for (const auto& c : a) common += b.count(c);
  return 2.0 * static_cast<double>(common) / static_cast<double>(a.size() + b.size());
}

}  // namespace qr
