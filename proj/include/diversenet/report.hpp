// SPDX-License-Identifier: Apache-2.0
//
// Run reports: lossless machine JSON plus the human table with the five
// scores as percentages (OA, UA, PA, mIoU, F1).
#pragma once

#include <cfenv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diversenet/errors.hpp"
#include "diversenet/metrics.hpp"

namespace diversenet {

/// Percent with two decimals, ties rounded half to even; absent -> "n/a".
inline std::string format_percent(std::optional<double> value) {
  if (!value) return "n/a";
  const int prev = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const double scaled = std::nearbyint(*value * 10000.0) / 100.0;
  std::fesetround(prev);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%", scaled);
  return buf;
}

inline nlohmann::json to_json(const MetricReport& r) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& c : r.per_class)
    per_class.push_back(
        {{"ua", opt(c.ua)}, {"pa", opt(c.pa)}, {"iou", opt(c.iou)}, {"f1", opt(c.f1)}});
  return {{"oa", r.oa},
          {"macro",
           {{"ua", opt(r.macro_ua)},
            {"pa", opt(r.macro_pa)},
            {"miou", opt(r.miou)},
            {"f1", opt(r.macro_f1)}}},
          {"per_class", per_class}};
}

inline MetricReport metric_report_from_json(const nlohmann::json& j) {
  auto opt = [](const nlohmann::json& v) -> std::optional<double> {
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  MetricReport r;
  r.oa = j.at("oa").get<double>();
  const auto& m = j.at("macro");
  r.macro_ua = opt(m.at("ua"));
  r.macro_pa = opt(m.at("pa"));
  r.miou = opt(m.at("miou"));
  r.macro_f1 = opt(m.at("f1"));
  for (const auto& c : j.at("per_class"))
    r.per_class.push_back(
        {opt(c.at("ua")), opt(c.at("pa")), opt(c.at("iou")), opt(c.at("f1"))});
  return r;
}

/// One table row per machine report: the method/arm label and its final test
/// scores. Pure function of the machine reports.
inline std::string format_metric_table(const std::vector<nlohmann::json>& reports) {
  std::string out = "Method               OA        UA        PA        mIoU      F1\n";
  for (const auto& rep : reports) {
    const std::string label = rep.contains("arm") ? rep.at("arm").get<std::string>()
                                                  : rep.at("method").get<std::string>();
    if (!rep.contains("final_test") || rep.at("final_test").is_null())
      throw ArgError("report table: run '" + label + "' has no final test metrics");
    const MetricReport m = metric_report_from_json(rep.at("final_test"));
    char row[256];
    std::snprintf(row, sizeof(row), "%-20s %-9s %-9s %-9s %-9s %-9s\n", label.c_str(),
                  format_percent(m.oa).c_str(), format_percent(m.macro_ua).c_str(),
                  format_percent(m.macro_pa).c_str(), format_percent(m.miou).c_str(),
                  format_percent(m.macro_f1).c_str());
    out += row;
  }
  return out;
}

}  // namespace diversenet
