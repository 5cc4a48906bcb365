#pragma once

// Overlap metrics between a predicted and a ground-truth binary mask, and their
// aggregation into per-class and overall reports.

#include <cstdint>
#include <string>
#include <vector>

#include "afseg/mask.hpp"
#include "json.hpp"

namespace afseg::metrics {

struct Confusion {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }
  std::int64_t union_size() const { return tp + fp + fn; }
};

Confusion confusion(const Mask& pred, const Mask& gt);

// Empty pred and empty gt: iou = dsc = 1, hammoude = xor = 0.
double iou(const Confusion& c);
double dsc(const Confusion& c);
double hammoude(const Confusion& c);    // percent
double xor_metric(const Confusion& c);  // percent, normalized by the gt area

inline double iou(const Mask& pred, const Mask& gt) { return iou(confusion(pred, gt)); }
inline double dsc(const Mask& pred, const Mask& gt) { return dsc(confusion(pred, gt)); }
inline double hammoude(const Mask& pred, const Mask& gt) { return hammoude(confusion(pred, gt)); }
inline double xor_metric(const Mask& pred, const Mask& gt) { return xor_metric(confusion(pred, gt)); }

struct MetricsRow {
  int class_id = 0;
  double iou = 0, dsc = 0, hm = 0, xor_ = 0;
  Confusion counts;
};

MetricsRow metrics_row(int class_id, const Mask& pred, const Mask& gt);

struct ClassSummary {
  int id = 0;
  double iou = 0, dsc = 0, hm = 0, xor_ = 0;
  std::int64_t n = 0;
};

struct Report {
  std::vector<ClassSummary> classes;  // ascending id
  double miou = 0, mdsc = 0, mhm = 0, mxor = 0;
};

/// Per-class means of the rows, then unweighted means over classes.
Report evaluate(const std::vector<MetricsRow>& rows);

nlohmann::json to_json(const Report& r);
Report report_from_json(const nlohmann::json& j);
std::string to_text(const Report& r);

}  // namespace afseg::metrics
