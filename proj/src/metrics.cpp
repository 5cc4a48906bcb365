#include "afseg/metrics.hpp"

#include <cstdio>
#include <map>

namespace afseg::metrics {

Confusion confusion(const Mask& pred, const Mask& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw InvalidInput("metrics: prediction is " + std::to_string(pred.rows()) + "x" + std::to_string(pred.cols()) +
                       " but ground truth is " + std::to_string(gt.rows()) + "x" + std::to_string(gt.cols()));
  Confusion c;
  for (Index i = 0; i < pred.size(); ++i) {
    const bool p = pred.data()[i] != 0, g = gt.data()[i] != 0;
    if (p && g)
      ++c.tp;
    else if (p)
      ++c.fp;
    else if (g)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double iou(const Confusion& c) {
  const auto u = c.union_size();
  return u == 0 ? 1.0 : double(c.tp) / double(u);
}

double dsc(const Confusion& c) {
  const auto d = 2 * c.tp + c.fp + c.fn;
  return d == 0 ? 1.0 : double(2 * c.tp) / double(d);
}

double hammoude(const Confusion& c) {
  const auto u = c.union_size();
  return u == 0 ? 0.0 : 100.0 * double(c.fp + c.fn) / double(u);
}

double xor_metric(const Confusion& c) {
  const auto g = c.tp + c.fn;
  if (g == 0) {
    if (c.fp == 0) return 0.0;
    throw InvalidInput("xor metric is undefined for an empty ground truth with a non-empty prediction");
  }
  return 100.0 * double(c.fp + c.fn) / double(g);
}

MetricsRow metrics_row(int class_id, const Mask& pred, const Mask& gt) {
  MetricsRow r;
  r.class_id = class_id;
  r.counts = confusion(pred, gt);
  r.iou = iou(r.counts);
  r.dsc = dsc(r.counts);
  r.hm = hammoude(r.counts);
  r.xor_ = xor_metric(r.counts);
  return r;
}

Report evaluate(const std::vector<MetricsRow>& rows) {
  std::map<int, ClassSummary> by_class;
  for (const auto& r : rows) {
    auto& s = by_class[r.class_id];
    s.id = r.class_id;
    s.iou += r.iou;
    s.dsc += r.dsc;
    s.hm += r.hm;
    s.xor_ += r.xor_;
    ++s.n;
  }
  Report rep;
  for (auto& [id, s] : by_class) {
    const double n = double(s.n);
    s.iou /= n;
    s.dsc /= n;
    s.hm /= n;
    s.xor_ /= n;
    rep.classes.push_back(s);
    rep.miou += s.iou;
    rep.mdsc += s.dsc;
    rep.mhm += s.hm;
    rep.mxor += s.xor_;
  }
  if (!rep.classes.empty()) {
    const double k = double(rep.classes.size());
    rep.miou /= k;
    rep.mdsc /= k;
    rep.mhm /= k;
    rep.mxor /= k;
  }
  return rep;
}

nlohmann::json to_json(const Report& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : r.classes)
    classes.push_back({{"id", c.id}, {"iou", c.iou}, {"dsc", c.dsc}, {"hm", c.hm}, {"xor", c.xor_}, {"n", c.n}});
  return {{"classes", classes}, {"overall", {{"miou", r.miou}, {"mdsc", r.mdsc}, {"mhm", r.mhm}, {"mxor", r.mxor}}}};
}

Report report_from_json(const nlohmann::json& j) {
  try {
    Report r;
    for (const auto& c : j.at("classes"))
      r.classes.push_back({c.at("id").get<int>(), c.at("iou").get<double>(), c.at("dsc").get<double>(),
                           c.at("hm").get<double>(), c.at("xor").get<double>(), c.at("n").get<std::int64_t>()});
    const auto& o = j.at("overall");
    r.miou = o.at("miou").get<double>();
    r.mdsc = o.at("mdsc").get<double>();
    r.mhm = o.at("mhm").get<double>();
    r.mxor = o.at("mxor").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("report JSON: ") + e.what());
  }
}

std::string to_text(const Report& r) {
  std::string out;
  char line[128];
  std::snprintf(line, sizeof line, "%8s %8s %8s %8s %8s %6s\n", "class", "iou", "dsc", "hm", "xor", "n");
  out += line;
  for (const auto& c : r.classes) {
    std::snprintf(line, sizeof line, "%8d %8.4f %8.4f %8.2f %8.2f %6lld\n", c.id, c.iou, c.dsc, c.hm, c.xor_,
                  static_cast<long long>(c.n));
    out += line;
  }
  std::snprintf(line, sizeof line, "%8s %8.4f %8.4f %8.2f %8.2f\n", "mean", r.miou, r.mdsc, r.mhm, r.mxor);
  out += line;
  return out;
}

}  // namespace afseg::metrics
