#pragma once

// Detection metrics: IoU, greedy NMS, confidence-ranked matching,
// precision/recall, average precision (exact envelope area and 101-point
// interpolation) and the multi-threshold evaluation protocol.
//
// Boxes are normalized center-format (cx, cy, w, h) in [0,1]; geometry is
// continuous with no pixel corrections. All arithmetic is double precision.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msv/tensor.hpp"  // shape_str not needed; Rng unused here but keeps one include root

namespace msv::eval {

struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;
};

struct DetBox {
  int class_id = 0;
  double confidence = 0;
  Box box;
};

struct GtBox {
  int class_id = 0;
  Box box;
};

inline double iou(const Box& a, const Box& b) {
  const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2;
  const double ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
  const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2;
  const double by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
  const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double ih = std::min(ay2, by2) - std::max(ay1, by1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Indices ranked by descending confidence, ties by input index.
inline std::vector<std::size_t> confidence_order(const std::vector<DetBox>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  return order;
}

// Greedy class-wise suppression; output keeps the confidence order.
inline std::vector<DetBox> nms(const std::vector<DetBox>& dets, double iou_threshold) {
  const auto order = confidence_order(dets);
  std::vector<DetBox> kept;
  for (std::size_t idx : order) {
    bool suppressed = false;
    for (const DetBox& k : kept) {
      if (k.class_id != dets[idx].class_id) continue;
      if (iou(k.box, dets[idx].box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[idx]);
  }
  return kept;
}

struct MatchResult {
  std::vector<bool> tp;              // per detection, input order
  std::vector<int> matched_gt;       // GT index per detection, -1 for FP
  std::size_t unmatched_gt = 0;      // FN count
  std::vector<std::size_t> ranking;  // detection indices in confidence order
};

// Greedy confidence-ordered matching within one image: each detection takes
// the highest-IoU still-unmatched ground truth of its class at or above the
// threshold; IoU ties go to the lower GT index.
inline MatchResult match_detections(const std::vector<DetBox>& dets,
                                    const std::vector<GtBox>& gts, double iou_threshold) {
  MatchResult r;
  r.tp.assign(dets.size(), false);
  r.matched_gt.assign(dets.size(), -1);
  r.ranking = confidence_order(dets);

  std::vector<bool> taken(gts.size(), false);
  for (std::size_t idx : r.ranking) {
    double best = -1.0;
    int best_gt = -1;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (taken[gi] || gts[gi].class_id != dets[idx].class_id) continue;
      const double v = iou(dets[idx].box, gts[gi].box);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt >= 0 && best >= iou_threshold) {
      r.tp[idx] = true;
      r.matched_gt[idx] = best_gt;
      taken[best_gt] = true;
    }
  }
  r.unmatched_gt = 0;
  for (bool t : taken)
    if (!t) ++r.unmatched_gt;
  return r;
}

struct PrMetrics {
  double precision = 0;
  double recall = 0;
};

// Eq.-style ratios with the 0/0 -> 0 convention.
inline PrMetrics pr_counts_to_metrics(std::size_t tp, std::size_t fp, std::size_t fn) {
  PrMetrics m;
  m.precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  m.recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  return m;
}

enum class ApMethod { all_point, interp101 };

// Area under the precision envelope for a confidence-ranked TP/FP sequence.
// all_point integrates the exact envelope; interp101 samples it at the 101
// recall grid points {0.00, 0.01, ..., 1.00}.
inline double average_precision(const std::vector<bool>& ranked_flags, std::size_t n_gt,
                                ApMethod method) {
  std::size_t tp_total = 0;
  for (bool f : ranked_flags) tp_total += f ? 1 : 0;
  if (tp_total > n_gt)
    throw std::invalid_argument("average_precision: more TP flags than ground truths");
  if (n_gt == 0) return 0.0;  // detections against nothing score zero

  const std::size_t k = ranked_flags.size();
  std::vector<double> precision(k), recall(k);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < k; ++i) {
    tp += ranked_flags[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }
  // precision envelope: max precision at recall >= r
  std::vector<double> envelope(k);
  double running = 0;
  for (std::size_t i = k; i-- > 0;) {
    running = std::max(running, precision[i]);
    envelope[i] = running;
  }

  if (method == ApMethod::all_point) {
    double area = 0, prev_recall = 0;
    for (std::size_t i = 0; i < k; ++i) {
      area += (recall[i] - prev_recall) * envelope[i];
      prev_recall = recall[i];
    }
    return area;
  }

  double total = 0;
  for (int j = 0; j <= 100; ++j) {
    const double r = static_cast<double>(j) / 100.0;
    double p = 0;
    for (std::size_t i = 0; i < k; ++i) {
      if (recall[i] >= r - 1e-12) {
        p = envelope[i];
        break;
      }
    }
    total += p;
  }
  return total / 101.0;
}

inline std::vector<double> iou_sweep() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

struct EvalConfig {
  std::vector<double> thresholds{0.5};
  ApMethod method = ApMethod::interp101;
  double confidence_threshold = 0.25;  // operating point for aggregate P/R
};

struct ClassApRow {
  int class_id = 0;
  std::size_t n_gt = 0;
  std::size_t n_det = 0;
  std::vector<double> ap;  // one per threshold
};

struct MatchTableRow {
  std::size_t image = 0;
  std::size_t det_index = 0;  // index within the image's detection list
  int class_id = 0;
  double confidence = 0;
  bool tp = false;  // at the first (lowest) threshold
};

struct EvalReport {
  std::vector<double> thresholds;
  std::vector<ClassApRow> per_class;
  std::vector<double> map_per_threshold;
  double map50 = 0;        // mAP at the first threshold
  double map_sweep = 0;    // mean over the threshold sweep
  double precision = 0;    // micro-averaged at confidence_threshold, first threshold
  double recall = 0;
  std::size_t op_tp = 0, op_fp = 0, op_fn = 0;
  std::vector<MatchTableRow> match_table;
};

inline EvalReport evaluate(const std::vector<std::vector<DetBox>>& dets,
                           const std::vector<std::vector<GtBox>>& gts, const EvalConfig& cfg) {
  if (dets.size() != gts.size())
    throw std::invalid_argument("evaluate: detection and ground-truth image counts differ");
  if (cfg.thresholds.empty()) throw std::invalid_argument("evaluate: no IoU thresholds");
  const std::size_t images = gts.size();

  std::set<int> classes;
  for (const auto& img : gts)
    for (const auto& g : img) classes.insert(g.class_id);
  for (const auto& img : dets)
    for (const auto& d : img) classes.insert(d.class_id);

  EvalReport report;
  report.thresholds = cfg.thresholds;

  // matching is class-aware internally, so one match per (threshold, image)
  std::vector<std::vector<MatchResult>> matches(cfg.thresholds.size());
  for (std::size_t ti = 0; ti < cfg.thresholds.size(); ++ti)
    for (std::size_t im = 0; im < images; ++im)
      matches[ti].push_back(match_detections(dets[im], gts[im], cfg.thresholds[ti]));

  for (std::size_t im = 0; im < images; ++im)
    for (std::size_t di = 0; di < dets[im].size(); ++di)
      report.match_table.push_back(
          {im, di, dets[im][di].class_id, dets[im][di].confidence, matches[0][im].tp[di]});

  struct Pooled {
    double conf;
    std::size_t image, det;
    bool tp;
  };

  for (int cls : classes) {
    ClassApRow row;
    row.class_id = cls;
    for (const auto& img : gts)
      for (const auto& g : img) row.n_gt += g.class_id == cls ? 1 : 0;
    for (const auto& img : dets)
      for (const auto& d : img) row.n_det += d.class_id == cls ? 1 : 0;

    for (std::size_t ti = 0; ti < cfg.thresholds.size(); ++ti) {
      std::vector<Pooled> pooled;
      for (std::size_t im = 0; im < images; ++im)
        for (std::size_t di = 0; di < dets[im].size(); ++di) {
          if (dets[im][di].class_id != cls) continue;
          pooled.push_back({dets[im][di].confidence, im, di, matches[ti][im].tp[di]});
        }
      // stable cross-image ranking: confidence desc, then image, then index
      std::sort(pooled.begin(), pooled.end(), [](const Pooled& a, const Pooled& b) {
        if (a.conf != b.conf) return a.conf > b.conf;
        if (a.image != b.image) return a.image < b.image;
        return a.det < b.det;
      });
      std::vector<bool> flags;
      flags.reserve(pooled.size());
      for (const auto& p : pooled) flags.push_back(p.tp);
      row.ap.push_back(average_precision(flags, row.n_gt, cfg.method));
    }
    report.per_class.push_back(std::move(row));
  }

  // class mean per threshold (classes with nothing present never enter)
  for (std::size_t ti = 0; ti < cfg.thresholds.size(); ++ti) {
    double sum = 0;
    for (const auto& row : report.per_class) sum += row.ap[ti];
    report.map_per_threshold.push_back(
        report.per_class.empty() ? 0.0 : sum / static_cast<double>(report.per_class.size()));
  }
  report.map50 = report.map_per_threshold.front();
  report.map_sweep =
      std::accumulate(report.map_per_threshold.begin(), report.map_per_threshold.end(), 0.0) /
      static_cast<double>(report.map_per_threshold.size());

  // aggregate P/R at the confidence operating point, first threshold
  std::size_t tp = 0, fp = 0, total_gt = 0;
  for (std::size_t im = 0; im < images; ++im) {
    std::vector<DetBox> cut;
    for (const auto& d : dets[im])
      if (d.confidence >= cfg.confidence_threshold) cut.push_back(d);
    const auto match = match_detections(cut, gts[im], cfg.thresholds.front());
    for (bool t : match.tp) t ? ++tp : ++fp;
    total_gt += gts[im].size();
  }
  report.op_tp = tp;
  report.op_fp = fp;
  report.op_fn = total_gt - tp;
  const auto pr = pr_counts_to_metrics(tp, fp, report.op_fn);
  report.precision = pr.precision;
  report.recall = pr.recall;
  return report;
}

// ---------------------------------------------------------------------------
// file ingestion (YOLO-style text corpora)

class LabelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace labeldetail {

inline std::vector<std::vector<std::string>> read_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LabelError(path + ": cannot open");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> fields;
    std::string f;
    while (ls >> f) fields.push_back(f);
    rows.push_back(std::move(fields));
  }
  return rows;
}

inline double parse_field(const std::string& s, const std::string& path, std::size_t line,
                          const char* what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw LabelError(path + ": line " + std::to_string(line) + ": bad " + what + " '" + s + "'");
  }
}

inline int parse_class(const std::string& s, const std::string& path, std::size_t line) {
  const double v = parse_field(s, path, line, "class id");
  if (v < 0 || v != std::floor(v))
    throw LabelError(path + ": line " + std::to_string(line) +
                     ": class id must be a non-negative integer, got '" + s + "'");
  return static_cast<int>(v);
}

inline Box parse_box(const std::vector<std::string>& f, std::size_t offset,
                     const std::string& path, std::size_t line) {
  Box b;
  b.cx = parse_field(f[offset + 0], path, line, "cx");
  b.cy = parse_field(f[offset + 1], path, line, "cy");
  b.w = parse_field(f[offset + 2], path, line, "w");
  b.h = parse_field(f[offset + 3], path, line, "h");
  if (b.cx < 0 || b.cx > 1 || b.cy < 0 || b.cy > 1)
    throw LabelError(path + ": line " + std::to_string(line) +
                     ": center coordinates out of [0,1]");
  if (b.w <= 0 || b.w > 1 || b.h <= 0 || b.h > 1)
    throw LabelError(path + ": line " + std::to_string(line) + ": extents out of (0,1]");
  return b;
}

}  // namespace labeldetail

// Label line: class cx cy w h
inline std::vector<GtBox> parse_label_file(const std::string& path) {
  std::vector<GtBox> out;
  const auto rows = labeldetail::read_rows(path);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].empty()) continue;
    if (rows[i].size() != 5)
      throw LabelError(path + ": line " + std::to_string(i + 1) + ": expected 5 fields, got " +
                       std::to_string(rows[i].size()));
    GtBox g;
    g.class_id = labeldetail::parse_class(rows[i][0], path, i + 1);
    g.box = labeldetail::parse_box(rows[i], 1, path, i + 1);
    out.push_back(g);
  }
  return out;
}

// Prediction line: class conf cx cy w h
inline std::vector<DetBox> parse_prediction_file(const std::string& path) {
  std::vector<DetBox> out;
  const auto rows = labeldetail::read_rows(path);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].empty()) continue;
    if (rows[i].size() != 6)
      throw LabelError(path + ": line " + std::to_string(i + 1) + ": expected 6 fields, got " +
                       std::to_string(rows[i].size()));
    DetBox d;
    d.class_id = labeldetail::parse_class(rows[i][0], path, i + 1);
    d.confidence = labeldetail::parse_field(rows[i][1], path, i + 1, "confidence");
    if (d.confidence < 0 || d.confidence > 1)
      throw LabelError(path + ": line " + std::to_string(i + 1) + ": confidence out of [0,1]");
    d.box = labeldetail::parse_box(rows[i], 2, path, i + 1);
    out.push_back(d);
  }
  return out;
}

struct Corpus {
  std::vector<std::string> image_ids;
  std::vector<std::vector<GtBox>> gts;
  std::vector<std::vector<DetBox>> dets;
};

// Manifest lists image ids in evaluation order. A ground-truth file must
// exist for every entry (empty files mean "no objects"); a missing
// prediction file means "no detections".
inline Corpus load_corpus(const std::string& gt_dir, const std::string& pred_dir,
                          const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in) throw LabelError(manifest_path + ": cannot open manifest");
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string id;
    ls >> id;
    if (id.empty() || id[0] == '#') continue;
    const auto gt_path = (fs::path(gt_dir) / (id + ".txt")).string();
    if (!fs::exists(gt_path))
      throw LabelError(manifest_path + ": line " + std::to_string(line_no) +
                       ": missing label file for manifest entry '" + id + "'");
    corpus.image_ids.push_back(id);
    corpus.gts.push_back(parse_label_file(gt_path));
    const auto pred_path = (fs::path(pred_dir) / (id + ".txt")).string();
    corpus.dets.push_back(fs::exists(pred_path) ? parse_prediction_file(pred_path)
                                                : std::vector<DetBox>{});
  }
  if (corpus.image_ids.empty()) throw LabelError(manifest_path + ": manifest lists no images");
  return corpus;
}

// ---------------------------------------------------------------------------
// report rendering

inline std::string format_threshold(double t) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%.2f", t);
  return buf;
}

// Machine-readable lines: metric<TAB>class<TAB>threshold<TAB>value
inline std::string render_machine_report(const EvalReport& r) {
  std::ostringstream os;
  char value[32];
  const auto emit = [&](const std::string& metric, const std::string& cls,
                        const std::string& thr, double v) {
    std::snprintf(value, sizeof(value), "%.9f", v);
    os << metric << "\t" << cls << "\t" << thr << "\t" << value << "\n";
  };
  for (const auto& row : r.per_class)
    for (std::size_t ti = 0; ti < r.thresholds.size(); ++ti)
      emit("ap", std::to_string(row.class_id), format_threshold(r.thresholds[ti]), row.ap[ti]);
  for (std::size_t ti = 0; ti < r.thresholds.size(); ++ti)
    emit("map", "all", format_threshold(r.thresholds[ti]), r.map_per_threshold[ti]);
  if (r.thresholds.size() > 1)
    emit("map", "all",
         format_threshold(r.thresholds.front()) + ":" + format_threshold(r.thresholds.back()),
         r.map_sweep);
  emit("precision", "all", format_threshold(r.thresholds.front()), r.precision);
  emit("recall", "all", format_threshold(r.thresholds.front()), r.recall);
  return os.str();
}

inline std::string render_human_report(const EvalReport& r) {
  std::ostringstream os;
  os << "detection evaluation\n";
  os << "  thresholds:";
  for (double t : r.thresholds) os << " " << format_threshold(t);
  os << "\n\n";
  os << "  class   n_gt  n_det  AP@" << format_threshold(r.thresholds.front());
  if (r.thresholds.size() > 1) os << "  AP@sweep";
  os << "\n";
  for (const auto& row : r.per_class) {
    const double sweep = std::accumulate(row.ap.begin(), row.ap.end(), 0.0) /
                         static_cast<double>(row.ap.size());
    char buf[128];
    if (r.thresholds.size() > 1)
      std::snprintf(buf, sizeof(buf), "  %5d  %5zu  %5zu  %8.4f  %8.4f\n", row.class_id,
                    row.n_gt, row.n_det, row.ap.front(), sweep);
    else
      std::snprintf(buf, sizeof(buf), "  %5d  %5zu  %5zu  %8.4f\n", row.class_id, row.n_gt,
                    row.n_det, row.ap.front());
    os << buf;
  }
  os << "\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "  mAP@%s = %.6f\n", format_threshold(r.thresholds.front()).c_str(),
                r.map50);
  os << buf;
  if (r.thresholds.size() > 1) {
    std::snprintf(buf, sizeof(buf), "  mAP@%s:%s = %.6f\n",
                  format_threshold(r.thresholds.front()).c_str(),
                  format_threshold(r.thresholds.back()).c_str(), r.map_sweep);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf),
                "  precision = %.6f  recall = %.6f  (tp=%zu fp=%zu fn=%zu)\n", r.precision,
                r.recall, r.op_tp, r.op_fp, r.op_fn);
  os << buf;
  return os.str();
}

}  // namespace msv::eval
