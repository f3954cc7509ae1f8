#pragma once

// Detection metrics and reporting. AUROC is the exact Mann-Whitney statistic
// (ties count 1/2); FPR@TPR uses the largest threshold reaching the target
// TPR with no interpolation, so both match brute-force oracles exactly.
// Positive class = OOD, higher score = more OOD, detection rule score > t.

#include "sagd/attacks.hpp"
#include "sagd/common.hpp"
#include "sagd/scoring.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace sagd {

struct ScoreSet {
  std::vector<double> id_scores;
  std::vector<double> ood_scores;

  void validate() const {
    if (id_scores.empty() || ood_scores.empty())
      throw ContractViolation("ScoreSet: both sides must be nonempty");
    for (double s : id_scores)
      if (!std::isfinite(s)) throw ContractViolation("ScoreSet: non-finite ID score");
    for (double s : ood_scores)
      if (!std::isfinite(s)) throw ContractViolation("ScoreSet: non-finite OOD score");
  }
};

// P(ood > id) + P(ood = id)/2 over all pairs, via average ranks.
inline double auroc(const ScoreSet& scores) {
  scores.validate();
  const size_t n_id = scores.id_scores.size();
  const size_t n_ood = scores.ood_scores.size();
  struct Entry {
    double score;
    bool is_ood;
  };
  std::vector<Entry> all;
  all.reserve(n_id + n_ood);
  for (double s : scores.id_scores) all.push_back({s, false});
  for (double s : scores.ood_scores) all.push_back({s, true});
  std::sort(all.begin(), all.end(),
            [](const Entry& a, const Entry& b) { return a.score < b.score; });

  double rank_sum_ood = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double avg_rank = 0.5 * (double(i + 1) + double(j));  // 1-based
    for (size_t t = i; t < j; ++t)
      if (all[t].is_ood) rank_sum_ood += avg_rank;
    i = j;
  }
  const double u = rank_sum_ood - double(n_ood) * double(n_ood + 1) / 2.0;
  return u / (double(n_ood) * double(n_id));
}

// FPR at the largest threshold t with TPR(t) >= target, where
// TPR(t) = #(ood > t)/n_ood and FPR(t) = #(id > t)/n_id. Candidate
// thresholds are the distinct scores plus -infinity; no interpolation.
inline double fpr_at_tpr(const ScoreSet& scores, double target_tpr) {
  scores.validate();
  if (!(target_tpr > 0.0 && target_tpr <= 1.0))
    throw ContractViolation("fpr_at_tpr: target_tpr must be in (0, 1]");

  std::vector<double> thresholds;
  thresholds.reserve(scores.id_scores.size() + scores.ood_scores.size() + 1);
  thresholds.insert(thresholds.end(), scores.id_scores.begin(), scores.id_scores.end());
  thresholds.insert(thresholds.end(), scores.ood_scores.begin(),
                    scores.ood_scores.end());
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  auto frac_above = [](const std::vector<double>& v, double t) {
    size_t c = 0;
    for (double s : v)
      if (s > t) ++c;
    return double(c) / double(v.size());
  };

  // Scan candidates from the largest down; the first (largest) threshold
  // meeting the target wins. -infinity always reaches TPR = 1.
  for (auto it = thresholds.rbegin(); it != thresholds.rend(); ++it)
    if (frac_above(scores.ood_scores, *it) >= target_tpr)
      return frac_above(scores.id_scores, *it);
  return 1.0;  // -infinity threshold: everything flagged OOD
}

struct ROCResult {
  std::vector<double> thresholds;  // descending sweep, +inf first, -inf last
  std::vector<double> tpr;         // non-decreasing along the sweep
  std::vector<double> fpr;         // non-decreasing along the sweep
  double auroc = 0.0;
  double fpr_at_95_tpr = 0.0;
};

inline ROCResult roc_curve(const ScoreSet& scores) {
  scores.validate();
  std::vector<double> values;
  values.insert(values.end(), scores.id_scores.begin(), scores.id_scores.end());
  values.insert(values.end(), scores.ood_scores.begin(), scores.ood_scores.end());
  std::sort(values.begin(), values.end(), std::greater<>());
  values.erase(std::unique(values.begin(), values.end()), values.end());

  ROCResult roc;
  const double inf = std::numeric_limits<double>::infinity();
  auto push = [&](double t) {
    size_t tp = 0, fp = 0;
    for (double s : scores.ood_scores)
      if (s > t) ++tp;
    for (double s : scores.id_scores)
      if (s > t) ++fp;
    roc.thresholds.push_back(t);
    roc.tpr.push_back(double(tp) / double(scores.ood_scores.size()));
    roc.fpr.push_back(double(fp) / double(scores.id_scores.size()));
  };
  push(inf);
  for (double t : values) push(t);
  push(-inf);
  roc.auroc = auroc(scores);
  roc.fpr_at_95_tpr = fpr_at_tpr(scores, 0.95);
  return roc;
}

// ---------------------------------------------------------------------------
// Evaluation report: one row per attack condition plus the aggregate row
// (arithmetic mean over conditions, the no-attack condition included).
// ---------------------------------------------------------------------------

struct EvalRow {
  std::string condition;  // e.g. "clean", "pgd"
  std::string attack;     // attack name driving the condition
  double fpr95 = 0.0;
  double auc = 0.0;
  double auc_in = 0.0;
  double auc_out = 0.0;
  double n_id = 0.0;
  double n_ood = 0.0;
  double seed = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  EvalRow aggregate() const {
    if (rows.empty()) throw ContractViolation("EvalReport: no rows");
    EvalRow agg;
    agg.condition = "average";
    agg.attack = "-";
    const double n = double(rows.size());
    for (const EvalRow& r : rows) {
      agg.fpr95 += r.fpr95 / n;
      agg.auc += r.auc / n;
      agg.auc_in += r.auc_in / n;
      agg.auc_out += r.auc_out / n;
      agg.n_id += r.n_id / n;
      agg.n_ood += r.n_ood / n;
      agg.seed += r.seed / n;
    }
    return agg;
  }
};

namespace detail {

inline std::string row_to_csv(const EvalRow& r) {
  std::string s;
  s += r.condition + "," + r.attack + ",";
  s += format_double(r.fpr95) + "," + format_double(r.auc) + ",";
  s += format_double(r.auc_in) + "," + format_double(r.auc_out) + ",";
  s += format_double(r.n_id) + "," + format_double(r.n_ood) + ",";
  s += format_double(r.seed);
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline constexpr const char* kReportHeader =
    "condition,attack,fpr95,auc,auc_in,auc_out,n_id,n_ood,seed";

inline std::string report_to_csv(const EvalReport& report) {
  std::string out = std::string(kReportHeader) + "\n";
  for (const EvalRow& r : report.rows) out += detail::row_to_csv(r) + "\n";
  out += detail::row_to_csv(report.aggregate()) + "\n";
  return out;
}

inline void to_json(nlohmann::json& j, const EvalRow& r) {
  j = {{"condition", r.condition}, {"attack", r.attack}, {"fpr95", r.fpr95},
       {"auc", r.auc},             {"auc_in", r.auc_in}, {"auc_out", r.auc_out},
       {"n_id", r.n_id},           {"n_ood", r.n_ood},   {"seed", r.seed}};
}

inline void from_json(const nlohmann::json& j, EvalRow& r) {
  j.at("condition").get_to(r.condition);
  j.at("attack").get_to(r.attack);
  j.at("fpr95").get_to(r.fpr95);
  j.at("auc").get_to(r.auc);
  j.at("auc_in").get_to(r.auc_in);
  j.at("auc_out").get_to(r.auc_out);
  j.at("n_id").get_to(r.n_id);
  j.at("n_ood").get_to(r.n_ood);
  j.at("seed").get_to(r.seed);
}

inline std::string report_to_json_text(const EvalReport& report) {
  nlohmann::json j;
  j["rows"] = report.rows;
  j["aggregate"] = report.aggregate();
  return j.dump(2) + "\n";
}

// format: "csv" or "json".
inline void emit_report(const EvalReport& report, const std::filesystem::path& path,
                        const std::string& format) {
  if (format == "csv") {
    write_file_atomic(path, report_to_csv(report));
  } else if (format == "json") {
    write_file_atomic(path, report_to_json_text(report));
  } else {
    throw ConfigError("emit_report: unknown format '" + format + "'");
  }
}

inline EvalReport load_report(const std::filesystem::path& path,
                              const std::string& format) {
  EvalReport report;
  if (format == "csv") {
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != kReportHeader)
      throw IoError("report header mismatch in " + path.string());
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = detail::split_csv_line(line);
      if (f.size() != 9) throw IoError("bad report row in " + path.string());
      EvalRow r;
      r.condition = f[0];
      r.attack = f[1];
      r.fpr95 = parse_double(f[2]);
      r.auc = parse_double(f[3]);
      r.auc_in = parse_double(f[4]);
      r.auc_out = parse_double(f[5]);
      r.n_id = parse_double(f[6]);
      r.n_ood = parse_double(f[7]);
      r.seed = parse_double(f[8]);
      if (r.condition == "average") continue;  // recomputed on write
      report.rows.push_back(std::move(r));
    }
  } else if (format == "json") {
    nlohmann::json j = nlohmann::json::parse(read_file(path));
    report.rows = j.at("rows").get<std::vector<EvalRow>>();
  } else {
    throw ConfigError("load_report: unknown format '" + format + "'");
  }
  return report;
}

// ---------------------------------------------------------------------------
// Score histograms: shared-bin ID/OOD counts, a plain-text sidecar
// (left_edge,right_edge,id_count,ood_count per line), and an SVG rendering.
// ---------------------------------------------------------------------------

struct HistogramData {
  std::vector<double> left;
  std::vector<double> right;
  std::vector<long> id_count;
  std::vector<long> ood_count;
};

inline HistogramData make_histogram(const ScoreSet& scores, int bins = 40) {
  scores.validate();
  if (bins < 1) throw ContractViolation("make_histogram: bins must be >= 1");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (double s : scores.id_scores) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  for (double s : scores.ood_scores) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  if (lo == hi) {
    lo -= 0.5;
    hi += 0.5;
  }
  HistogramData h;
  const double width = (hi - lo) / bins;
  h.left.resize(static_cast<size_t>(bins));
  h.right.resize(static_cast<size_t>(bins));
  h.id_count.assign(static_cast<size_t>(bins), 0);
  h.ood_count.assign(static_cast<size_t>(bins), 0);
  for (int b = 0; b < bins; ++b) {
    h.left[static_cast<size_t>(b)] = lo + b * width;
    h.right[static_cast<size_t>(b)] = (b + 1 == bins) ? hi : lo + (b + 1) * width;
  }
  auto bin_of = [&](double s) {
    int b = static_cast<int>((s - lo) / width);
    return std::clamp(b, 0, bins - 1);
  };
  for (double s : scores.id_scores) h.id_count[static_cast<size_t>(bin_of(s))]++;
  for (double s : scores.ood_scores) h.ood_count[static_cast<size_t>(bin_of(s))]++;
  return h;
}

// Mass shared by the two normalized histograms: sum_b min(id_b, ood_b) over
// bin fractions. 0 for disjoint supports, 1 for identical binned shapes.
inline double histogram_overlap(const HistogramData& h) {
  long n_id = 0, n_ood = 0;
  for (long c : h.id_count) n_id += c;
  for (long c : h.ood_count) n_ood += c;
  double overlap = 0.0;
  for (size_t b = 0; b < h.id_count.size(); ++b)
    overlap += std::min(double(h.id_count[b]) / double(n_id),
                        double(h.ood_count[b]) / double(n_ood));
  return overlap;
}

inline std::string histogram_sidecar_text(const HistogramData& h) {
  std::string out = "left_edge,right_edge,id_count,ood_count\n";
  for (size_t b = 0; b < h.id_count.size(); ++b) {
    out += format_double(h.left[b]) + "," + format_double(h.right[b]) + "," +
           std::to_string(h.id_count[b]) + "," + std::to_string(h.ood_count[b]) + "\n";
  }
  return out;
}

inline HistogramData load_histogram_sidecar(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != "left_edge,right_edge,id_count,ood_count")
    throw IoError("histogram sidecar header mismatch in " + path.string());
  HistogramData h;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 4) throw IoError("bad histogram row in " + path.string());
    h.left.push_back(parse_double(f[0]));
    h.right.push_back(parse_double(f[1]));
    h.id_count.push_back(std::stol(f[2]));
    h.ood_count.push_back(std::stol(f[3]));
  }
  return h;
}

// Overlaid ID (blue) / OOD (green) bar chart.
inline std::string histogram_svg(const HistogramData& h, const std::string& title) {
  const int w = 640, hgt = 400, mx = 50, my = 40;
  long peak = 1;
  for (size_t b = 0; b < h.id_count.size(); ++b)
    peak = std::max({peak, h.id_count[b], h.ood_count[b]});
  const double plot_w = w - 2 * mx, plot_h = hgt - 2 * my;
  const double bw = plot_w / double(h.id_count.size());

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
         "\" height=\"" + std::to_string(hgt) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + std::to_string(w / 2) + "\" y=\"20\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"14\">" + title + "</text>\n";
  auto bar = [&](size_t b, long count, const char* color) {
    if (count == 0) return;
    const double bh = plot_h * double(count) / double(peak);
    svg += "<rect x=\"" + format_double(mx + b * bw) + "\" y=\"" +
           format_double(my + plot_h - bh) + "\" width=\"" + format_double(bw) +
           "\" height=\"" + format_double(bh) + "\" fill=\"" + color +
           "\" fill-opacity=\"0.5\"/>\n";
  };
  for (size_t b = 0; b < h.id_count.size(); ++b) {
    bar(b, h.id_count[b], "#3465a4");   // ID: blue
    bar(b, h.ood_count[b], "#4e9a06");  // OOD: green
  }
  svg += "<line x1=\"" + std::to_string(mx) + "\" y1=\"" + std::to_string(my + (int)plot_h) +
         "\" x2=\"" + std::to_string(w - mx) + "\" y2=\"" +
         std::to_string(my + (int)plot_h) + "\" stroke=\"black\"/>\n";
  svg += "<text x=\"" + std::to_string(mx) + "\" y=\"" + std::to_string(hgt - 8) +
         "\" font-family=\"sans-serif\" font-size=\"11\">" + format_double(h.left.front()) +
         "</text>\n";
  svg += "<text x=\"" + std::to_string(w - mx) + "\" y=\"" + std::to_string(hgt - 8) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
         format_double(h.right.back()) + "</text>\n";
  svg += "</svg>\n";
  return svg;
}

// One overlaid histogram per condition: <dir>/<name>_hist.svg plus the
// deterministic <dir>/<name>_hist_bins.txt sidecar.
inline void emit_histograms(const std::vector<std::pair<std::string, ScoreSet>>& per_condition,
                            const std::filesystem::path& dir, int bins = 40) {
  for (const auto& [name, scores] : per_condition) {
    if (scores.id_scores.empty() || scores.ood_scores.empty())
      throw ContractViolation("emit_histograms: empty scores for '" + name + "'");
    const HistogramData h = make_histogram(scores, bins);
    write_file_atomic(dir / (name + "_hist.svg"), histogram_svg(h, name));
    write_file_atomic(dir / (name + "_hist_bins.txt"), histogram_sidecar_text(h));
  }
}

// ---------------------------------------------------------------------------
// Adversarial AUC variants under one attack condition.
// ---------------------------------------------------------------------------

struct AucVariants {
  double auc = 0.0;      // both sides attacked
  double auc_in = 0.0;   // inliers only
  double auc_out = 0.0;  // outliers only
  ScoreSet both_scores;  // retained for FPR95 and histograms
  ScoreSet in_scores;
  ScoreSet out_scores;
};

// Scores a perturbed (or clean) batch pair with the scorer over the model's
// scoring embedding.
inline ScoreSet score_batches(DifferentiableModel& model, const Scorer& scorer,
                              const Mat& id_x, const Mat& ood_x) {
  ScoreSet s;
  const Mat id_z = model.scoring_embedding(id_x);
  for (Eigen::Index i = 0; i < id_z.rows(); ++i)
    s.id_scores.push_back(scorer.score(id_z.row(i).transpose()));
  const Mat ood_z = model.scoring_embedding(ood_x);
  for (Eigen::Index i = 0; i < ood_z.rows(); ++i)
    s.ood_scores.push_back(scorer.score(ood_z.row(i).transpose()));
  return s;
}

// AUC with both sides attacked, inliers only (AUC_In), outliers only
// (AUC_Out). With attack "none" all three coincide with the clean AUC.
inline AucVariants adversarial_auc_variants(DifferentiableModel& model,
                                            const Scorer& scorer, const Mat& id_x,
                                            const std::vector<int>& id_labels,
                                            const Mat& ood_x, const AttackConfig& cfg,
                                            Rng& rng) {
  AucVariants out;
  if (cfg.name == "none") {
    out.both_scores = score_batches(model, scorer, id_x, ood_x);
    out.in_scores = out.both_scores;
    out.out_scores = out.both_scores;
    out.auc = out.auc_in = out.auc_out = auroc(out.both_scores);
    return out;
  }
  auto [id_both, ood_both] =
      attack_for_eval(id_x, id_labels, ood_x, model, scorer, cfg, "both", rng);
  out.both_scores = score_batches(model, scorer, id_both.perturbed, ood_both.perturbed);
  out.auc = auroc(out.both_scores);

  // Inlier-only and outlier-only conditions reuse the same perturbations.
  out.in_scores = score_batches(model, scorer, id_both.perturbed, ood_both.clean);
  out.auc_in = auroc(out.in_scores);
  out.out_scores = score_batches(model, scorer, id_both.clean, ood_both.perturbed);
  out.auc_out = auroc(out.out_scores);
  return out;
}

}  // namespace sagd
