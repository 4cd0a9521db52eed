/*
 * Copyright 2026 The subjlab Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "subjlab/error.hpp"
#include "subjlab/losses.hpp"
#include "subjlab/util.hpp"

namespace subjlab {

struct PRF1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // A zero denominator was replaced by 0.
  bool degenerate = false;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// Precision, recall and F1 of `positive` predictions. Zero denominators give
// 0 with the degenerate flag set.
inline PRF1 prf1(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> gold,
                 std::uint8_t positive = 1) {
  if (predictions.size() != gold.size()) {
    throw ShapeError("prf1: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(gold.size()) + " gold labels");
  }
  PRF1 r;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const bool p = predictions[i] == positive;
    const bool g = gold[i] == positive;
    if (p && g) ++r.tp;
    else if (p) ++r.fp;
    else if (g) ++r.fn;
    else ++r.tn;
  }
  const auto safe_div = [&r](double a, double b) {
    if (b == 0.0) {
      r.degenerate = true;
      return 0.0;
    }
    return a / b;
  };
  r.precision = safe_div(static_cast<double>(r.tp), static_cast<double>(r.tp + r.fp));
  r.recall = safe_div(static_cast<double>(r.tp), static_cast<double>(r.tp + r.fn));
  const double pr = r.precision + r.recall;
  r.f1 = pr > 0.0 ? 2.0 * r.precision * r.recall / pr : 0.0;
  if (pr == 0.0) r.degenerate = true;
  return r;
}

// Unweighted mean of P, R and F1 taken independently.
inline PRF1 macro_average(std::span<const PRF1> per_value) {
  if (per_value.empty()) throw Error("macro_average of an empty list");
  PRF1 out;
  for (const auto& m : per_value) {
    out.precision += m.precision;
    out.recall += m.recall;
    out.f1 += m.f1;
    out.degenerate = out.degenerate || m.degenerate;
  }
  const auto n = static_cast<double>(per_value.size());
  out.precision /= n;
  out.recall /= n;
  out.f1 /= n;
  return out;
}

// 1-based fractional ranks; tied entries share the mean of their positions.
inline std::vector<double> midranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

inline std::optional<double> pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("correlation: length mismatch");
  if (xs.size() < 2) throw ShapeError("correlation needs at least two pairs");
  const auto n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Tie-corrected Spearman correlation (Pearson on mid-ranks). nullopt when
// either side is constant.
inline std::optional<double> spearman_rho(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("spearman_rho: length mismatch");
  if (xs.size() < 2) throw ShapeError("spearman_rho needs at least two pairs");
  const auto rx = midranks(xs);
  const auto ry = midranks(ys);
  return pearson(rx, ry);
}

// Fair-coin predictions, one per gold label.
inline std::vector<std::uint8_t> random_baseline(std::span<const std::uint8_t> gold, std::uint64_t seed) {
  if (gold.empty()) throw Error("random baseline needs a non-empty gold sequence");
  Rng rng(mix64(seed) ^ 0xba5e11eULL);
  std::vector<std::uint8_t> out(gold.size());
  for (auto& p : out) p = rng.coin() ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct ValueMetrics {
  std::string name;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support_pos = 0;
  std::size_t support_neg = 0;
  bool degenerate = false;
};

struct Dispersion {
  std::vector<ValueMetrics> per_value;  // std of P, R, F1 per value
  PRF1 macro;                           // std of macro P, R, F1
  std::optional<double> spearman_rho;
};

struct MetricsReport {
  std::string method;
  std::vector<ValueMetrics> per_value;
  PRF1 macro;
  // Spearman between per-value F1 and the per-value subjectivity ratio.
  std::optional<double> spearman_rho;
  std::vector<double> subjectivity_ratios;
  std::size_t runs = 1;
  std::optional<Dispersion> dispersion;
  nlohmann::json manifest = nlohmann::json::object();
};

// Builds a single-run report from per-value predictions and gold labels.
// `ratios` (may be empty) are the subjectivity ratios used for the
// correlation; a value whose ratio is undefined should carry NaN.
inline MetricsReport make_report(const std::string& method, const std::vector<std::string>& value_names,
                                 const std::vector<std::vector<std::uint8_t>>& predictions,
                                 const std::vector<std::vector<std::uint8_t>>& gold,
                                 const std::vector<double>& ratios) {
  if (predictions.size() != value_names.size() || gold.size() != value_names.size()) {
    throw ShapeError("make_report: one prediction and gold list per value required");
  }
  MetricsReport r;
  r.method = method;
  std::vector<PRF1> all;
  for (std::size_t v = 0; v < value_names.size(); ++v) {
    const auto m = prf1(predictions[v], gold[v]);
    all.push_back(m);
    ValueMetrics vm;
    vm.name = value_names[v];
    vm.precision = m.precision;
    vm.recall = m.recall;
    vm.f1 = m.f1;
    vm.support_pos = m.tp + m.fn;
    vm.support_neg = m.fp + m.tn;
    vm.degenerate = m.degenerate;
    r.per_value.push_back(vm);
  }
  r.macro = macro_average(all);
  r.subjectivity_ratios = ratios;
  if (ratios.size() == value_names.size() && ratios.size() >= 2 &&
      std::all_of(ratios.begin(), ratios.end(), [](double x) { return std::isfinite(x); })) {
    std::vector<double> f1s;
    for (const auto& vm : r.per_value) f1s.push_back(vm.f1);
    r.spearman_rho = spearman_rho(f1s, ratios);
  }
  return r;
}

inline double sample_std(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  if (std::all_of(xs.begin(), xs.end(), [&](double x) { return x == xs.front(); })) return 0.0;
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

inline double mean_of(std::span<const double> xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

// Mean and sample (n-1) standard deviation of every metric across runs. The
// manifest lists the seeds of all runs.
inline MetricsReport aggregate_runs(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw Error("aggregate_runs of an empty list");
  const auto& first = reports.front();
  for (const auto& r : reports) {
    if (r.per_value.size() != first.per_value.size()) throw Error("aggregate_runs: heterogeneous value sets");
    for (std::size_t v = 0; v < r.per_value.size(); ++v) {
      if (r.per_value[v].name != first.per_value[v].name) throw Error("aggregate_runs: heterogeneous value sets");
    }
    if (r.method != first.method) throw Error("aggregate_runs: reports of different methods");
  }
  if (reports.size() == 1) return first;

  MetricsReport out;
  out.method = first.method;
  out.runs = reports.size();
  out.subjectivity_ratios = first.subjectivity_ratios;
  Dispersion disp;
  const auto collect = [&](auto getter) {
    std::vector<double> xs;
    for (const auto& r : reports) xs.push_back(getter(r));
    return xs;
  };
  for (std::size_t v = 0; v < first.per_value.size(); ++v) {
    ValueMetrics mean_vm = first.per_value[v];
    ValueMetrics std_vm;
    std_vm.name = mean_vm.name;
    const auto p = collect([v](const MetricsReport& r) { return r.per_value[v].precision; });
    const auto rc = collect([v](const MetricsReport& r) { return r.per_value[v].recall; });
    const auto f = collect([v](const MetricsReport& r) { return r.per_value[v].f1; });
    mean_vm.precision = mean_of(p);
    mean_vm.recall = mean_of(rc);
    mean_vm.f1 = mean_of(f);
    mean_vm.degenerate = std::any_of(reports.begin(), reports.end(),
                                     [v](const MetricsReport& r) { return r.per_value[v].degenerate; });
    std_vm.precision = sample_std(p);
    std_vm.recall = sample_std(rc);
    std_vm.f1 = sample_std(f);
    out.per_value.push_back(mean_vm);
    disp.per_value.push_back(std_vm);
  }
  const auto mp = collect([](const MetricsReport& r) { return r.macro.precision; });
  const auto mr = collect([](const MetricsReport& r) { return r.macro.recall; });
  const auto mf = collect([](const MetricsReport& r) { return r.macro.f1; });
  out.macro.precision = mean_of(mp);
  out.macro.recall = mean_of(mr);
  out.macro.f1 = mean_of(mf);
  disp.macro.precision = sample_std(mp);
  disp.macro.recall = sample_std(mr);
  disp.macro.f1 = sample_std(mf);
  if (std::all_of(reports.begin(), reports.end(), [](const MetricsReport& r) { return r.spearman_rho.has_value(); })) {
    const auto rho = collect([](const MetricsReport& r) { return *r.spearman_rho; });
    out.spearman_rho = mean_of(rho);
    disp.spearman_rho = sample_std(rho);
  }
  out.dispersion = std::move(disp);

  out.manifest = first.manifest;
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& r : reports) {
    if (r.manifest.contains("seeds")) {
      for (const auto& s : r.manifest["seeds"]) seeds.push_back(s);
    } else if (r.manifest.contains("seed")) {
      seeds.push_back(r.manifest["seed"]);
    }
  }
  out.manifest.erase("seed");
  out.manifest["seeds"] = seeds;
  return out;
}

namespace detail {
inline nlohmann::json opt_json(const std::optional<double>& x) {
  return x ? nlohmann::json(*x) : nlohmann::json(nullptr);
}
}  // namespace detail

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["positive_class"] = "subjective";
  nlohmann::json pv = nlohmann::json::array();
  for (std::size_t v = 0; v < r.per_value.size(); ++v) {
    const auto& m = r.per_value[v];
    nlohmann::json e{{"value", m.name},
                     {"precision", m.precision},
                     {"recall", m.recall},
                     {"f1", m.f1},
                     {"support_subjective", m.support_pos},
                     {"support_non_subjective", m.support_neg},
                     {"degenerate", m.degenerate}};
    if (v < r.subjectivity_ratios.size() && std::isfinite(r.subjectivity_ratios[v])) {
      e["subjectivity_ratio"] = r.subjectivity_ratios[v];
    }
    if (r.dispersion) {
      const auto& s = r.dispersion->per_value[v];
      e["std"] = {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
    }
    pv.push_back(e);
  }
  j["per_value"] = pv;
  j["macro"] = {{"precision", r.macro.precision}, {"recall", r.macro.recall}, {"f1", r.macro.f1}};
  j["spearman_rho"] = detail::opt_json(r.spearman_rho);
  j["runs"] = r.runs;
  if (r.dispersion) {
    j["macro_std"] = {{"precision", r.dispersion->macro.precision},
                      {"recall", r.dispersion->macro.recall},
                      {"f1", r.dispersion->macro.f1}};
    j["spearman_rho_std"] = detail::opt_json(r.dispersion->spearman_rho);
  }
  j["manifest"] = r.manifest;
  return j;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string fixed(double x, int digits) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(digits);
  ss << x;
  return ss.str();
}

// Flat CSV: one row per value per report, plus a macro row.
inline std::string to_flat_csv(std::span<const MetricsReport> reports, const std::string& config_hash) {
  std::ostringstream out;
  out << "method,run,value,precision,recall,f1,support_subjective,support_non_subjective,config_hash\n";
  for (const auto& r : reports) {
    const std::string run = r.runs > 1 ? "mean_of_" + std::to_string(r.runs)
                                       : (r.manifest.contains("seed") ? r.manifest["seed"].dump() : "0");
    for (const auto& m : r.per_value) {
      out << csv_escape(r.method) << "," << run << "," << csv_escape(m.name) << "," << format_double(m.precision)
          << "," << format_double(m.recall) << "," << format_double(m.f1) << "," << m.support_pos << ","
          << m.support_neg << "," << config_hash << "\n";
    }
    out << csv_escape(r.method) << "," << run << ",macro," << format_double(r.macro.precision) << ","
        << format_double(r.macro.recall) << "," << format_double(r.macro.f1) << ",,," << config_hash << "\n";
  }
  return out.str();
}

// One row per method with values as column groups (P, R, F1 each), macro
// scores and the correlation. Aggregated reports print "mean±std".
inline std::string to_table_csv(std::span<const MetricsReport> reports, const std::string& config_hash) {
  std::ostringstream out;
  if (reports.empty()) return {};
  out << "method";
  for (const auto& m : reports.front().per_value) {
    for (const char* s : {"P", "R", "F1"}) out << "," << csv_escape(m.name + " " + s);
  }
  out << ",macro P,macro R,macro F1,rho,runs,config_hash\n";
  const auto cell = [](double mean, std::optional<double> sd) {
    return sd ? fixed(mean, 2) + "±" + fixed(*sd, 2) : fixed(mean, 2);
  };
  for (const auto& r : reports) {
    out << csv_escape(r.method);
    for (std::size_t v = 0; v < r.per_value.size(); ++v) {
      const auto& m = r.per_value[v];
      const ValueMetrics* s = r.dispersion ? &r.dispersion->per_value[v] : nullptr;
      out << "," << cell(m.precision, s ? std::optional(s->precision) : std::nullopt) << ","
          << cell(m.recall, s ? std::optional(s->recall) : std::nullopt) << ","
          << cell(m.f1, s ? std::optional(s->f1) : std::nullopt);
    }
    const PRF1* ms = r.dispersion ? &r.dispersion->macro : nullptr;
    out << "," << cell(r.macro.precision, ms ? std::optional(ms->precision) : std::nullopt) << ","
        << cell(r.macro.recall, ms ? std::optional(ms->recall) : std::nullopt) << ","
        << cell(r.macro.f1, ms ? std::optional(ms->f1) : std::nullopt) << ",";
    if (r.spearman_rho) {
      out << cell(*r.spearman_rho, r.dispersion ? r.dispersion->spearman_rho : std::nullopt);
    } else {
      out << "undefined";
    }
    out << "," << r.runs << "," << config_hash << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Embedding geometry

struct ClassSimilarity {
  double intra = 0.0;
  double inter = 0.0;
};

// Mean cosine similarity over distinct same-label pairs and over cross-label
// pairs.
inline ClassSimilarity class_similarity(const Eigen::MatrixXd& embeddings, std::span<const std::uint8_t> labels) {
  if (static_cast<std::size_t>(embeddings.rows()) != labels.size()) throw ShapeError("class_similarity: row count");
  const auto unit = normalize(embeddings).unit;
  const Eigen::MatrixXd sims = unit * unit.transpose();
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (Eigen::Index i = 0; i < sims.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < sims.cols(); ++j) {
      if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
        intra += sims(i, j);
        ++n_intra;
      } else {
        inter += sims(i, j);
        ++n_inter;
      }
    }
  }
  if (n_intra == 0 || n_inter == 0) throw Error("class_similarity needs both classes and a repeated class");
  return {intra / static_cast<double>(n_intra), inter / static_cast<double>(n_inter)};
}

// Mean cosine similarity of row i of `a` with row i of `b`.
inline double paired_similarity(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.rows() == 0) throw ShapeError("paired_similarity: row mismatch");
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) s += cosine_similarity(a.row(i), b.row(i));
  return s / static_cast<double>(a.rows());
}

// Mean cosine similarity over all distinct row pairs.
inline double mean_pairwise_similarity(const Eigen::MatrixXd& a) {
  if (a.rows() < 2) throw ShapeError("mean_pairwise_similarity needs two rows");
  const auto unit = normalize(a).unit;
  const Eigen::MatrixXd sims = unit * unit.transpose();
  const double n = static_cast<double>(a.rows());
  return (sims.sum() - sims.trace()) / (n * (n - 1.0));
}

// Projection onto the top principal components. Each component's sign is
// fixed so its largest-magnitude loading is positive.
inline Eigen::MatrixXd principal_components(const Eigen::MatrixXd& x, std::size_t n_components = 2) {
  const auto d = x.cols();
  const auto k = static_cast<Eigen::Index>(n_components);
  if (x.rows() == 0) return Eigen::MatrixXd(0, k);
  Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(x.rows() - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(d, k);
  for (Eigen::Index c = 0; c < std::min(k, d); ++c) {
    Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(c) = v;
  }
  return centered * basis;
}

}  // namespace subjlab
