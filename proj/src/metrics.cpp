#include "milscreen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "milscreen/rng.hpp"

namespace milscreen {

namespace {

void check_classes(const ScoredSet& scored, const char* who) {
  bool pos = false;
  bool neg = false;
  for (const auto& s : scored) {
    if (s.label != 0 && s.label != 1) throw DomainError(std::string(who) + ": labels must be 0/1");
    if (!std::isfinite(s.score)) throw DomainError(std::string(who) + ": non-finite score");
    (s.label == 1 ? pos : neg) = true;
  }
  if (!pos || !neg) throw DomainError(std::string(who) + ": degenerate labels");
}

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

ScoredSet make_scored_set(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("make_scored_set: length mismatch");
  ScoredSet out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = {scores[i], labels[i], {}};
  return out;
}

double auc(const ScoredSet& scored) {
  check_classes(scored, "auc");
  std::vector<std::size_t> order(scored.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scored[a].score < scored[b].score; });
  double rank_sum = 0.0;
  double n_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scored[order[j]].score == scored[order[i]].score) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (scored[order[k]].label == 1) {
        rank_sum += midrank;
        n_pos += 1.0;
      }
    }
    i = j;
  }
  const double n_neg = static_cast<double>(scored.size()) - n_pos;
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return auc(make_scored_set(scores, labels));
}

void RocCurve::validate() const {
  if (points.size() < 2) throw DomainError("roc: curve needs at least two points");
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (!(p.sensitivity >= 0.0 && p.sensitivity <= 1.0 && p.specificity >= 0.0 &&
          p.specificity <= 1.0)) {
      throw DomainError("roc: point " + std::to_string(i) + " outside [0,1]");
    }
    if (i > 0) {
      const auto& q = points[i - 1];
      if (!(p.threshold < q.threshold)) throw DomainError("roc: thresholds must strictly decrease");
      if (p.sensitivity < q.sensitivity) throw DomainError("roc: sensitivity must not decrease");
      if (p.specificity > q.specificity) throw DomainError("roc: specificity must not increase");
    }
  }
  const auto& first = points.front();
  const auto& last = points.back();
  if (first.sensitivity != 0.0 || first.specificity != 1.0 || last.sensitivity != 1.0 ||
      last.specificity != 0.0) {
    throw DomainError("roc: curve must start at (se=0,sp=1) and end at (se=1,sp=0)");
  }
}

RocCurve roc(const ScoredSet& scored) {
  check_classes(scored, "roc");
  std::vector<std::size_t> order(scored.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scored[a].score > scored[b].score; });
  double n_pos = 0.0;
  for (const auto& s : scored) n_pos += s.label;
  const double n_neg = static_cast<double>(scored.size()) - n_pos;

  RocCurve curve;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 1.0});
  double tp = 0.0;
  double fp = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = scored[order[i]].score;
    while (i < order.size() && scored[order[i]].score == t) {
      (scored[order[i]].label == 1 ? tp : fp) += 1.0;
      ++i;
    }
    curve.points.push_back({t, tp / n_pos, (n_neg - fp) / n_neg});
  }
  return curve;
}

double roc_area(const RocCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    area += (a.specificity - b.specificity) * 0.5 * (a.sensitivity + b.sensitivity);
  }
  return area;
}

void write_roc_csv(const std::filesystem::path& path, const RocCurve& curve) {
  std::ofstream out(path);
  if (!out) throw FormatError("roc: cannot write " + path.string());
  out << "threshold,sensitivity,specificity\n";
  for (const auto& p : curve.points) {
    out << format_double(p.threshold) << ',' << format_double(p.sensitivity) << ','
        << format_double(p.specificity) << '\n';
  }
}

RocCurve read_roc_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("roc: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("roc: empty file " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "threshold,sensitivity,specificity") {
    throw FormatError("roc: header must be 'threshold,sensitivity,specificity'");
  }
  RocCurve curve;
  curve.provenance = RocProvenance::loaded;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::array<double, 3> v{};
    std::stringstream ss(line);
    std::string field;
    std::size_t k = 0;
    while (std::getline(ss, field, ',')) {
      if (k >= 3) throw FormatError("roc: line " + std::to_string(lineno) + " has too many fields");
      char* end = nullptr;
      v[k] = std::strtod(field.c_str(), &end);
      if (field.empty() || end != field.c_str() + field.size()) {
        throw FormatError("roc: line " + std::to_string(lineno) + ": bad number '" + field + "'");
      }
      ++k;
    }
    if (k != 3) throw FormatError("roc: line " + std::to_string(lineno) + " needs 3 fields");
    curve.points.push_back({v[0], v[1], v[2]});
  }
  try {
    curve.validate();
  } catch (const DomainError& e) {
    throw FormatError(std::string(e.what()) + " in " + path.string());
  }
  return curve;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw DomainError("quantile: empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

ConfidenceInterval bootstrap_ci(const ScoredSet& scored, int n_boot, double level,
                                std::uint64_t seed, int threads) {
  check_classes(scored, "bootstrap_ci");
  if (n_boot < 100) throw DomainError("bootstrap_ci: n_boot must be >= 100");
  if (!(level > 0.0 && level < 1.0)) throw DomainError("bootstrap_ci: level must lie in (0,1)");

  const std::size_t n = scored.size();
  std::vector<double> aucs(static_cast<std::size_t>(n_boot));
  auto run = [&](std::size_t begin, std::size_t end) {
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (std::size_t r = begin; r < end; ++r) {
      Rng rng(derive_seed(seed, {r}));
      while (true) {
        int pos = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const auto j = static_cast<std::size_t>(rng() % n);
          scores[i] = scored[j].score;
          labels[i] = scored[j].label;
          pos += labels[i];
        }
        if (pos > 0 && pos < static_cast<int>(n)) break;
      }
      aucs[r] = auc(scores, labels);
    }
  };
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1) {
    run(0, aucs.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (aucs.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t b = w * chunk;
      const std::size_t e = std::min(aucs.size(), b + chunk);
      if (b < e) pool.emplace_back(run, b, e);
    }
  }
  const double tail = (1.0 - level) / 2.0;
  return {quantile(aucs, tail), quantile(aucs, 1.0 - tail)};
}

YoudenPoint youden_threshold(const RocCurve& curve) {
  if (curve.points.size() < 2) throw DomainError("youden_threshold: degenerate curve");
  const RocPoint* best = nullptr;
  double best_j = -std::numeric_limits<double>::infinity();
  for (const auto& p : curve.points) {
    const double j = p.sensitivity + p.specificity - 1.0;
    if (j > best_j || (j == best_j && p.specificity > best->specificity)) {
      best = &p;
      best_j = j;
    }
  }
  return {best->threshold, best->sensitivity, best->specificity, best_j};
}

std::vector<StratumAuc> stratified_auc(const ScoredSet& scored, const std::string& key,
                                       std::size_t min_group_size) {
  const bool known = std::any_of(scored.begin(), scored.end(),
                                 [&](const ScoredSlide& s) { return s.strata.count(key) > 0; });
  if (!known) throw DomainError("stratified_auc: unknown stratum key '" + key + "'");
  std::map<std::string, ScoredSet> groups;
  for (const auto& s : scored) {
    const auto it = s.strata.find(key);
    groups[it == s.strata.end() ? "NA" : it->second].push_back(s);
  }
  std::vector<StratumAuc> out;
  for (const auto& [name, set] : groups) {
    StratumAuc row;
    row.group = name;
    row.n = set.size();
    for (const auto& s : set) row.n_positive += static_cast<std::size_t>(s.label);
    row.degenerate = row.n_positive == 0 || row.n_positive == row.n;
    if (!row.degenerate) row.auc = auc(set);
    row.small = row.n < min_group_size;
    out.push_back(std::move(row));
  }
  return out;
}

void write_strata_csv(const std::filesystem::path& path, const std::string& key,
                      const std::vector<StratumAuc>& rows) {
  std::ofstream out(path);
  if (!out) throw FormatError("strata: cannot write " + path.string());
  out << "key,group,n,n_positive,auc,degenerate,small\n";
  for (const auto& r : rows) {
    out << key << ',' << r.group << ',' << r.n << ',' << r.n_positive << ','
        << (r.auc ? format_double(*r.auc) : "NA") << ',' << (r.degenerate ? 1 : 0) << ','
        << (r.small ? 1 : 0) << '\n';
  }
}

double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

namespace {

struct IrlsFit {
  Vectord beta;
  Tensor2Dd information;
  int iterations = 0;
  bool converged = false;
};

IrlsFit irls(const Tensor2Dd& X, const Vectord& y, double ridge) {
  const Eigen::Index p = X.cols();
  IrlsFit fit;
  fit.beta = Vectord::Zero(p);
  const Tensor2Dd penalty = ridge * Tensor2Dd::Identity(p, p);
  for (int it = 0; it < 100; ++it) {
    const Vectord eta = X * fit.beta;
    const Vectord mu = eta.unaryExpr([](double v) { return sigmoid(v); });
    const Vectord w = (mu.array() * (1.0 - mu.array())).matrix();
    const Vectord score = X.transpose() * (y - mu) - ridge * fit.beta;
    fit.information = X.transpose() * w.asDiagonal() * X + penalty;
    const Vectord step = fit.information.ldlt().solve(score);
    fit.iterations = it + 1;
    if (!all_finite(step)) break;
    fit.beta += step;
    if (step.cwiseAbs().maxCoeff() < 1e-10) {
      fit.converged = true;
      break;
    }
  }
  const Vectord mu = (X * fit.beta).unaryExpr([](double v) { return sigmoid(v); });
  const Vectord w = (mu.array() * (1.0 - mu.array())).matrix();
  fit.information = X.transpose() * w.asDiagonal() * X + penalty;
  return fit;
}

}  // namespace

LogisticImportance logistic_importance(const Tensor2Dd& X, const std::vector<int>& y,
                                       const std::vector<std::string>& names) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols() + 1;
  if (static_cast<std::size_t>(n) != y.size()) throw ShapeError("logistic_importance: X/y rows differ");
  if (!names.empty() && static_cast<Eigen::Index>(names.size()) != X.cols()) {
    throw ShapeError("logistic_importance: names length differs from X columns");
  }
  if (n <= p) throw DomainError("logistic_importance: need more rows than features");
  if (!all_finite(X)) throw DomainError("logistic_importance: non-finite design matrix");

  std::vector<std::string> labels{"(intercept)"};
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    labels.push_back(names.empty() ? "x" + std::to_string(j + 1) : names[static_cast<std::size_t>(j)]);
  }

  Tensor2Dd design(n, p);
  design.col(0).setOnes();
  design.rightCols(X.cols()) = X;
  Vectord yv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (y[static_cast<std::size_t>(i)] != 0 && y[static_cast<std::size_t>(i)] != 1) {
      throw DomainError("logistic_importance: labels must be 0/1");
    }
    yv(i) = y[static_cast<std::size_t>(i)];
  }

  // Collinear columns make the information matrix singular for any beta.
  for (Eigen::Index j = 1; j <= p; ++j) {
    Eigen::ColPivHouseholderQR<Tensor2Dd> qr(design.leftCols(j));
    if (qr.rank() < j) {
      throw DomainError("logistic_importance: singular information matrix; column '" +
                        labels[static_cast<std::size_t>(j - 1)] +
                        "' is a linear combination of earlier columns");
    }
  }

  LogisticImportance out;
  IrlsFit fit = irls(design, yv, 0.0);
  if (!all_finite(fit.beta) || fit.beta.cwiseAbs().maxCoeff() > 15.0) {
    out.separation = true;
    out.ridge_applied = true;
    fit = irls(design, yv, 1e-6);
  }
  out.iterations = fit.iterations;
  out.converged = fit.converged;

  Eigen::LDLT<Tensor2Dd> ldlt(fit.information);
  const Tensor2Dd covariance = ldlt.solve(Tensor2Dd::Identity(p, p));
  constexpr double kZ975 = 1.959963984540054;
  for (Eigen::Index j = 0; j < p; ++j) {
    CoefficientReport r;
    r.name = labels[static_cast<std::size_t>(j)];
    r.coefficient = fit.beta(j);
    r.std_error = std::sqrt(std::max(0.0, covariance(j, j)));
    r.ci_low = r.coefficient - kZ975 * r.std_error;
    r.ci_high = r.coefficient + kZ975 * r.std_error;
    r.z = r.std_error > 0.0 ? r.coefficient / r.std_error : 0.0;
    r.p_value = std::erfc(std::abs(r.z) / std::sqrt(2.0));
    out.coefficients.push_back(std::move(r));
  }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw DomainError("median: empty sample");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

std::vector<GroupAttention> attention_by_group(
    const std::vector<FeatureBag>& bags,
    const std::vector<std::vector<SignedAttention<double>>>& signed_attentions) {
  if (bags.size() != signed_attentions.size()) {
    throw ShapeError("attention_by_group: one attention vector per bag required");
  }
  std::vector<GroupAttention> out;
  bool any_groups = false;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const auto& bag = bags[b];
    if (!bag.has_groups()) continue;
    any_groups = true;
    const auto& att = signed_attentions[b];
    if (att.size() != bag.tile_groups.size()) {
      throw ShapeError("attention_by_group: attention length differs from tile count for " +
                       bag.slide_id);
    }
    std::map<std::uint8_t, std::pair<std::vector<double>, std::vector<double>>> cells;
    for (std::size_t k = 0; k < att.size(); ++k) {
      auto& cell = cells[bag.tile_groups[k]];
      (att[k].positive ? cell.first : cell.second).push_back(att[k].attention);
    }
    for (auto& [group, cell] : cells) {
      GroupAttention g;
      g.slide_id = bag.slide_id;
      g.group = group;
      g.n_positive = cell.first.size();
      g.n_negative = cell.second.size();
      if (!cell.first.empty()) g.median_positive = median(cell.first);
      if (!cell.second.empty()) g.median_negative = median(cell.second);
      out.push_back(std::move(g));
    }
  }
  if (!any_groups) throw DomainError("attention_by_group: no grouped tiles");
  return out;
}

}  // namespace milscreen
