#include "ccdm/labelspace.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ccdm {

nlohmann::json LabelSpace::to_json() const {
  return {{"raw_min", raw_min},       {"raw_max", raw_max}, {"sigma_delta", sigma_delta},
          {"kappa_base", kappa_base}, {"m_kappa", m_kappa}, {"kappa", kappa},
          {"nu", nu},                 {"N", labels.size()}, {"N_distinct", distinct.size()}};
}

LabelSpace LabelSpace::from_json(const nlohmann::json& j) {
  LabelSpace ls;
  ls.raw_min = j.at("raw_min").get<double>();
  ls.raw_max = j.at("raw_max").get<double>();
  ls.sigma_delta = j.at("sigma_delta").get<double>();
  ls.kappa_base = j.at("kappa_base").get<double>();
  ls.m_kappa = j.at("m_kappa").get<int>();
  ls.kappa = j.at("kappa").get<double>();
  ls.nu = j.at("nu").get<double>();
  return ls;
}

std::vector<double> distinct_sorted(std::span<const double> labels) {
  std::vector<double> d(labels.begin(), labels.end());
  std::sort(d.begin(), d.end());
  d.erase(std::unique(d.begin(), d.end()), d.end());
  return d;
}

LabelSpace normalize_labels(std::span<const double> raw_labels, double raw_min, double raw_max) {
  if (raw_labels.size() < 2) throw std::invalid_argument("need at least 2 labels to normalize");
  if (!(raw_max > raw_min)) throw std::invalid_argument("degenerate label range: max <= min");
  LabelSpace ls;
  ls.raw_min = raw_min;
  ls.raw_max = raw_max;
  ls.labels.reserve(raw_labels.size());
  for (double r : raw_labels) {
    if (r < raw_min || r > raw_max)
      throw std::invalid_argument("label " + std::to_string(r) + " outside the declared bounds");
    ls.labels.push_back(std::clamp(ls.normalize(r), 0.0, 1.0));
  }
  ls.distinct = distinct_sorted(ls.labels);
  return ls;
}

LabelSpace normalize_labels(std::span<const double> raw_labels) {
  if (raw_labels.size() < 2) throw std::invalid_argument("need at least 2 labels to normalize");
  const auto [lo, hi] = std::minmax_element(raw_labels.begin(), raw_labels.end());
  if (!(*hi > *lo)) throw std::invalid_argument("constant label array: range is degenerate");
  return normalize_labels(raw_labels, *lo, *hi);
}

double kde_bandwidth(std::span<const double> labels) {
  const auto n = labels.size();
  if (n < 2) throw std::invalid_argument("bandwidth needs at least 2 labels");
  double mean = 0.0;
  for (double y : labels) mean += y;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double y : labels) ss += (y - mean) * (y - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0.0)) throw std::invalid_argument("bandwidth undefined: labels have zero spread");
  return std::pow(4.0 * std::pow(sd, 5) / (3.0 * static_cast<double>(n)), 0.2);
}

VicinityParams vicinity_params(std::span<const double> distinct, int m_kappa) {
  if (distinct.size() < 2) throw std::invalid_argument("vicinity needs at least 2 distinct labels");
  if (m_kappa < 0) throw std::invalid_argument("m_kappa must be nonnegative");
  double gap = 0.0;
  for (std::size_t i = 1; i < distinct.size(); ++i) gap = std::max(gap, distinct[i] - distinct[i - 1]);
  VicinityParams p;
  p.kappa_base = gap;
  p.kappa = m_kappa * gap;
  p.nu = p.kappa > 0.0 ? 1.0 / (p.kappa * p.kappa) : 0.0;
  return p;
}

namespace {

LabelSpace finish(LabelSpace ls, int m_kappa) {
  ls.sigma_delta = kde_bandwidth(ls.labels);
  const auto p = vicinity_params(ls.distinct, m_kappa);
  ls.m_kappa = m_kappa;
  ls.kappa_base = p.kappa_base;
  ls.kappa = p.kappa;
  ls.nu = p.nu;
  return ls;
}

}  // namespace

LabelSpace build_labelspace(std::span<const double> raw_labels, int m_kappa) {
  return finish(normalize_labels(raw_labels), m_kappa);
}

LabelSpace build_labelspace(std::span<const double> raw_labels, int m_kappa, double raw_min,
                            double raw_max) {
  return finish(normalize_labels(raw_labels, raw_min, raw_max), m_kappa);
}

double soft_weight(double target, double label, double nu) {
  const double d = target - label;
  return std::exp(-nu * d * d);
}

}  // namespace ccdm
