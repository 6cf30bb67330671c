#include "neuropipe/metrics.hpp"

#include <iomanip>

#include "neuropipe/error.hpp"

namespace neuropipe {

namespace {

// num / den with the empty-population convention.
double ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return 1.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

OverlapCounts overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  require(a.size() == b.size(), Errc::ShapeMismatch, "mask sizes differ");
  OverlapCounts c;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    c.a += x;
    c.b += y;
    c.both += x && y;
  }
  return c;
}

double dice_from_counts(const OverlapCounts& c) { return ratio(2 * c.both, c.a + c.b); }

double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  return dice_from_counts(overlap(a, b));
}

std::vector<std::uint8_t> binarize(const Tensor& mask) {
  std::vector<std::uint8_t> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] > 0.5 ? 1 : 0;
  return out;
}

double dice(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), Errc::ShapeMismatch,
          "mask shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  return dice(binarize(a), binarize(b));
}

double pooled_dice(const std::vector<std::pair<Tensor, Tensor>>& pairs) {
  OverlapCounts total;
  for (const auto& [p, t] : pairs) {
    require(p.shape() == t.shape(), Errc::ShapeMismatch, "mask shapes differ");
    const OverlapCounts c = overlap(binarize(p), binarize(t));
    total.a += c.a;
    total.b += c.b;
    total.both += c.both;
  }
  return dice_from_counts(total);
}

double mean_dice(const std::vector<std::pair<Tensor, Tensor>>& pairs) {
  if (pairs.empty()) return 1.0;
  double s = 0;
  for (const auto& [p, t] : pairs) s += dice(p, t);
  return s / static_cast<double>(pairs.size());
}

ConfusionCounts confusion(std::span<const int> pred, std::span<const int> truth, int positive) {
  require(pred.size() == truth.size(), Errc::LengthMismatch,
          "prediction and truth lengths differ (" + std::to_string(pred.size()) + " vs " +
              std::to_string(truth.size()) + ")");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == positive, t = truth[i] == positive;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  require(pred.size() == truth.size(), Errc::LengthMismatch, "mask lengths differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

MetricValues metrics_from_counts(const ConfusionCounts& c) {
  MetricValues m;
  m.sensitivity = ratio(c.tp, c.tp + c.fn);
  m.specificity = ratio(c.tn, c.tn + c.fp);
  m.accuracy = ratio(c.tp + c.tn, c.total());
  m.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  return m;
}

const MetricValues& MetricsReport::at(const std::string& key) const {
  for (const auto& [k, v] : rows)
    if (k == key) return v;
  fail(Errc::IndexOutOfRange, "no metrics row " + key);
}

void MetricsReport::write(std::ostream& out) const {
  const auto old = out.precision();
  out << std::setprecision(17);
  out << "key,dice,sensitivity,specificity,accuracy,tp,fp,tn,fn\n";
  for (const auto& [k, v] : rows) {
    out << k << ',' << v.dice << ',' << v.sensitivity << ',' << v.specificity << ',' << v.accuracy;
    if (auto it = counts.find(k); it != counts.end())
      out << ',' << it->second.tp << ',' << it->second.fp << ',' << it->second.tn << ','
          << it->second.fn;
    else
      out << ",,,,";
    out << '\n';
  }
  out << "macro," << macro.dice << ',' << macro.sensitivity << ',' << macro.specificity << ','
      << macro.accuracy << ",,,,\n";
  for (const auto& [k, v] : extras) out << k << ',' << v << ",,,,,,,\n";
  out.precision(old);
}

MetricsReport summarize(const std::vector<std::pair<std::string, ConfusionCounts>>& counts) {
  MetricsReport r;
  for (const auto& [k, c] : counts) {
    r.rows.emplace_back(k, metrics_from_counts(c));
    r.counts[k] = c;
  }
  if (!r.rows.empty()) {
    const double n = static_cast<double>(r.rows.size());
    for (const auto& [k, v] : r.rows) {
      r.macro.dice += v.dice;
      r.macro.sensitivity += v.sensitivity;
      r.macro.specificity += v.specificity;
      r.macro.accuracy += v.accuracy;
    }
    r.macro.dice /= n;
    r.macro.sensitivity /= n;
    r.macro.specificity /= n;
    r.macro.accuracy /= n;
  }
  return r;
}

MetricsReport classification_report(std::span<const int> pred, std::span<const int> truth,
                                    const std::vector<std::string>& names) {
  std::vector<std::pair<std::string, ConfusionCounts>> per;
  for (std::size_t k = 0; k < names.size(); ++k)
    per.emplace_back(names[k], confusion(pred, truth, static_cast<int>(k)));
  MetricsReport r = summarize(per);
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i];
  r.extras.emplace_back("overall_accuracy", ratio(hits, static_cast<std::int64_t>(pred.size())));
  return r;
}

}  // namespace neuropipe
