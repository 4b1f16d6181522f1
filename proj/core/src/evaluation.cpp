#include "mstkd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>

#include <json.hpp>

#include "mstkd/error.hpp"

namespace mstkd::eval {

using nlohmann::json;

VerificationResult best_threshold_accuracy(std::span<const double> scores,
                                           std::span<const bool> genuine) {
  if (scores.size() != genuine.size())
    throw DimensionError("score and label counts differ");
  const std::size_t n = scores.size();
  if (n == 0) throw ProtocolError("verification needs at least one pair");
  for (double v : scores)
    if (!std::isfinite(v)) throw DataError("non-finite similarity score");
  const std::size_t genuine_total =
      static_cast<std::size_t>(std::count(genuine.begin(), genuine.end(), true));
  if (genuine_total == 0 || genuine_total == n)
    throw ProtocolError("verification pairs must contain both genuine and impostor pairs");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });

  // Split k: pairs order[k..n) are called genuine.
  std::size_t impostors_below = 0, genuine_below = 0;
  std::size_t best_correct = 0, best_k = 0;
  bool have_best = false;
  for (std::size_t k = 0; k <= n; ++k) {
    if (k > 0) {
      if (genuine[order[k - 1]])
        ++genuine_below;
      else
        ++impostors_below;
    }
    const bool valid =
        k == 0 || k == n || scores[order[k - 1]] < scores[order[k]];
    if (!valid) continue;
    const std::size_t correct = impostors_below + (genuine_total - genuine_below);
    if (!have_best || correct > best_correct) {
      best_correct = correct;
      best_k = k;
      have_best = true;
    }
  }
  VerificationResult r;
  r.pairs = n;
  r.accuracy = 100.0 * static_cast<double>(best_correct) / static_cast<double>(n);
  if (best_k == 0) {
    r.threshold = scores[order[0]] - 1.0;
  } else if (best_k == n) {
    r.threshold = scores[order[n - 1]] + 1.0;
  } else {
    const double lo = scores[order[best_k - 1]], hi = scores[order[best_k]];
    r.threshold = 0.5 * (lo + hi);
    // adjacent doubles: the midpoint can round onto the upper score
    if (!(r.threshold < hi)) r.threshold = lo;
  }
  return r;
}

VerificationResult verification_accuracy(
    const Matrix& embeddings, std::span<const data::VerificationPair> pairs) {
  std::vector<double> scores;
  scores.reserve(pairs.size());
  auto genuine = std::make_unique<bool[]>(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (p.a >= embeddings.rows() || p.b >= embeddings.rows()) {
      throw DataError("pair references row " + std::to_string(std::max(p.a, p.b)) +
                      " but only " + std::to_string(embeddings.rows()) +
                      " embeddings exist");
    }
    auto ra = embeddings.row(p.a);
    auto rb = embeddings.row(p.b);
    double dot = 0.0;
    for (std::size_t c = 0; c < ra.size(); ++c) dot += ra[c] * rb[c];
    scores.push_back(dot);
    genuine[i] = p.genuine;
  }
  return best_threshold_accuracy(
      scores, std::span<const bool>(genuine.get(), pairs.size()));
}

double skewed_error_ratio(std::span<const double> acc) {
  if (acc.empty()) throw ContractError("SER needs at least one accuracy");
  const auto [lo, hi] = std::minmax_element(acc.begin(), acc.end());
  if (*hi >= 100.0) {
    throw ProtocolError("SER undefined: best group accuracy is 100%");
  }
  return (100.0 - *lo) / (100.0 - *hi);
}

FairnessReport fairness_metrics(std::span<const double> acc) {
  if (acc.size() < 2) throw ContractError("fairness metrics need at least 2 groups");
  for (double a : acc) {
    if (!(a >= 0.0 && a <= 100.0))
      throw ContractError("accuracy " + std::to_string(a) + " outside [0, 100]");
  }
  FairnessReport r;
  r.per_group_acc.assign(acc.begin(), acc.end());
  const double g = static_cast<double>(acc.size());
  r.global_acc = std::accumulate(acc.begin(), acc.end(), 0.0) / g;
  double ss = 0.0;
  for (double a : acc) ss += (a - r.global_acc) * (a - r.global_acc);
  r.std_dev = std::sqrt(ss / (g - 1.0));
  if (*std::max_element(acc.begin(), acc.end()) < 100.0) {
    r.ser = skewed_error_ratio(acc);
  }
  return r;
}

FairnessReport evaluate_embeddings(const Matrix& embeddings,
                                   std::span<const data::VerificationPair> pairs,
                                   const std::vector<std::string>& group_names) {
  std::vector<double> acc;
  std::vector<double> thresholds;
  for (std::size_t g = 0; g < group_names.size(); ++g) {
    auto group_pairs = data::pairs_for_group(pairs, static_cast<std::uint8_t>(g));
    if (group_pairs.empty())
      throw DataError("no verification pairs for group " + group_names[g]);
    auto res = verification_accuracy(embeddings, group_pairs);
    acc.push_back(res.accuracy);
    thresholds.push_back(res.threshold);
  }
  FairnessReport r = fairness_metrics(acc);
  r.group_names = group_names;
  r.thresholds = std::move(thresholds);
  return r;
}

FairnessReport evaluate_model(const model::TeacherModel& t,
                              const data::EmbeddingSet& pool,
                              std::span<const data::VerificationPair> pairs,
                              const std::vector<std::string>& group_names) {
  return evaluate_embeddings(model::embed(t, pool.values), pairs, group_names);
}

FairnessReport evaluate_model(const model::StudentModel& s,
                              const data::EmbeddingSet& pool,
                              std::span<const data::VerificationPair> pairs,
                              const std::vector<std::string>& group_names) {
  return evaluate_embeddings(model::embed(s, pool.values), pairs, group_names);
}

ReportDelta compare_reports(const FairnessReport& a, const FairnessReport& b) {
  if (a.per_group_acc.size() != b.per_group_acc.size() ||
      (!a.group_names.empty() && !b.group_names.empty() &&
       a.group_names != b.group_names)) {
    throw ContractError("cannot compare reports with different group structure");
  }
  ReportDelta d;
  for (std::size_t g = 0; g < a.per_group_acc.size(); ++g)
    d.per_group.push_back(a.per_group_acc[g] - b.per_group_acc[g]);
  d.global = a.global_acc - b.global_acc;
  d.std_dev = a.std_dev - b.std_dev;
  if (a.ser && b.ser) d.ser = *a.ser - *b.ser;
  return d;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  // Avoid printing "-0.00" for tiny negative deltas.
  if (std::string(buf) == "-0.00") return "0.00";
  return buf;
}

namespace {

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

std::string pad_right(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace

std::string format_table(const std::vector<TableRow>& rows) {
  if (rows.empty()) return {};
  const auto& names = rows.front().report.group_names;
  const std::size_t groups = rows.front().report.per_group_acc.size();
  std::vector<std::string> header{"", ""};
  for (std::size_t g = 0; g < groups; ++g)
    header.push_back(g < names.size() ? names[g] : "g" + std::to_string(g));
  header.insert(header.end(), {"Global Acc", "STD", "SER"});

  // Best per column within each section, compared on rounded values so ties
  // in the printed table are all marked.
  std::vector<std::vector<std::string>> cells;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i].report;
    if (r.per_group_acc.size() != groups)
      throw ContractError("table rows have different group counts");
    std::vector<double> values(r.per_group_acc);
    values.push_back(r.global_acc);
    values.push_back(r.std_dev);
    std::vector<std::string> row{rows[i].section, rows[i].label};
    for (std::size_t c = 0; c < values.size() + 1; ++c) {
      const bool is_ser = c == values.size();
      std::string text = is_ser ? (r.ser ? fixed2(*r.ser) : "undefined")
                                : fixed2(values[c]);
      const bool lower_better = c >= groups + 1;
      bool best = !(is_ser && !r.ser);
      for (std::size_t j = 0; j < rows.size() && best; ++j) {
        if (rows[j].section != rows[i].section || j == i) continue;
        const auto& o = rows[j].report;
        double mine, theirs;
        if (is_ser) {
          if (!o.ser) continue;
          mine = *r.ser;
          theirs = *o.ser;
        } else {
          mine = values[c];
          theirs = c < groups ? o.per_group_acc[c]
                   : c == groups ? o.global_acc
                                 : o.std_dev;
        }
        const double a = std::stod(fixed2(mine)), b = std::stod(fixed2(theirs));
        if (lower_better ? b < a : b > a) best = false;
      }
      row.push_back(best && rows.size() > 1 ? "**" + text + "**" : text);
    }
    cells.push_back(std::move(row));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
  }
  auto line = [&](const std::vector<std::string>& row) {
    std::string out = "|";
    for (std::size_t c = 0; c < row.size(); ++c)
      out += " " + (c < 2 ? pad_right(row[c], width[c]) : pad(row[c], width[c])) + " |";
    return out + "\n";
  };
  std::string out = line(header);
  std::string rule = "|";
  for (auto w : width) rule += std::string(w + 2, '-') + "|";
  out += rule + "\n";
  std::string section;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i > 0 && rows[i].section != section) out += rule + "\n";
    section = rows[i].section;
    out += line(cells[i]);
  }
  return out;
}

std::string format_delta(const std::string& label, const ReportDelta& d,
                         const std::vector<std::string>& group_names) {
  auto signed2 = [](double v) {
    std::string s = fixed2(v);
    return s[0] == '-' ? s : "+" + s;
  };
  std::string out = label + ":";
  for (std::size_t g = 0; g < d.per_group.size(); ++g) {
    out += " " + (g < group_names.size() ? group_names[g] : "g" + std::to_string(g)) +
           " " + signed2(d.per_group[g]) + ",";
  }
  out += " global " + signed2(d.global) + ", STD " + signed2(d.std_dev) +
         ", SER " + (d.ser ? signed2(*d.ser) : std::string("undefined")) + "\n";
  return out;
}

std::string report_to_json(const FairnessReport& r) {
  json j;
  j["protocol"] = r.protocol;
  j["group_names"] = r.group_names;
  j["per_group_acc"] = r.per_group_acc;
  j["global_acc"] = r.global_acc;
  j["std"] = r.std_dev;
  j["ser"] = r.ser ? json(*r.ser) : json("undefined");
  j["thresholds"] = r.thresholds;
  return j.dump(2) + "\n";
}

FairnessReport report_from_json(const std::string& text) {
  FairnessReport r;
  try {
    const json j = json::parse(text);
    r.protocol = j.at("protocol").get<std::string>();
    r.group_names = j.at("group_names").get<std::vector<std::string>>();
    r.per_group_acc = j.at("per_group_acc").get<std::vector<double>>();
    r.global_acc = j.at("global_acc").get<double>();
    r.std_dev = j.at("std").get<double>();
    if (j.at("ser").is_number()) r.ser = j.at("ser").get<double>();
    r.thresholds = j.at("thresholds").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid report JSON: ") + e.what());
  }
  return r;
}

}  // namespace mstkd::eval
