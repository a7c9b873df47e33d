#pragma once

// Panel containers for stated/revealed choice data and respondent-level
// indicator tables, plus the CSV loaders that enforce the input contract.
//
// Choice CSV layout:   resp_id,task_id,alt_id,avail,chosen,<attr columns...>
// Indicator CSV layout: resp_id,<indicator columns...>   (blank cell = missing)
//
// Alternatives missing from a situation's rows are treated as unavailable.

#include "lccm/csv.hpp"
#include "lccm/stats.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace lccm {

class data_error : public std::runtime_error {
public:
  explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct Situation {
  std::string task_id;
  std::vector<uint8_t> avail;  // indexed by global alternative
  int chosen = -1;             // global alternative index
  Eigen::MatrixXd attrs;       // J x K; rows of unavailable alternatives are zero

  int n_available() const {
    int n = 0;
    for (uint8_t a : avail) n += a;
    return n;
  }
};

struct Respondent {
  std::string id;
  std::vector<Situation> situations;
};

struct ChoiceDataset {
  std::vector<std::string> alternative_ids;  // global order, id_less-sorted
  std::vector<std::string> attribute_names;
  std::vector<Respondent> respondents;       // id_less-sorted

  int n_alternatives() const { return static_cast<int>(alternative_ids.size()); }
  int n_respondents() const { return static_cast<int>(respondents.size()); }
  int n_situations() const {
    int n = 0;
    for (const auto& r : respondents) n += static_cast<int>(r.situations.size());
    return n;
  }
  int alternative_index(const std::string& id) const {
    for (size_t j = 0; j < alternative_ids.size(); ++j)
      if (alternative_ids[j] == id) return static_cast<int>(j);
    return -1;
  }
  int attribute_index(const std::string& name) const {
    for (size_t k = 0; k < attribute_names.size(); ++k)
      if (attribute_names[k] == name) return static_cast<int>(k);
    return -1;
  }

  // Structural checks shared by the loader and by hand-built datasets.
  void validate() const {
    const int J = n_alternatives();
    for (const auto& r : respondents) {
      if (r.situations.empty())
        throw data_error("respondent '" + r.id + "' has no choice situations");
      for (const auto& s : r.situations) {
        const std::string where = "respondent '" + r.id + "' task '" + s.task_id + "'";
        if (static_cast<int>(s.avail.size()) != J || s.attrs.rows() != J)
          throw data_error(where + ": alternative count mismatch");
        if (s.n_available() < 2)
          throw data_error(where + ": fewer than 2 available alternatives");
        if (s.chosen < 0 || s.chosen >= J)
          throw data_error(where + ": no chosen alternative");
        if (!s.avail[s.chosen])
          throw data_error(where + ": chosen alternative '" +
                           alternative_ids[s.chosen] + "' is not available");
      }
    }
  }
};

struct IndicatorMatrix {
  std::vector<std::string> respondent_ids;  // id_less-sorted
  std::vector<std::string> names;
  Eigen::MatrixXd values;  // N x K, NaN marks a missing cell
  double scale_lo = -kInf;
  double scale_hi = kInf;

  int n_rows() const { return static_cast<int>(values.rows()); }
  int n_cols() const { return static_cast<int>(values.cols()); }
  bool is_missing(int i, int k) const { return std::isnan(values(i, k)); }
  int column_index(const std::string& name) const {
    for (size_t k = 0; k < names.size(); ++k)
      if (names[k] == name) return static_cast<int>(k);
    return -1;
  }

  // Rows with every listed column observed; all columns when empty.
  std::vector<int> complete_rows(const std::vector<int>& cols = {}) const {
    std::vector<int> use = cols;
    if (use.empty())
      for (int k = 0; k < n_cols(); ++k) use.push_back(k);
    std::vector<int> out;
    for (int i = 0; i < n_rows(); ++i) {
      bool ok = true;
      for (int k : use)
        if (is_missing(i, k)) { ok = false; break; }
      if (ok) out.push_back(i);
    }
    return out;
  }
};

inline ChoiceDataset load_choice_csv(std::istream& in) {
  Table t = parse_csv(in);
  const std::vector<std::string> fixed = {"resp_id", "task_id", "alt_id", "avail", "chosen"};
  if (t.header.size() < fixed.size() + 1)
    throw data_error("choice CSV needs resp_id,task_id,alt_id,avail,chosen plus at least one attribute column");
  for (size_t i = 0; i < fixed.size(); ++i)
    if (trim(t.header[i]) != fixed[i])
      throw data_error("choice CSV column " + std::to_string(i + 1) + " must be '" +
                       fixed[i] + "', got '" + t.header[i] + "'");

  ChoiceDataset ds;
  for (size_t i = fixed.size(); i < t.header.size(); ++i) {
    std::string name = trim(t.header[i]);
    if (name.empty()) throw data_error("choice CSV has an unnamed attribute column");
    if (ds.attribute_index(name) >= 0)
      throw data_error("duplicate attribute column '" + name + "'");
    ds.attribute_names.push_back(name);
  }
  const int K = static_cast<int>(ds.attribute_names.size());

  struct Row {
    std::string alt;
    bool avail, chosen;
    std::vector<double> attrs;
  };
  // (resp, task) -> rows, keyed with ordered maps so output order is id order.
  std::map<std::string, std::map<std::string, std::vector<Row>, decltype(&id_less)>,
           decltype(&id_less)>
      panel(&id_less);
  std::set<std::string> alt_ids;

  size_t line = 1;
  for (const auto& row : t.rows) {
    ++line;
    const std::string where = "row " + std::to_string(line);
    Row r;
    std::string resp = trim(row[0]), task = trim(row[1]);
    r.alt = trim(row[2]);
    if (resp.empty() || task.empty() || r.alt.empty())
      throw data_error(where + ": empty resp_id, task_id or alt_id");
    long av = parse_long(row[3], where + " column avail");
    long ch = parse_long(row[4], where + " column chosen");
    if (av != 0 && av != 1) throw data_error(where + ": avail must be 0 or 1");
    if (ch != 0 && ch != 1) throw data_error(where + ": chosen must be 0 or 1");
    r.avail = av == 1;
    r.chosen = ch == 1;
    r.attrs.resize(K);
    for (int k = 0; k < K; ++k)
      r.attrs[k] = parse_double(row[5 + k], where + " column " + ds.attribute_names[k]);

    auto& task_map = panel.try_emplace(resp, &id_less).first->second;
    auto& rows = task_map[task];
    for (const auto& prev : rows)
      if (prev.alt == r.alt)
        throw data_error(where + ": duplicate alternative '" + r.alt +
                         "' for respondent '" + resp + "' task '" + task + "'");
    rows.push_back(std::move(r));
    alt_ids.insert(rows.back().alt);
  }
  if (panel.empty()) throw data_error("choice CSV has no data rows");

  ds.alternative_ids.assign(alt_ids.begin(), alt_ids.end());
  std::sort(ds.alternative_ids.begin(), ds.alternative_ids.end(), &id_less);
  const int J = ds.n_alternatives();

  for (auto& [resp, tasks] : panel) {
    Respondent r;
    r.id = resp;
    for (auto& [task, rows] : tasks) {
      Situation s;
      s.task_id = task;
      s.avail.assign(J, 0);
      s.attrs = Eigen::MatrixXd::Zero(J, K);
      const std::string where = "respondent '" + resp + "' task '" + task + "'";
      int n_chosen = 0;
      for (const auto& row : rows) {
        int j = ds.alternative_index(row.alt);
        if (row.chosen) {
          ++n_chosen;
          s.chosen = j;
          if (!row.avail)
            throw data_error(where + ": chosen alternative '" + row.alt + "' is not available");
        }
        if (!row.avail) continue;
        s.avail[j] = 1;
        for (int k = 0; k < K; ++k) s.attrs(j, k) = row.attrs[k];
      }
      if (n_chosen != 1)
        throw data_error(where + ": expected exactly one chosen alternative, got " +
                         std::to_string(n_chosen));
      r.situations.push_back(std::move(s));
    }
    ds.respondents.push_back(std::move(r));
  }

  ds.validate();
  return ds;
}

inline IndicatorMatrix load_indicator_csv(std::istream& in, double scale_lo = -kInf,
                                          double scale_hi = kInf) {
  Table t = parse_csv(in);
  if (t.header.empty() || trim(t.header[0]) != "resp_id")
    throw data_error("indicator CSV must start with a resp_id column");
  if (t.header.size() < 2)
    throw data_error("indicator CSV needs at least one value column");

  IndicatorMatrix m;
  m.scale_lo = scale_lo;
  m.scale_hi = scale_hi;
  for (size_t i = 1; i < t.header.size(); ++i) {
    std::string name = trim(t.header[i]);
    if (name.empty()) throw data_error("indicator CSV has an unnamed column");
    if (m.column_index(name) >= 0) throw data_error("duplicate indicator column '" + name + "'");
    m.names.push_back(name);
  }
  const int K = static_cast<int>(m.names.size());

  std::vector<std::pair<std::string, std::vector<double>>> rows;
  std::set<std::string> seen;
  size_t line = 1;
  for (const auto& row : t.rows) {
    ++line;
    std::string id = trim(row[0]);
    if (id.empty()) throw data_error("row " + std::to_string(line) + ": empty resp_id");
    if (!seen.insert(id).second)
      throw data_error("duplicate resp_id '" + id + "' in indicator CSV");
    std::vector<double> vals(K, kNaN);
    for (int k = 0; k < K; ++k) {
      std::string cell = trim(row[k + 1]);
      if (cell.empty()) continue;  // missing response
      double v = parse_double(cell, "row " + std::to_string(line) + " column " + m.names[k]);
      if (v < scale_lo || v > scale_hi)
        throw data_error("row " + std::to_string(line) + " column " + m.names[k] + ": value " +
                         fmt_double(v) + " outside scale [" + fmt_double(scale_lo) + ", " +
                         fmt_double(scale_hi) + "]");
      vals[k] = v;
    }
    rows.emplace_back(id, std::move(vals));
  }
  if (rows.empty()) throw data_error("indicator CSV has no data rows");

  std::sort(rows.begin(), rows.end(),
            [](const auto& a, const auto& b) { return id_less(a.first, b.first); });
  m.values.resize(static_cast<int>(rows.size()), K);
  for (size_t i = 0; i < rows.size(); ++i) {
    m.respondent_ids.push_back(rows[i].first);
    for (int k = 0; k < K; ++k) m.values(static_cast<int>(i), k) = rows[i].second[k];
  }
  return m;
}

struct JoinResult {
  ChoiceDataset choices;
  IndicatorMatrix indicators;
  int dropped_choice_respondents = 0;
  int dropped_indicator_rows = 0;
};

// Restricts both tables to the respondents present in each, preserving id
// order. Empty intersection is an error; partial overlap is reported back via
// the dropped counts so callers can warn.
inline JoinResult join(const ChoiceDataset& choices, const IndicatorMatrix& indicators) {
  std::set<std::string> ind_ids(indicators.respondent_ids.begin(),
                                indicators.respondent_ids.end());
  std::set<std::string> keep;
  for (const auto& r : choices.respondents)
    if (ind_ids.count(r.id)) keep.insert(r.id);
  if (keep.empty())
    throw data_error("choice data and indicator data share no respondent ids");

  JoinResult out;
  out.choices.alternative_ids = choices.alternative_ids;
  out.choices.attribute_names = choices.attribute_names;
  for (const auto& r : choices.respondents) {
    if (keep.count(r.id)) out.choices.respondents.push_back(r);
    else ++out.dropped_choice_respondents;
  }

  out.indicators.names = indicators.names;
  out.indicators.scale_lo = indicators.scale_lo;
  out.indicators.scale_hi = indicators.scale_hi;
  std::vector<int> rows;
  for (int i = 0; i < indicators.n_rows(); ++i) {
    if (keep.count(indicators.respondent_ids[i])) rows.push_back(i);
    else ++out.dropped_indicator_rows;
  }
  out.indicators.values.resize(static_cast<int>(rows.size()), indicators.n_cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    out.indicators.respondent_ids.push_back(indicators.respondent_ids[rows[i]]);
    out.indicators.values.row(static_cast<int>(i)) = indicators.values.row(rows[i]);
  }
  // Both sides are id_less-sorted, so row i of the indicators matches
  // respondent i of the choices.
  return out;
}

inline void write_choice_csv(std::ostream& out, const ChoiceDataset& ds) {
  Table t;
  t.header = {"resp_id", "task_id", "alt_id", "avail", "chosen"};
  for (const auto& a : ds.attribute_names) t.header.push_back(a);
  for (const auto& r : ds.respondents) {
    for (const auto& s : r.situations) {
      for (int j = 0; j < ds.n_alternatives(); ++j) {
        if (!s.avail[j]) continue;  // unavailable alternatives are simply omitted
        std::vector<std::string> row = {r.id, s.task_id, ds.alternative_ids[j],
                                        "1", s.chosen == j ? "1" : "0"};
        for (int k = 0; k < static_cast<int>(ds.attribute_names.size()); ++k)
          row.push_back(fmt_double(s.attrs(j, k)));
        t.rows.push_back(std::move(row));
      }
    }
  }
  write_csv(out, t);
}

inline void write_indicator_csv(std::ostream& out, const IndicatorMatrix& m) {
  Table t;
  t.header = {"resp_id"};
  for (const auto& n : m.names) t.header.push_back(n);
  for (int i = 0; i < m.n_rows(); ++i) {
    std::vector<std::string> row = {m.respondent_ids[i]};
    for (int k = 0; k < m.n_cols(); ++k)
      row.push_back(m.is_missing(i, k) ? "" : fmt_double(m.values(i, k)));
    t.rows.push_back(std::move(row));
  }
  write_csv(out, t);
}

}  // namespace lccm
