#pragma once

// Small RFC-4180 style CSV reader/writer plus numeric formatting helpers.
// All float output goes through fmt_double (shortest round-trip form) so
// that files written by this library are reproducible byte for byte.

#include <charconv>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace lccm {

class csv_error : public std::runtime_error {
public:
  explicit csv_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int col(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

// Shortest decimal string that round-trips to the same double.
inline std::string fmt_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  if (res.ec != std::errc()) throw csv_error("number formatting failed");
  return std::string(buf, res.ptr);
}

inline std::string fmt_fixed(double x, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, x);
  return std::string(buf);
}

inline double parse_double(const std::string& s, const std::string& where) {
  const char* b = s.data();
  const char* e = b + s.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\t')) --e;
  double v = 0.0;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e)
    throw csv_error("expected a number in " + where + ", got '" + s + "'");
  return v;
}

inline long parse_long(const std::string& s, const std::string& where) {
  const char* b = s.data();
  const char* e = b + s.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\t')) --e;
  long v = 0;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e)
    throw csv_error("expected an integer in " + where + ", got '" + s + "'");
  return v;
}

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Parses a full CSV document. Quoted fields may contain commas, quotes
// (doubled) and newlines. Every row must have the same width as the header.
inline Table parse_csv(std::istream& in) {
  Table t;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool any_field = false;
  size_t line = 1;

  auto end_field = [&]() {
    row.push_back(field);
    field.clear();
    any_field = true;
  };
  auto end_row = [&]() {
    if (row.empty() && !any_field) return;  // skip fully blank line
    if (t.header.empty()) {
      t.header = row;
    } else {
      if (row.size() != t.header.size())
        throw csv_error("line " + std::to_string(line) + ": expected " +
                        std::to_string(t.header.size()) + " fields, got " +
                        std::to_string(row.size()));
      t.rows.push_back(row);
    }
    row.clear();
    any_field = false;
  };

  char c;
  while (in.get(c)) {
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') { in.get(c); field.push_back('"'); }
        else in_quotes = false;
      } else {
        field.push_back(c);
        if (c == '\n') ++line;
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\n') {
      if (!field.empty() && field.back() == '\r') field.pop_back();
      if (any_field || !field.empty()) { end_field(); end_row(); }
      else end_row();
      ++line;
    } else {
      field.push_back(c);
    }
  }
  if (in_quotes) throw csv_error("unterminated quoted field");
  if (!field.empty() && field.back() == '\r') field.pop_back();
  if (any_field || !field.empty()) { end_field(); end_row(); }

  if (t.header.empty()) throw csv_error("empty CSV input");
  return t;
}

inline Table parse_csv_string(const std::string& s) {
  std::istringstream in(s);
  return parse_csv(in);
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

inline void write_csv(std::ostream& out, const Table& t) {
  for (size_t i = 0; i < t.header.size(); ++i) {
    if (i) out << ',';
    out << csv_escape(t.header[i]);
  }
  out << '\n';
  for (const auto& row : t.rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      out << csv_escape(row[i]);
    }
    out << '\n';
  }
}

inline std::string write_csv_string(const Table& t) {
  std::ostringstream out;
  write_csv(out, t);
  return out.str();
}

// GitHub-flavoured markdown table. Cells are written as-is.
inline std::string markdown_table(const std::vector<std::string>& header,
                                  const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream out;
  out << '|';
  for (const auto& h : header) out << ' ' << h << " |";
  out << "\n|";
  for (size_t i = 0; i < header.size(); ++i) out << "---|";
  out << '\n';
  for (const auto& row : rows) {
    out << '|';
    for (const auto& cell : row) out << ' ' << cell << " |";
    out << '\n';
  }
  return out.str();
}

// Orders identifiers numerically when both parse as integers, otherwise
// falls back to string comparison ("2" < "10", "a10" > "a2" is not attempted).
inline bool id_less(const std::string& a, const std::string& b) {
  auto as_long = [](const std::string& s, long& v) {
    if (s.empty()) return false;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
  };
  long va = 0, vb = 0;
  bool na = as_long(a, va), nb = as_long(b, vb);
  if (na && nb) { if (va != vb) return va < vb; return a < b; }
  if (na != nb) return na;  // numeric ids sort before non-numeric
  return a < b;
}

}  // namespace lccm
