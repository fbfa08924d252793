#pragma once

#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

namespace pbflow {

// Quotes a field when it contains a comma, quote, or newline; embedded
// quotes are doubled (RFC 4180).
inline std::string csv_escape(const std::string& field) {
  bool needs_quotes = false;
  for (char c : field)
    if (c == ',' || c == '"' || c == '\n' || c == '\r') needs_quotes = true;
  if (!needs_quotes) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline void csv_row(std::ostream& os, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) os << ',';
    os << csv_escape(fields[i]);
  }
  os << '\n';
}

// Deterministic shortest-ish decimal rendering used in all emitted CSVs.
inline std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

inline std::string csv_num(int v) { return std::to_string(v); }
inline std::string csv_num(std::size_t v) { return std::to_string(v); }

}  // namespace pbflow
