#pragma once

// Column-oriented data table and CSV reading/writing.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace elfqr {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataTable {
 public:
  using Numeric = std::vector<double>;
  using Text = std::vector<std::string>;
  using Column = std::variant<Numeric, Text>;

  std::size_t rows() const { return rows_; }
  const std::vector<std::string>& names() const { return names_; }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  bool is_numeric(const std::string& name) const { return std::holds_alternative<Numeric>(column(name)); }

  const Column& column(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("missing column '" + name + "'");
    return columns_[it->second];
  }

  const Numeric& numeric(const std::string& name) const {
    const auto& c = column(name);
    if (const auto* v = std::get_if<Numeric>(&c)) return *v;
    throw DataError("column '" + name + "' is not numeric");
  }

  /// String view of any column; numeric columns are formatted.
  Text as_text(const std::string& name) const {
    const auto& c = column(name);
    if (const auto* t = std::get_if<Text>(&c)) return *t;
    Text out;
    for (double v : std::get<Numeric>(c)) out.push_back(format_number(v));
    return out;
  }

  void add(const std::string& name, Column col) {
    const std::size_t n = std::visit([](const auto& v) { return v.size(); }, col);
    if (!names_.empty() && n != rows_) {
      throw DataError("column '" + name + "' has " + std::to_string(n) + " rows, expected " + std::to_string(rows_));
    }
    if (has(name)) throw DataError("duplicate column '" + name + "'");
    rows_ = n;
    index_[name] = columns_.size();
    names_.push_back(name);
    columns_.push_back(std::move(col));
  }

  /// Row subset (with repetition) in the given order.
  DataTable take(const std::vector<std::size_t>& idx) const {
    DataTable out;
    for (std::size_t c = 0; c < names_.size(); ++c) {
      std::visit(
          [&](const auto& v) {
            std::decay_t<decltype(v)> sub;
            sub.reserve(idx.size());
            for (auto i : idx) sub.push_back(v.at(i));
            out.add(names_[c], std::move(sub));
          },
          columns_[c]);
    }
    return out;
  }

  // Shortest text that reads back to the same double.
  static std::string format_number(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  }

 private:
  std::size_t rows_ = 0;
  std::vector<std::string> names_;
  std::vector<Column> columns_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  if (quoted) throw DataError("line " + std::to_string(line_no) + ": unterminated quoted field");
  out.push_back(cur);
  return out;
}

inline bool parse_double(const std::string& s, double& out) {
  std::size_t b = s.find_first_not_of(" \t");
  std::size_t e = s.find_last_not_of(" \t");
  if (b == std::string::npos) return false;
  const char* first = s.data() + b;
  const char* last = s.data() + e + 1;
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

}  // namespace detail

/// Parses CSV text with a header row. A column is numeric when every field
/// parses as a number, otherwise it is kept as text.
inline DataTable parse_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    header = detail::split_csv_line(line, line_no);
    break;
  }
  if (header.empty()) throw DataError("CSV input has no header row");
  for (auto& h : header) {
    auto b = h.find_first_not_of(' ');
    auto e = h.find_last_not_of(' ');
    h = b == std::string::npos ? std::string() : h.substr(b, e - b + 1);
    if (h.empty()) throw DataError("line " + std::to_string(line_no) + ": empty column name");
  }
  std::vector<std::vector<std::string>> fields(header.size());
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto row = detail::split_csv_line(line, line_no);
    if (row.size() != header.size()) {
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields, found " + std::to_string(row.size()));
    }
    for (std::size_t c = 0; c < row.size(); ++c) fields[c].push_back(std::move(row[c]));
  }
  DataTable table;
  for (std::size_t c = 0; c < header.size(); ++c) {
    DataTable::Numeric num;
    num.reserve(fields[c].size());
    bool numeric = true;
    for (const auto& f : fields[c]) {
      double v;
      if (!detail::parse_double(f, v)) {
        numeric = false;
        break;
      }
      num.push_back(v);
    }
    if (numeric) {
      table.add(header[c], std::move(num));
    } else {
      table.add(header[c], std::move(fields[c]));
    }
  }
  return table;
}

inline DataTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return parse_csv(in);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

inline void write_csv(std::ostream& out, const DataTable& table) {
  const auto& names = table.names();
  for (std::size_t c = 0; c < names.size(); ++c) out << (c ? "," : "") << csv_field(names[c]);
  out << '\n';
  std::vector<DataTable::Text> cols;
  for (const auto& n : names) cols.push_back(table.as_text(n));
  for (std::size_t r = 0; r < table.rows(); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << csv_field(cols[c][r]);
    out << '\n';
  }
}

}  // namespace elfqr
