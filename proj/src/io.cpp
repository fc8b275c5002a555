#include "lgrowth/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <vector>

#include "lgrowth/errors.hpp"

namespace lgrowth {

std::string format_double(double value) {
  char buffer[32];
  const auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
  return std::string(buffer, result.ptr);
}

double parse_double(const std::string& text) {
  double value = 0.0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto result = std::from_chars(begin, end, value);
  if (result.ec != std::errc() || result.ptr != end)
    throw DataError("not a number: '" + text + "'");
  return value;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace

void write_dataset_csv(std::ostream& out, const LongitudinalDataset& data,
                       const std::string& na_token) {
  data.validate();
  const bool has_aux = data.covariates.count("aux") > 0;
  out << "id";
  for (Eigen::Index t = 0; t < data.t(); ++t) out << ",y" << (t + 1);
  if (has_aux) out << ",aux";
  out << "\n";
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    out << (i + 1);
    for (Eigen::Index t = 0; t < data.t(); ++t) {
      out << ',';
      if (data.mask(i, t))
        out << format_double(data.y(i, t));
      else
        out << na_token;
    }
    if (has_aux) out << ',' << format_double(data.covariates.at("aux")(i));
    out << "\n";
  }
}

void write_dataset_csv(const std::string& path, const LongitudinalDataset& data,
                       const std::string& na_token) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  write_dataset_csv(out, data, na_token);
  if (!out) throw DataError("write to '" + path + "' failed");
}

LongitudinalDataset read_dataset_csv(std::istream& in, const std::string& na_token) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty dataset file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_csv_line(line);
  if (header.empty() || header[0] != "id")
    throw DataError("dataset header must start with 'id'");
  int t_count = 0;
  std::size_t col = 1;
  while (col < header.size() && header[col] == "y" + std::to_string(t_count + 1)) {
    ++t_count;
    ++col;
  }
  if (t_count == 0) throw DataError("dataset header must contain columns y1..yT");
  bool has_aux = false;
  if (col < header.size()) {
    if (header[col] != "aux")
      throw DataError("unexpected dataset column '" + header[col] + "' (only y1..yT and aux allowed)");
    has_aux = true;
    ++col;
  }
  if (col != header.size())
    throw DataError("unexpected dataset column '" + header[col] + "' after aux");

  std::vector<std::vector<double>> rows;
  std::vector<std::vector<bool>> row_masks;
  std::vector<double> aux_values;
  int line_number = 1;
  while (std::getline(in, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw DataError("line " + std::to_string(line_number) + ": expected " +
                      std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
    try {
      parse_double(fields[0]);
    } catch (const DataError&) {
      throw DataError("line " + std::to_string(line_number) + ": id is not numeric");
    }
    std::vector<double> values(t_count);
    std::vector<bool> observed(t_count);
    for (int t = 0; t < t_count; ++t) {
      const std::string& cell = fields[1 + t];
      if (cell == na_token) {
        values[t] = std::numeric_limits<double>::quiet_NaN();
        observed[t] = false;
      } else {
        try {
          values[t] = parse_double(cell);
        } catch (const DataError&) {
          throw DataError("line " + std::to_string(line_number) + ", column y" +
                          std::to_string(t + 1) + ": not a number: '" + cell + "'");
        }
        observed[t] = true;
      }
    }
    if (has_aux) {
      try {
        aux_values.push_back(parse_double(fields[1 + t_count]));
      } catch (const DataError&) {
        throw DataError("line " + std::to_string(line_number) + ", column aux: not a number");
      }
    }
    rows.push_back(std::move(values));
    row_masks.push_back(std::move(observed));
  }
  if (rows.empty()) throw DataError("dataset has no rows");

  LongitudinalDataset data;
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  data.y.resize(n, t_count);
  data.mask.resize(n, t_count);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int t = 0; t < t_count; ++t) {
      data.y(i, t) = rows[i][t];
      data.mask(i, t) = row_masks[i][t];
    }
  if (has_aux)
    data.covariates["aux"] = Eigen::Map<Eigen::VectorXd>(aux_values.data(), n);
  data.validate();
  return data;
}

LongitudinalDataset read_dataset_csv(const std::string& path, const std::string& na_token) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  return read_dataset_csv(in, na_token);
}

}  // namespace lgrowth
