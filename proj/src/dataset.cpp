#include "fedcausal/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fedcausal/rng.hpp"

namespace fedcausal {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

double parse_double(const std::string& s, std::size_t line_no, const std::string& col) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ParseError("line " + std::to_string(line_no) + ": cannot parse '" + s +
                     "' in column " + col);
  }
}

}  // namespace

SourceDataset::SourceDataset(int source_id, std::vector<Record> records)
    : source_id_(source_id), records_(std::move(records)) {
  if (!records_.empty()) {
    dim_x_ = records_.front().x.size();
    dim_u_ = records_.front().u_raw.size();
  }
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const Record& rec = records_[i];
    if (rec.w != 0 && rec.w != 1)
      throw SchemaError("record " + std::to_string(i) + ": treatment must be 0 or 1");
    if (rec.x.size() != dim_x_ || rec.u_raw.size() != dim_u_ || rec.r.size() != dim_u_)
      throw SchemaError("record " + std::to_string(i) + ": inconsistent dimensions");
    for (int m : rec.r)
      if (m != 0 && m != 1)
        throw SchemaError("record " + std::to_string(i) + ": mask entries must be 0 or 1");
  }
}

bool SourceDataset::has_missing() const {
  for (const Record& rec : records_)
    for (int m : rec.r)
      if (m == 0) return true;
  return false;
}

Eigen::MatrixXd SourceDataset::x_matrix() const {
  Eigen::MatrixXd X(records_.size(), dim_x_);
  for (std::size_t i = 0; i < records_.size(); ++i)
    for (std::size_t j = 0; j < dim_x_; ++j) X(i, j) = records_[i].x[j];
  return X;
}

Eigen::VectorXd SourceDataset::y_vector() const {
  Eigen::VectorXd y(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) y(i) = records_[i].y;
  return y;
}

Eigen::VectorXd SourceDataset::w_vector() const {
  Eigen::VectorXd w(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) w(i) = records_[i].w;
  return w;
}

SourceDataset SourceDataset::subset(const std::vector<std::size_t>& idx) const {
  std::vector<Record> recs;
  recs.reserve(idx.size());
  for (std::size_t i : idx) recs.push_back(records_.at(i));
  return SourceDataset(source_id_, std::move(recs));
}

SourceDataset load_csv(const std::string& path, const CsvSchema& schema, int source_id) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open file: " + path);

  std::string header;
  if (!std::getline(in, header)) throw ParseError(path + ": empty file");
  if (!header.empty() && header.back() == '\r') header.pop_back();
  const std::vector<std::string> cols = split_line(header);

  int w_col = -1, y_col = -1, pk_col = -1;
  std::vector<int> x_cols, u_cols, r_cols;
  auto indexed = [](const std::string& name, const std::string& prefix, int* out) {
    if (name.size() <= prefix.size() || name.compare(0, prefix.size(), prefix) != 0) return false;
    for (std::size_t i = prefix.size(); i < name.size(); ++i)
      if (!std::isdigit(static_cast<unsigned char>(name[i]))) return false;
    *out = std::stoi(name.substr(prefix.size()));
    return true;
  };
  std::vector<std::pair<int, int>> xi, ui, ri;  // (dimension index, column)
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const std::string& name = cols[c];
    int k = 0;
    if (name == schema.w) w_col = static_cast<int>(c);
    else if (name == schema.y) y_col = static_cast<int>(c);
    else if (name == schema.pk) pk_col = static_cast<int>(c);
    else if (indexed(name, schema.x_prefix, &k)) xi.emplace_back(k, static_cast<int>(c));
    else if (indexed(name, schema.u_prefix, &k)) ui.emplace_back(k, static_cast<int>(c));
    else if (indexed(name, schema.r_prefix, &k)) ri.emplace_back(k, static_cast<int>(c));
  }
  if (w_col < 0 || y_col < 0)
    throw SchemaError(path + ": header must contain '" + schema.w + "' and '" + schema.y + "'");
  auto order = [](std::vector<std::pair<int, int>>& v, std::vector<int>& out,
                  const std::string& what) {
    std::sort(v.begin(), v.end());
    for (std::size_t k = 0; k < v.size(); ++k) {
      if (v[k].first != static_cast<int>(k))
        throw SchemaError("non-contiguous " + what + " column indices");
      out.push_back(v[k].second);
    }
  };
  order(xi, x_cols, "x");
  order(ui, u_cols, "u");
  order(ri, r_cols, "r");
  if (!r_cols.empty() && r_cols.size() != u_cols.size())
    throw SchemaError(path + ": number of r columns must match u columns");

  std::vector<Record> records;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (is_blank(line)) continue;
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != cols.size())
      throw ParseError("line " + std::to_string(line_no) + ": expected " +
                       std::to_string(cols.size()) + " cells, got " +
                       std::to_string(cells.size()));
    Record rec;
    const double wv = parse_double(cells[w_col], line_no, schema.w);
    if (wv != 0.0 && wv != 1.0)
      throw SchemaError("line " + std::to_string(line_no) + ": treatment must be 0 or 1");
    rec.w = static_cast<int>(wv);
    rec.y = parse_double(cells[y_col], line_no, schema.y);
    if (pk_col >= 0) rec.pk = cells[pk_col];
    for (std::size_t j = 0; j < x_cols.size(); ++j)
      rec.x.push_back(parse_double(cells[x_cols[j]], line_no, schema.x_prefix + std::to_string(j)));
    rec.u_raw.resize(u_cols.size(), 0.0);
    rec.r.resize(u_cols.size(), 1);
    for (std::size_t j = 0; j < u_cols.size(); ++j) {
      const std::string& cell = cells[u_cols[j]];
      const bool blank = is_blank(cell);
      if (!r_cols.empty()) {
        const double rv =
            parse_double(cells[r_cols[j]], line_no, schema.r_prefix + std::to_string(j));
        if (rv != 0.0 && rv != 1.0)
          throw SchemaError("line " + std::to_string(line_no) + ": mask must be 0 or 1");
        rec.r[j] = static_cast<int>(rv);
        if (rec.r[j] == 1 && blank)
          throw ParseError("line " + std::to_string(line_no) + ": u" + std::to_string(j) +
                           " marked observed but cell is empty");
      } else {
        rec.r[j] = blank ? 0 : 1;  // mask derived from emptiness
      }
      if (rec.r[j] == 1)
        rec.u_raw[j] = parse_double(cell, line_no, schema.u_prefix + std::to_string(j));
    }
    records.push_back(std::move(rec));
  }
  return SourceDataset(source_id, std::move(records));
}

void write_csv(const SourceDataset& ds, const std::string& path, const CsvSchema& schema) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open file for writing: " + path);
  out << schema.w << ',' << schema.y;
  for (std::size_t j = 0; j < ds.dim_x(); ++j) out << ',' << schema.x_prefix << j;
  for (std::size_t j = 0; j < ds.dim_u(); ++j) out << ',' << schema.u_prefix << j;
  for (std::size_t j = 0; j < ds.dim_u(); ++j) out << ',' << schema.r_prefix << j;
  out << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
  };
  for (const Record& rec : ds.records()) {
    out << rec.w << ',';
    num(rec.y);
    for (double v : rec.x) {
      out << ',';
      num(v);
    }
    for (std::size_t j = 0; j < ds.dim_u(); ++j) {
      out << ',';
      if (rec.r[j] == 1) num(rec.u_raw[j]);
    }
    for (std::size_t j = 0; j < ds.dim_u(); ++j) out << ',' << rec.r[j];
    out << '\n';
  }
}

std::array<double, 4> four_moments(const std::vector<double>& values) {
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double v : values) {
    const double d = v - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  if (m2 <= 0.0) return {mean, 0.0, 0.0, 0.0};  // degenerate-by-convention
  const double sd = std::sqrt(m2);
  return {mean, m2, m3 / (sd * sd * sd), m4 / (m2 * m2)};
}

std::vector<double> SourceMoments::concatenated() const {
  std::vector<double> out;
  out.reserve(y0_tilde.size() + y1_tilde.size() + x_tilde.size() + w_tilde.size());
  out.insert(out.end(), y0_tilde.begin(), y0_tilde.end());
  out.insert(out.end(), y1_tilde.begin(), y1_tilde.end());
  out.insert(out.end(), x_tilde.begin(), x_tilde.end());
  out.insert(out.end(), w_tilde.begin(), w_tilde.end());
  return out;
}

SourceMoments compute_moments(const SourceDataset& ds) {
  if (ds.size() == 0) throw SchemaError("compute_moments: empty dataset");
  SourceMoments m;
  std::vector<double> col(ds.size());
  for (std::size_t j = 0; j < ds.dim_x(); ++j) {
    for (std::size_t i = 0; i < ds.size(); ++i) col[i] = ds.record(i).x[j];
    const auto mm = four_moments(col);
    m.x_tilde.insert(m.x_tilde.end(), mm.begin(), mm.end());
  }
  std::vector<double> y_all, y0, y1, w;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Record& rec = ds.record(i);
    y_all.push_back(rec.y);
    (rec.w == 0 ? y0 : y1).push_back(rec.y);
    w.push_back(rec.w);
  }
  const auto pooled = four_moments(y_all);
  auto arm = [&](const std::vector<double>& ys) {
    // An empty treatment arm falls back to the pooled-outcome moments.
    const auto mm = ys.empty() ? pooled : four_moments(ys);
    return std::vector<double>(mm.begin(), mm.end());
  };
  m.y0_tilde = arm(y0);
  m.y1_tilde = arm(y1);
  const auto wm = four_moments(w);
  m.w_tilde.assign(wm.begin(), wm.end());
  return m;
}

DatasetSplit split(const SourceDataset& ds, double train_frac, double test_frac, double val_frac,
                   std::uint64_t seed, bool shuffled) {
  for (double f : {train_frac, test_frac, val_frac})
    if (f < 0.0 || f > 1.0) throw ConfigError("split: fraction out of [0,1]");
  const double total = train_frac + test_frac + val_frac;
  if (total > 1.0 + 1e-12) throw ConfigError("split: fractions sum to more than 1");

  const std::size_t n = ds.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (shuffled) {
    Rng rng(seed);
    rng.shuffle(idx);
  }

  std::size_t n_train = static_cast<std::size_t>(std::floor(train_frac * n));
  std::size_t n_test = static_cast<std::size_t>(std::floor(test_frac * n));
  std::size_t n_val = static_cast<std::size_t>(std::floor(val_frac * n));
  if (total >= 1.0 - 1e-12) n_test = n - n_train - n_val;  // rounding leftover goes to test

  DatasetSplit out;
  std::size_t p = 0;
  for (std::size_t i = 0; i < n_train; ++i) out.train.push_back(idx[p++]);
  for (std::size_t i = 0; i < n_test; ++i) out.test.push_back(idx[p++]);
  for (std::size_t i = 0; i < n_val; ++i) out.validation.push_back(idx[p++]);
  return out;
}

}  // namespace fedcausal
