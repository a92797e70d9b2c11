#pragma once

// Evaluation tables: robust accuracy per (attack, checkpoint) over seeds,
// reported as mean and standard error across seeds.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace msa {

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

// Standard error of the mean with the n-1 sample deviation; 0 for one value.
inline MeanSe mean_and_stderr(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean_and_stderr: no values");
  MeanSe m;
  m.n = v.size();
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(m.n);
  if (m.n > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.se = std::sqrt(ss / static_cast<double>(m.n - 1)) / std::sqrt(static_cast<double>(m.n));
  }
  return m;
}

// Accuracy fractions rendered in percent, e.g. "69.7±0.15".
inline std::string format_cell(const MeanSe& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f±%.2f", 100.0 * m.mean, 100.0 * m.se);
  return buf;
}

struct EvalRow {
  std::string attack;                          // e.g. "sa+uniform"
  std::vector<std::vector<double>> per_seed;   // [checkpoint][seed]
};

struct EvalTable {
  std::vector<std::size_t> checkpoints;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalRow> rows;
  std::string config;  // resolved config, one line of JSON

  std::string csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "# config: " << config << '\n';
    os << "attack,checkpoint,mean,stderr,n";
    for (auto s : seeds) os << ",seed_" << s;
    os << '\n';
    for (const auto& r : rows)
      for (std::size_t c = 0; c < checkpoints.size(); ++c) {
        const auto m = mean_and_stderr(r.per_seed[c]);
        os << r.attack << ',' << checkpoints[c] << ',' << m.mean << ',' << m.se << ',' << m.n;
        for (double v : r.per_seed[c]) os << ',' << v;
        os << '\n';
      }
    return os.str();
  }

  std::string text() const {
    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> head{"attack"};
    for (auto q : checkpoints) head.push_back(std::to_string(q));
    cells.push_back(head);
    for (const auto& r : rows) {
      std::vector<std::string> line{r.attack};
      for (std::size_t c = 0; c < checkpoints.size(); ++c) line.push_back(format_cell(mean_and_stderr(r.per_seed[c])));
      cells.push_back(line);
    }
    return aligned(cells);
  }

  static std::string aligned(const std::vector<std::vector<std::string>>& cells) {
    std::vector<std::size_t> width;
    auto display = [](const std::string& s) {
      std::size_t n = 0;
      for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
      return n;
    };
    for (const auto& line : cells)
      for (std::size_t i = 0; i < line.size(); ++i) {
        if (width.size() <= i) width.push_back(0);
        width[i] = std::max(width[i], display(line[i]));
      }
    std::ostringstream os;
    for (const auto& line : cells) {
      for (std::size_t i = 0; i < line.size(); ++i) {
        if (i) os << "  ";
        const std::size_t pad = width[i] - display(line[i]);
        if (i == 0)
          os << line[i] << std::string(pad, ' ');
        else
          os << std::string(pad, ' ') << line[i];
      }
      os << '\n';
    }
    return os.str();
  }
};

// Per-row, per-checkpoint mean/se parsed back from EvalTable::csv.
struct ParsedCell {
  std::string attack;
  std::size_t checkpoint = 0;
  MeanSe value;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  return out;
}

inline std::vector<ParsedCell> parse_eval_csv(const std::string& text, std::string* config = nullptr) {
  std::istringstream is(text);
  std::string line;
  bool header = false;
  std::vector<ParsedCell> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (config && line.rfind("# config: ", 0) == 0) *config = line.substr(10);
      continue;
    }
    if (!header) {
      if (line.rfind("attack,checkpoint,mean,stderr,n", 0) != 0)
        throw std::invalid_argument("evaluation CSV: unexpected header '" + line + "'");
      header = true;
      continue;
    }
    const auto f = split_csv_line(line);
    if (f.size() < 5) throw std::invalid_argument("evaluation CSV: short row '" + line + "'");
    ParsedCell c;
    c.attack = f[0];
    c.checkpoint = std::stoul(f[1]);
    c.value.mean = std::stod(f[2]);
    c.value.se = std::stod(f[3]);
    c.value.n = std::stoul(f[4]);
    out.push_back(c);
  }
  if (!header) throw std::invalid_argument("evaluation CSV: missing header");
  return out;
}

// Ablation grid: update-size schedule {SA, AA, MSA} x color sampling
// {uniform, MSA}. Missing cells print as "-".
inline std::string ablation_table(const std::vector<ParsedCell>& cells, std::vector<std::size_t> checkpoints = {}) {
  std::map<std::pair<std::string, std::size_t>, MeanSe> by;
  for (const auto& c : cells) {
    by[{c.attack, c.checkpoint}] = c.value;
    if (std::find(checkpoints.begin(), checkpoints.end(), c.checkpoint) == checkpoints.end())
      checkpoints.push_back(c.checkpoint);
  }
  std::sort(checkpoints.begin(), checkpoints.end());
  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> head{"size schedule", "color sampling"};
  for (auto q : checkpoints) head.push_back(std::to_string(q));
  grid.push_back(head);
  const std::pair<const char*, const char*> sizes[] = {{"sa", "SA"}, {"aa", "AA"}, {"msa", "MSA"}};
  const std::pair<const char*, const char*> colors[] = {{"uniform", "uniform"}, {"msa", "MSA"}};
  for (const auto& [sk, sl] : sizes)
    for (const auto& [ck, cl] : colors) {
      std::vector<std::string> line{sl, cl};
      for (auto q : checkpoints) {
        auto it = by.find({std::string(sk) + "+" + ck, q});
        line.push_back(it == by.end() ? "-" : format_cell(it->second));
      }
      grid.push_back(line);
    }
  return EvalTable::aligned(grid);
}

}  // namespace msa
