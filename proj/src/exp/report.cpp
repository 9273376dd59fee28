#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "modnet/error.hpp"
#include "modnet/exp/experiment.hpp"

namespace modnet::exp {

namespace {

constexpr const char* kPlusMinus = " \xC2\xB1 ";

std::string cell(const Summary& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f%s%.2f", 100.0 * s.mean, kPlusMinus, 100.0 * s.std);
  return buf;
}

// Bias coefficients may differ only on the unbias row.
io::json dataset_identity(const ExperimentReport& r, bool with_bias) {
  auto j = r.config.dataset.to_json();
  if (!with_bias) j.erase("bias_coefficients");
  j["preset"] = to_string(r.config.preset);
  return j;
}

void check_same_dataset(const std::vector<ExperimentReport>& reports) {
  if (reports.empty()) throw ConfigError("no reports to tabulate");
  std::set<std::string> methods;
  const ExperimentReport* biased = nullptr;
  for (const auto& r : reports) {
    if (r.seeds.empty()) throw ConfigError(to_string(r.config.method) + " has no completed seeds");
    if (!methods.insert(to_string(r.config.method)).second)
      throw ConfigError("two reports for method " + to_string(r.config.method));
    if (dataset_identity(r, false) != dataset_identity(reports.front(), false))
      throw ConfigError("reports on different datasets cannot share a table");
    if (r.config.method == Method::unbias) continue;
    if (biased && dataset_identity(r, true) != dataset_identity(*biased, true))
      throw ConfigError("reports on different datasets cannot share a table");
    biased = &r;
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                         "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> xy;
};

// Static line plot; x is drawn as log10 when log_x is set.
std::string svg_plot(const std::vector<Series>& series, const std::string& xlabel, const std::string& ylabel,
                     bool log_x) {
  constexpr double W = 640, H = 400, L = 60, R = 150, T = 20, B = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  auto tx = [&](double x) { return log_x ? std::log10(x) : x; };
  for (const auto& s : series)
    for (auto [x, y] : s.xy) {
      x0 = std::min(x0, tx(x));
      x1 = std::max(x1, tx(x));
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (x1 == x0) {
    x0 -= 1;
    x1 += 1;
  }
  if (y1 == y0) {
    y0 -= 0.05;
    y1 += 0.05;
  }
  auto px = [&](double x) { return L + (tx(x) - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    const double xp = L + (W - L - R) * k / 4, yp = H - B - (H - T - B) * k / 4;
    os << "<text x=\"" << xp << "\" y=\"" << H - B + 16 << "\" font-size=\"10\" text-anchor=\"middle\">"
       << (log_x ? "1e" + fmt(xv) : fmt(xv)) << "</text>\n";
    os << "<text x=\"" << L - 4 << "\" y=\"" << yp + 3 << "\" font-size=\"10\" text-anchor=\"end\">" << fmt(yv)
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" font-size=\"12\" text-anchor=\"middle\">"
     << xlabel << "</text>\n";
  os << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
     << (T + H - B) / 2 << ")\" text-anchor=\"middle\">" << ylabel << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto* color = kColors[i % std::size(kColors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (auto [x, y] : series[i].xy) os << px(x) << ',' << py(y) << ' ';
    os << "\"/>\n";
    for (auto [x, y] : series[i].xy)
      os << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"2\" fill=\"" << color << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 14 * (i + 1) << "\" font-size=\"11\" fill=\"" << color
       << "\">" << series[i].name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string csv_field(const std::string& v) {
  if (v.find_first_of(",\"") == std::string::npos) return v;
  std::string q = "\"";
  for (char ch : v) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::string render_table(const std::vector<ExperimentReport>& reports, TableFormat format) {
  check_same_dataset(reports);
  std::string out;
  if (format == TableFormat::csv) {
    out = "method,train,test\n";
    for (const auto& r : reports) out += to_string(r.config.method) + "," + cell(r.train()) + "," + cell(r.test()) + "\n";
  } else {
    out = "| Method | Train | Test |\n|---|---|---|\n";
    for (const auto& r : reports)
      out += "| " + to_string(r.config.method) + " | " + cell(r.train()) + " | " + cell(r.test()) + " |\n";
  }
  return out;
}

void emit_table(const std::vector<ExperimentReport>& reports, TableFormat format, const fs::path& path) {
  io::write_text(path, render_table(reports, format));
}

std::vector<TableRow> parse_table_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "method,train,test") throw FormatError("not a results table");
  auto parse_cell = [](const std::string& c) {
    const auto at = c.find(kPlusMinus);
    if (at == std::string::npos) throw FormatError("malformed cell '" + c + "'");
    return Summary{std::stod(c.substr(0, at)) / 100.0, std::stod(c.substr(at + std::string(kPlusMinus).size())) / 100.0};
  };
  std::vector<TableRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b) throw FormatError("malformed row '" + line + "'");
    rows.push_back({line.substr(0, a), parse_cell(line.substr(a + 1, b - a - 1)), parse_cell(line.substr(b + 1))});
  }
  return rows;
}

std::vector<fs::path> emit_curves(const std::vector<ExperimentReport>& reports, const fs::path& dir) {
  std::vector<fs::path> written;
  std::vector<Series> series;
  for (const auto& r : reports) {
    const auto method = to_string(r.config.method);
    std::map<std::int64_t, std::pair<double, int>> test_by_step;
    for (const auto& s : r.seeds) {
      for (const auto& [stage, rep] : s.stages.items()) {
        if (!rep.contains("curve")) continue;
        mrm::StageReport sr;
        for (const auto& c : rep.at("curve"))
          sr.curve.push_back({c.at("step").get<std::int64_t>(), c.at("split").get<std::string>(),
                              c.at("accuracy").get<double>(), c.at("loss").get<double>()});
        const auto path = dir / (method + "_seed-" + std::to_string(s.seed) + "_" + stage + ".csv");
        io::write_text(path, mrm::curves_csv(sr));
        written.push_back(path);
        if (stage != s.final_stage) continue;
        for (const auto& c : sr.curve) {
          if (c.split != "test") continue;
          auto& acc = test_by_step[c.step];
          acc.first += c.accuracy;
          ++acc.second;
        }
      }
    }
    Series line{method, {}};
    for (const auto& [step, acc] : test_by_step) line.xy.emplace_back(static_cast<double>(step), acc.first / acc.second);
    if (!line.xy.empty()) series.push_back(std::move(line));
  }
  if (series.empty()) throw ConfigError("no test-accuracy curves to plot");
  const auto svg = dir / "curves.svg";
  io::write_text(svg, svg_plot(series, "step", "test accuracy", false));
  written.push_back(svg);
  return written;
}

std::pair<fs::path, fs::path> emit_mask_heatmap(const mask::MaskLogits<float>& logits, const std::string& layer,
                                                const fs::path& stem) {
  auto csv = stem;
  csv += ".csv";
  auto pgm = stem;
  pgm += ".pgm";
  mask::write_heatmap_csv(logits, layer, csv);
  const auto it = std::find(logits.names.begin(), logits.names.end(), layer);
  const auto& t = logits.layers[static_cast<std::size_t>(it - logits.names.begin())];
  const std::size_t rows = t.shape()[0], cols = t.size() / rows;
  std::ostringstream os;
  os << "P2\n" << cols << ' ' << rows << "\n255\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c)
      os << (c ? " " : "") << static_cast<int>(std::lround(255.0 * sigmoid(t[r * cols + c])));
    os << '\n';
  }
  io::write_text(pgm, os.str());
  return {csv, pgm};
}

void emit_keep_ratio_plot(const std::vector<KeepRatioPoint>& points, const fs::path& path) {
  if (points.empty()) throw ConfigError("no points to plot");
  Series s{"accuracy", {}};
  for (const auto& p : points) {
    if (!(p.keep_ratio > 0.0)) throw ConfigError("keep ratios must be positive on a log axis");
    s.xy.emplace_back(p.keep_ratio, p.accuracy);
  }
  std::sort(s.xy.begin(), s.xy.end());
  io::write_text(path, svg_plot({s}, "keep ratio (log10)", "test accuracy", true));
}

GridSpec grid_from_json(const io::json& j) {
  GridSpec g;
  try {
    if (j.is_object()) {
      for (const auto& [k, v] : j.items()) g.emplace_back(k, v.get<std::vector<io::json>>());
    } else if (j.is_array()) {
      for (const auto& axis : j)
        g.emplace_back(axis.at("path").get<std::string>(), axis.at("values").get<std::vector<io::json>>());
    } else {
      throw ConfigError("grid must be an object or an array of axes");
    }
  } catch (const io::json::exception& e) {
    throw ConfigError(std::string("grid: ") + e.what());
  }
  return g;
}

GridResult grid_search(const ExperimentConfig& base, const GridSpec& grid, const RunOptions& opt) {
  if (grid.empty()) throw ConfigError("empty grid");
  std::size_t cells = 1;
  for (const auto& [path, values] : grid) {
    if (values.empty()) throw ConfigError("grid axis " + path + " has no values");
    if (path.empty() || path.front() != '/') throw ConfigError("grid axis '" + path + "' is not a JSON pointer");
    cells *= values.size();
  }
  GridResult out;
  for (const auto& [path, values] : grid) out.csv += csv_field(path) + ",";
  out.csv += "seed,train_accuracy,test_accuracy,keep_ratio\n";
  double best = -1;
  for (std::size_t c = 0; c < cells; ++c) {
    auto j = base.to_json();
    std::vector<const io::json*> chosen(grid.size());
    std::size_t rest = c;
    for (std::size_t a = grid.size(); a-- > 0;) {
      chosen[a] = &grid[a].second[rest % grid[a].second.size()];
      rest /= grid[a].second.size();
    }
    for (std::size_t a = 0; a < grid.size(); ++a) {
      try {
        j[io::json::json_pointer(grid[a].first)] = *chosen[a];
      } catch (const io::json::exception& e) {
        throw ConfigError("grid axis " + grid[a].first + ": " + e.what());
      }
    }
    auto rep = run_experiment(ExperimentConfig::from_json(j), opt);
    for (const auto& s : rep.seeds) {
      for (const auto* v : chosen) out.csv += csv_field(v->dump()) + ",";
      char buf[128];
      std::snprintf(buf, sizeof buf, "%llu,%.6f,%.6f,%.6f\n", static_cast<unsigned long long>(s.seed),
                    s.train_accuracy, s.test_accuracy, s.keep_ratio);
      out.csv += buf;
    }
    if (rep.test().mean > best) {
      best = rep.test().mean;
      out.best = c;
    }
    out.cells.push_back(std::move(rep));
  }
  return out;
}

}  // namespace modnet::exp
