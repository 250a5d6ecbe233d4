#include "fedcausal/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace fedcausal {

namespace fs = std::filesystem;

std::vector<HistogramBin> log_histogram(const ScoreSample& s, int bins, double log10_min) {
  if (bins < 1) fail(ErrorCode::InvalidArgument, "histogram needs at least one bin");
  if (!(log10_min < 0.0)) fail(ErrorCode::InvalidArgument, "log10_min must be negative");
  const double width = -log10_min / bins;
  const double neg_inf = -std::numeric_limits<double>::infinity();

  std::vector<HistogramBin> out;
  auto add = [&](const std::string& score, const Vector& e) {
    for (const std::string group : {"all", "treated", "control"}) {
      std::vector<std::size_t> counts(static_cast<std::size_t>(bins), 0);
      std::size_t zeros = 0;
      for (Eigen::Index i = 0; i < e.size(); ++i) {
        if (group == "treated" && s.w(i) != 1) continue;
        if (group == "control" && s.w(i) != 0) continue;
        if (!(e(i) > 0.0)) {
          ++zeros;
          continue;
        }
        // Scores below the range land in the first bin, 1.0 in the last.
        const double l = std::log10(e(i));
        auto b = static_cast<long>(std::floor((l - log10_min) / width));
        b = std::clamp<long>(b, 0, bins - 1);
        ++counts[static_cast<std::size_t>(b)];
      }
      out.push_back(HistogramBin{score, group, neg_inf, neg_inf, zeros});
      for (int b = 0; b < bins; ++b)
        out.push_back(HistogramBin{score, group, log10_min + b * width, log10_min + (b + 1) * width,
                                   counts[static_cast<std::size_t>(b)]});
    }
  };
  add("local_e2", s.local);
  add("global", s.global);
  return out;
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct BoxStats {
  double q1, median, q3, lo, hi;
};

BoxStats box_stats(const std::vector<double>& v) {
  BoxStats b{};
  b.q1 = empirical_quantile(v, 0.25);
  b.median = empirical_quantile(v, 0.5);
  b.q3 = empirical_quantile(v, 0.75);
  const double iqr = b.q3 - b.q1;
  b.lo = b.q1;
  b.hi = b.q3;
  for (double x : v) {
    if (x >= b.q1 - 1.5 * iqr) b.lo = std::min(b.lo, x);
    if (x <= b.q3 + 1.5 * iqr) b.hi = std::max(b.hi, x);
  }
  return b;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fixed(double v, int digits = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::string render_svg(const std::string& title, const std::vector<std::string>& names,
                       const std::map<std::string, std::vector<double>>& values, double truth) {
  const double left = 60, top = 40, plot_h = 300, slot = 90;
  const double width = left + slot * static_cast<double>(std::max<std::size_t>(names.size(), 1)) + 20;
  const double height = top + plot_h + 130;

  double lo = truth, hi = truth;
  for (const auto& [name, v] : values)
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  if (hi - lo < 1e-12) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  auto ypos = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width, 0) << "\" height=\"" << fixed(height, 0)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << fixed(width / 2, 0) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
    << xml_escape(title) << "</text>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
    << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    const double y = ypos(v);
    s << "<line x1=\"" << left - 4 << "\" y1=\"" << fixed(y) << "\" x2=\"" << left << "\" y2=\"" << fixed(y)
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << left - 6 << "\" y=\"" << fixed(y + 4) << "\" text-anchor=\"end\">" << fixed(v) << "</text>\n";
  }
  const double ty = ypos(truth);
  s << "<line x1=\"" << left << "\" y1=\"" << fixed(ty) << "\" x2=\"" << fixed(width - 10) << "\" y2=\"" << fixed(ty)
    << "\" stroke=\"red\" stroke-dasharray=\"5,4\"/>\n";

  for (std::size_t i = 0; i < names.size(); ++i) {
    const double cx = left + slot * (static_cast<double>(i) + 0.5);
    const auto it = values.find(names[i]);
    if (it != values.end() && !it->second.empty()) {
      const auto b = box_stats(it->second);
      const double half = slot * 0.3;
      s << "<line x1=\"" << fixed(cx) << "\" y1=\"" << fixed(ypos(b.hi)) << "\" x2=\"" << fixed(cx) << "\" y2=\""
        << fixed(ypos(b.lo)) << "\" stroke=\"black\"/>\n";
      s << "<rect x=\"" << fixed(cx - half) << "\" y=\"" << fixed(ypos(b.q3)) << "\" width=\"" << fixed(2 * half)
        << "\" height=\"" << fixed(std::max(0.5, ypos(b.q1) - ypos(b.q3)))
        << "\" fill=\"#9ecae1\" stroke=\"black\"/>\n";
      s << "<line x1=\"" << fixed(cx - half) << "\" y1=\"" << fixed(ypos(b.median)) << "\" x2=\"" << fixed(cx + half)
        << "\" y2=\"" << fixed(ypos(b.median)) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    } else {
      s << "<text x=\"" << fixed(cx) << "\" y=\"" << fixed(top + plot_h / 2)
        << "\" text-anchor=\"middle\" fill=\"gray\">undefined</text>\n";
    }
    const double ly = top + plot_h + 12;
    s << "<text x=\"" << fixed(cx) << "\" y=\"" << fixed(ly) << "\" text-anchor=\"end\" transform=\"rotate(-40 "
      << fixed(cx) << " " << fixed(ly) << ")\">" << xml_escape(names[i]) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace

PlotFiles emit_plotdata(const RunSummary& summary, const std::string& raw_csv_path, const std::string& out_dir) {
  std::ifstream in(raw_csv_path);
  if (!in) fail(ErrorCode::IoError, "cannot open raw CSV '" + raw_csv_path + "'");
  std::string header;
  if (!std::getline(in, header) || header.empty()) fail(ErrorCode::IoError, "raw CSV '" + raw_csv_path + "' is empty");
  const auto columns = split(header);
  auto column = [&](const std::string& name) {
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) fail(ErrorCode::IoError, "raw CSV lacks column '" + name + "'");
    return static_cast<std::size_t>(it - columns.begin());
  };
  const auto c_rep = column("replication"), c_status = column("status"), c_est = column("estimator"),
             c_tau = column("tau_hat");

  std::vector<std::string> names;
  std::map<std::string, std::vector<double>> values;
  std::vector<std::string> long_rows;
  std::string line;
  std::size_t data_rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++data_rows;
    const auto f = split(line);
    if (f.size() != columns.size()) fail(ErrorCode::IoError, "malformed raw CSV row: " + line);
    const auto& est = f[c_est];
    if (std::find(names.begin(), names.end(), est) == names.end()) names.push_back(est);
    if (f[c_status] != "ok") continue;
    values[est].push_back(std::stod(f[c_tau]));
    long_rows.push_back(summary.name + "," + f[c_rep] + "," + est + "," + f[c_tau]);
  }
  if (data_rows == 0) fail(ErrorCode::IoError, "raw CSV '" + raw_csv_path + "' has no rows");

  const fs::path dir(out_dir);
  PlotFiles files;
  files.boxplot_csv = (dir / "boxplot.csv").string();
  files.histogram_csv = (dir / "histogram.csv").string();
  files.svg = (dir / "boxplot.svg").string();
  {
    std::ofstream out(files.boxplot_csv);
    if (!out) fail(ErrorCode::IoError, "cannot write '" + files.boxplot_csv + "'");
    out << "panel,replication,estimator,tau_hat\n";
    for (const auto& r : long_rows) out << r << '\n';
  }
  {
    std::ofstream out(files.histogram_csv);
    if (!out) fail(ErrorCode::IoError, "cannot write '" + files.histogram_csv + "'");
    out << "score,group,log10_lo,log10_hi,count\n";
    if (summary.scores)
      for (const auto& b : log_histogram(*summary.scores))
        out << b.score << ',' << b.group << ',' << format_double(b.lo) << ',' << format_double(b.hi) << ','
            << b.count << '\n';
  }
  {
    std::ofstream out(files.svg);
    if (!out) fail(ErrorCode::IoError, "cannot write '" + files.svg + "'");
    const std::string title = "DGP " + to_string(summary.dgp) + ", " + to_string(summary.regime) +
                              " local overlap (dashed: true ATE)";
    out << render_svg(title, names, values, summary.truth.value);
  }
  return files;
}

}  // namespace fedcausal
