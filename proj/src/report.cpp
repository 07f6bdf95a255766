#include "fdp/report.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "fdp/binary_io.hpp"
#include "fdp/errors.hpp"

namespace fdp {

namespace {

using GroupKey = std::tuple<std::string, int, std::string, std::string>;  // scale, demos, perturbation, priority

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string escape_xml(const std::string& s) {
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

const char* kPalette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3"};

}  // namespace

std::vector<AggregateRow> aggregate(const std::vector<ResultRow>& rows, bool force) {
  std::set<std::string> hashes;
  for (const auto& r : rows) hashes.insert(r.config_hash);
  if (hashes.size() > 1 && !force) {
    std::string list;
    for (const auto& h : hashes) list += (list.empty() ? "" : ", ") + h;
    throw ConfigError("result rows come from different configs (" + list + "); pass --force to mix them");
  }
  std::map<std::tuple<std::string, std::string, int, std::string, std::string>, std::vector<const ResultRow*>> groups;
  std::vector<std::tuple<std::string, std::string, int, std::string, std::string>> order;
  for (const auto& r : rows) {
    if (!(r.success_rate >= 0.0 && r.success_rate <= 1.0)) {
      throw ArgumentError("success_rate outside [0, 1] for method " + r.method);
    }
    auto key = std::make_tuple(r.method, r.priority, r.demos, r.scale, r.perturbation);
    auto& g = groups[key];
    if (g.empty()) order.push_back(key);
    g.push_back(&r);
  }
  std::vector<AggregateRow> out;
  for (const auto& key : order) {
    const auto& g = groups.at(key);
    AggregateRow a;
    std::tie(a.method, a.priority, a.demos, a.scale, a.perturbation) = key;
    a.seeds = static_cast<int>(g.size());
    double sum = 0.0;
    for (const auto* r : g) {
      sum += r->success_rate;
      a.episodes += r->episodes;
    }
    a.mean = sum / a.seeds;
    if (a.seeds > 1) {
      double ss = 0.0;
      for (const auto* r : g) ss += (r->success_rate - a.mean) * (r->success_rate - a.mean);
      a.stddev = std::sqrt(ss / (a.seeds - 1));
    }
    out.push_back(a);
  }
  return out;
}

const AggregateRow& find_aggregate(const std::vector<AggregateRow>& table, const std::string& method,
                                   const std::string& priority, int demos, const std::string& scale,
                                   const std::string& perturbation) {
  for (const auto& a : table) {
    if (a.method == method && a.priority == priority && a.demos == demos && a.scale == scale &&
        a.perturbation == perturbation) {
      return a;
    }
  }
  throw ArgumentError("no results for " + method + "/" + priority + "/" + std::to_string(demos) + "/" + scale + "/" +
                      perturbation);
}

std::string aggregate_to_csv(const std::vector<AggregateRow>& table) {
  std::string out = "method,priority,demos,scale,perturbation,mean,std,seeds,episodes\n";
  for (const auto& a : table) {
    out += a.method + "," + a.priority + "," + std::to_string(a.demos) + "," + a.scale + "," + a.perturbation + "," +
           fixed(a.mean, 6) + "," + fixed(a.stddev, 6) + "," + std::to_string(a.seeds) + "," +
           std::to_string(a.episodes) + "\n";
  }
  return out;
}

std::string render_markdown(const std::vector<AggregateRow>& table) {
  std::vector<std::string> methods;
  std::vector<GroupKey> groups;
  std::map<std::pair<GroupKey, std::string>, const AggregateRow*> cells;
  for (const auto& a : table) {
    if (std::find(methods.begin(), methods.end(), a.method) == methods.end()) methods.push_back(a.method);
    GroupKey g{a.scale, a.demos, a.perturbation, a.priority};
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
    cells[{g, a.method}] = &a;
  }
  std::ostringstream os;
  os << "| scale | demos | perturbation | priority |";
  for (const auto& m : methods) os << " " << m << " |";
  os << "\n|---|---|---|---|";
  for (std::size_t i = 0; i < methods.size(); ++i) os << "---|";
  os << "\n";
  for (const auto& g : groups) {
    os << "| " << std::get<0>(g) << " | " << std::get<1>(g) << " | " << std::get<2>(g) << " | " << std::get<3>(g)
       << " |";
    for (const auto& m : methods) {
      auto it = cells.find({g, m});
      if (it == cells.end()) {
        os << " - |";
      } else {
        os << " " << fixed(100.0 * it->second->mean, 1) << " ± " << fixed(100.0 * it->second->stddev, 1) << " |";
      }
    }
    os << "\n";
  }
  return os.str();
}

std::string render_svg(const std::vector<AggregateRow>& table, const std::string& title) {
  std::vector<std::string> methods;
  std::vector<GroupKey> groups;
  std::map<std::pair<GroupKey, std::string>, const AggregateRow*> cells;
  for (const auto& a : table) {
    if (std::find(methods.begin(), methods.end(), a.method) == methods.end()) methods.push_back(a.method);
    GroupKey g{a.scale, a.demos, a.perturbation, a.priority};
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
    cells[{g, a.method}] = &a;
  }
  const double bar = 14.0, gap = 24.0, left = 60.0, top = 40.0, plot_h = 240.0;
  const double group_w = bar * static_cast<double>(std::max<std::size_t>(methods.size(), 1)) + gap;
  const double width = left + group_w * static_cast<double>(groups.size()) + 160.0;
  const double height = top + plot_h + 90.0;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width, 0) << "\" height=\"" << fixed(height, 0)
     << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << escape_xml(title) << "</text>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double y = top + plot_h * (1.0 - tick / 4.0);
    os << "<line x1=\"" << left << "\" x2=\"" << fixed(width - 150.0, 1) << "\" y1=\"" << fixed(y, 1) << "\" y2=\""
       << fixed(y, 1) << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << fixed(y + 3, 1) << "\" text-anchor=\"end\">" << tick * 25
       << "</text>\n";
  }
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const double gx = left + gap / 2 + group_w * static_cast<double>(gi);
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      auto it = cells.find({groups[gi], methods[mi]});
      if (it == cells.end()) continue;
      const double x = gx + bar * static_cast<double>(mi);
      const double h = plot_h * it->second->mean;
      os << "<rect x=\"" << fixed(x, 1) << "\" y=\"" << fixed(top + plot_h - h, 1) << "\" width=\"" << bar - 2
         << "\" height=\"" << fixed(h, 1) << "\" fill=\"" << kPalette[mi % std::size(kPalette)] << "\"/>\n";
      const double lo = std::max(0.0, it->second->mean - it->second->stddev);
      const double hi = std::min(1.0, it->second->mean + it->second->stddev);
      const double cx = x + (bar - 2) / 2;
      os << "<line x1=\"" << fixed(cx, 1) << "\" x2=\"" << fixed(cx, 1) << "\" y1=\""
         << fixed(top + plot_h * (1 - lo), 1) << "\" y2=\"" << fixed(top + plot_h * (1 - hi), 1)
         << "\" stroke=\"black\"/>\n";
    }
    const auto& g = groups[gi];
    const std::string label = std::get<0>(g) + "/" + std::to_string(std::get<1>(g)) + "/" + std::get<2>(g);
    os << "<text x=\"" << fixed(gx, 1) << "\" y=\"" << fixed(top + plot_h + 14, 1) << "\">" << escape_xml(label)
       << "</text>\n";
    os << "<text x=\"" << fixed(gx, 1) << "\" y=\"" << fixed(top + plot_h + 26, 1) << "\">"
       << escape_xml(std::get<3>(g)) << "</text>\n";
  }
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    const double y = top + 14.0 * static_cast<double>(mi);
    os << "<rect x=\"" << fixed(width - 140, 1) << "\" y=\"" << fixed(y, 1) << "\" width=\"10\" height=\"10\" fill=\""
       << kPalette[mi % std::size(kPalette)] << "\"/>\n";
    os << "<text x=\"" << fixed(width - 125, 1) << "\" y=\"" << fixed(y + 9, 1) << "\">" << escape_xml(methods[mi])
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

ReportFiles write_report(const std::vector<ResultRow>& rows, const std::filesystem::path& out_dir, bool force) {
  const auto table = aggregate(rows, force);
  std::set<std::string> hashes;
  for (const auto& r : rows) hashes.insert(r.config_hash);
  std::string hash_line;
  for (const auto& h : hashes) hash_line += (hash_line.empty() ? "" : ", ") + h;
  std::filesystem::create_directories(out_dir);
  ReportFiles files{out_dir / "report.md", out_dir / "report.svg", out_dir / "summary.csv"};
  write_text_atomic(files.markdown, "# Success rates (%)\n\nconfig: " + hash_line + "  \nversion: " +
                                        std::string(FDP_VERSION) + "\n\n" + render_markdown(table));
  write_text_atomic(files.svg, "<!-- config " + hash_line + " version " + FDP_VERSION + " -->\n" +
                                   render_svg(table, "Success rate (%) by scale/demos/perturbation"));
  write_text_atomic(files.summary_csv,
                    "# config " + hash_line + " version " + FDP_VERSION + "\n" + aggregate_to_csv(table));
  return files;
}

}  // namespace fdp
