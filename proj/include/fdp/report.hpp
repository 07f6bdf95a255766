#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fdp/datastore.hpp"

namespace fdp {

struct AggregateRow {
  std::string method;
  std::string priority;
  int demos = 0;
  std::string scale;
  std::string perturbation;
  double mean = 0.0;
  double stddev = 0.0;  // sample std over seeds, 0 for a single seed
  int seeds = 0;
  int episodes = 0;
};

// Rows carrying different config hashes are refused unless force is set.
std::vector<AggregateRow> aggregate(const std::vector<ResultRow>& rows, bool force = false);

// Mean success for one (method, priority, demos, scale, perturbation) group, or throws ArgumentError.
const AggregateRow& find_aggregate(const std::vector<AggregateRow>& table, const std::string& method,
                                   const std::string& priority, int demos, const std::string& scale,
                                   const std::string& perturbation);

std::string aggregate_to_csv(const std::vector<AggregateRow>& table);
std::string render_markdown(const std::vector<AggregateRow>& table);
std::string render_svg(const std::vector<AggregateRow>& table, const std::string& title);

struct ReportFiles {
  std::filesystem::path markdown;
  std::filesystem::path svg;
  std::filesystem::path summary_csv;
};

ReportFiles write_report(const std::vector<ResultRow>& rows, const std::filesystem::path& out_dir,
                         bool force = false);

}  // namespace fdp
