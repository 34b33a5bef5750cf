#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace pcml {

/// Comma-separated table with a header row; fields may be double-quoted.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column position; throws ValidationError naming a missing column.
  std::size_t column(std::string_view name) const;
  bool has(std::string_view name) const;
  /// Numeric value of a cell; empty or unparsable cells are NaN.
  double number(std::size_t row, std::size_t col) const;
};

CsvTable parse_csv(const std::string& text);
CsvTable read_csv(const std::filesystem::path& path);

enum class PlotKind { trajectory, bands, loss };
PlotKind plot_kind_from_string(std::string_view s);

struct PlotLabels {
  std::string x;
  std::string y;
  std::string title;
  /// Panel titles by output index; missing entries fall back to "output k".
  std::vector<std::string> outputs;
};

/// Schemas (x is the first column after `row`):
///   trajectory: set,row,x...,output,truth,prediction[,observed]
///   bands:      set,row,x...,output,truth,mean,lower,upper[,observed]
///   loss:       epoch,total_loss[,data_loss,physics_loss]
std::string render_svg(const CsvTable& table, PlotKind kind, const PlotLabels& labels = {});
void plot(const std::filesystem::path& csv, PlotKind kind, const std::filesystem::path& svg,
          const PlotLabels& labels = {});

}  // namespace pcml
