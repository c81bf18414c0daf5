#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace metal {

struct MetricsRow {
  double wall_clock = 0.0;
  std::int64_t real_samples = 0;
  int task = -1;
  std::string phase;
  std::string name;
  double value = 0.0;
};

/// Long-format metrics table: wall_clock, real_samples, task, phase, name, value.
///
/// Rows are kept in memory and, when a file is attached, appended to it.
/// `flush()` is called at task boundaries so a crash leaves a consistent
/// prefix on disk.
class MetricsLog {
 public:
  static constexpr std::string_view kHeader = "wall_clock,real_samples,task,phase,name,value";

  MetricsLog() : start_(std::chrono::steady_clock::now()) {}

  /// Attaches a CSV file. With `append` an existing file keeps its rows.
  void open(const std::filesystem::path& path, bool append = false) {
    const bool existing = append && std::filesystem::exists(path) && std::filesystem::file_size(path) > 0;
    file_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!file_) throw std::runtime_error("cannot open metrics file " + path.string());
    if (!existing) file_ << kHeader << '\n';
  }

  /// Source of the real-sample column. Must outlive the log.
  void track(const std::int64_t* real_samples) { counter_ = real_samples; }

  void record(int task, std::string_view phase, std::string_view name, double value) {
    MetricsRow row{elapsed(), counter_ ? *counter_ : 0, task, std::string(phase), std::string(name), value};
    if (!rows_.empty() && row.real_samples < rows_.back().real_samples)
      throw std::logic_error("metrics: real-sample counter went backwards");
    if (file_.is_open()) file_ << format(row) << '\n';
    rows_.push_back(std::move(row));
  }

  void flush() {
    if (file_.is_open()) file_.flush();
  }

  const std::vector<MetricsRow>& rows() const { return rows_; }

  static std::string format(const MetricsRow& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << r.wall_clock << ',' << r.real_samples << ',' << r.task << ','
       << r.phase << ',' << r.name << ',' << std::setprecision(10) << std::defaultfloat << r.value;
    return os.str();
  }

 private:
  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

  std::chrono::steady_clock::time_point start_;
  const std::int64_t* counter_ = nullptr;
  std::ofstream file_;
  std::vector<MetricsRow> rows_;
};

}  // namespace metal
