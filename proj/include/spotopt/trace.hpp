// Per-iteration optimization records shared by every optimizer driver.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace spotopt {

enum class RunStatus {
  ok,              // ran to a budget limit
  converged,       // gradient/step tolerance reached
  line_search_failed,
  non_finite,      // NaN/Inf appeared; trace holds iterations up to the failure
};

const char* to_string(RunStatus s);

struct TracePoint {
  std::int64_t iter = 0;
  double loss = 0.0;
  double seconds = 0.0;  // cumulative wall time since the run started
};

struct RunTrace {
  std::vector<TracePoint> points;
  std::vector<std::vector<double>> snapshots;  // optional X per point; empty or size of points
  RunStatus status = RunStatus::ok;

  void append(std::int64_t iter, double loss, double seconds);
  void validate() const;  // strictly increasing iters, nondecreasing times

  double final_loss() const;
  double best_loss() const;

  // First cumulative time at which the loss reaches `target` or below;
  // negative if it never does.
  double time_to_loss(double target) const;
};

// CSV with header "iter,loss,seconds" and full double precision.
void save_trace_csv(const RunTrace& t, const std::string& path);
RunTrace load_trace_csv(const std::string& path);

}  // namespace spotopt
