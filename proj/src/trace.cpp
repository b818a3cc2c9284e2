#include "spotopt/trace.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace spotopt {

const char* to_string(RunStatus s) {
  switch (s) {
    case RunStatus::ok: return "ok";
    case RunStatus::converged: return "converged";
    case RunStatus::line_search_failed: return "line_search_failed";
    case RunStatus::non_finite: return "non_finite";
  }
  return "ok";
}

void RunTrace::append(std::int64_t iter, double loss, double seconds) {
  points.push_back({iter, loss, seconds});
}

void RunTrace::validate() const {
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].iter <= points[i - 1].iter)
      throw std::logic_error("RunTrace: iteration indices must strictly increase");
    if (points[i].seconds < points[i - 1].seconds)
      throw std::logic_error("RunTrace: times must be nondecreasing");
  }
  if (!snapshots.empty() && snapshots.size() != points.size())
    throw std::logic_error("RunTrace: snapshot count mismatch");
}

double RunTrace::final_loss() const {
  if (points.empty()) throw std::logic_error("RunTrace: empty");
  return points.back().loss;
}

double RunTrace::best_loss() const {
  if (points.empty()) throw std::logic_error("RunTrace: empty");
  double best = points.front().loss;
  for (const auto& p : points) best = std::min(best, p.loss);
  return best;
}

double RunTrace::time_to_loss(double target) const {
  for (const auto& p : points)
    if (p.loss <= target) return p.seconds;
  return -1.0;
}

void save_trace_csv(const RunTrace& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open trace file for writing: " + path);
  out << "iter,loss,seconds\n";
  char buf[96];
  for (const auto& p : t.points) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g\n", static_cast<long long>(p.iter),
                  p.loss, p.seconds);
    out << buf;
  }
  if (!out) throw std::runtime_error("failed writing trace file: " + path);
}

RunTrace load_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace file: " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("iter,loss,seconds", 0) != 0)
    throw std::runtime_error("bad trace header in " + path);
  RunTrace t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    TracePoint p;
    char comma;
    if (!(ss >> p.iter >> comma >> p.loss >> comma >> p.seconds))
      throw std::runtime_error("bad trace row in " + path + ": " + line);
    t.points.push_back(p);
  }
  t.validate();
  return t;
}

}  // namespace spotopt
