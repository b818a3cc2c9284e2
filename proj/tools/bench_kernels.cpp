// Serial vs OpenMP kernel benchmark. Every kernel has a plain serial loop
// and an OpenMP variant that must agree bit for bit; this target times both
// and checks the agreement on realistic shapes.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <random>
#include <vector>

#include "spotopt/network.hpp"
#include "spotopt/objective.hpp"
#include "spotopt/parallel.hpp"
#include "spotopt/phantom.hpp"
#include "spotopt/sparse.hpp"
#include "spotopt/tensor.hpp"

using namespace spotopt;
using clk = std::chrono::steady_clock;

namespace {

double now_s() {
  return std::chrono::duration<double>(clk::now().time_since_epoch()).count();
}

template <class F>
double time_best(F&& f, int reps) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const double t0 = now_s();
    f();
    best = std::min(best, now_s() - t0);
  }
  return best;
}

bool bits_equal(const double* a, const double* b, std::size_t n) {
  return std::memcmp(a, b, n * sizeof(double)) == 0;
}

void report(const char* name, double work, const char* unit, double ts, double tp, bool same) {
  std::printf("%-22s serial %8.3f ms  parallel %8.3f ms  x%.2f", name, 1e3 * ts, 1e3 * tp,
              ts / tp);
  if (work > 0.0) std::printf("  %7.2f %s", work / tp, unit);
  std::printf("  %s\n", same ? "match" : "MISMATCH");
}

}  // namespace

int main() {
  std::printf("threads: %d\n", max_threads());
  std::mt19937_64 rng(17);

  // A realistic influence matrix from the generator family.
  const auto p = generate_problem(sample_training_spec(5));
  const auto& a = p.matrix;
  const std::size_t nnz = a.values.size();
  std::printf("problem: %lld voxels x %lld spots, %zu nnz\n\n",
              static_cast<long long>(p.n_voxels()), static_cast<long long>(p.n_spots()), nnz);

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<double> x(static_cast<std::size_t>(p.n_spots()));
  for (auto& v : x) v = 3.0 + 200.0 * u01(rng);

  int exit_code = 0;
  const auto check = [&](bool same) {
    if (!same) exit_code = 1;
  };

  {
    std::vector<double> ys(static_cast<std::size_t>(p.n_voxels()));
    std::vector<double> yp(ys.size());
    const double ts = time_best([&] { csr_matvec(a, x.data(), ys.data(), Exec::serial); }, 7);
    const double tp = time_best([&] { csr_matvec(a, x.data(), yp.data(), Exec::parallel); }, 7);
    const bool same = bits_equal(ys.data(), yp.data(), ys.size());
    report("csr_matvec", 2.0 * static_cast<double>(nnz) / 1e9, "GFLOP/s", ts, tp, same);
    check(same);
  }

  {
    ObjectiveEvaluator ev(p);
    double vs = 0.0, vp = 0.0;
    const double ts = time_best([&] { vs = ev.value(x.data(), Exec::serial); }, 7);
    const double tp = time_best([&] { vp = ev.value(x.data(), Exec::parallel); }, 7);
    const bool same = vs == vp;
    report("objective value", 0.0, "", ts, tp, same);  // touches structure rows only
    check(same);

    std::vector<double> gs(x.size()), gp(x.size());
    double fs = 0.0, fp = 0.0;
    const double tg_s = time_best([&] { fs = ev.gradient(x.data(), gs.data(), Exec::serial); }, 7);
    const double tg_p = time_best([&] { fp = ev.gradient(x.data(), gp.data(), Exec::parallel); }, 7);
    const bool gsame = fs == fp && bits_equal(gs.data(), gp.data(), gs.size());
    report("objective gradient", 0.0, "", tg_s, tg_p, gsame);
    check(gsame);
  }

  {
    const std::int64_t n = 512, k = 256, m = 512;
    Mat<float> ma(n, k), mb(k, m), cs(n, m), cp(n, m);
    std::normal_distribution<float> nf(0.0f, 1.0f);
    for (auto& v : ma.a) v = nf(rng);
    for (auto& v : mb.a) v = nf(rng);
    const double flops = 2.0 * n * k * m / 1e9;
    const double ts = time_best([&] { gemm_nn(ma, mb, cs, false, Exec::serial); }, 5);
    const double tp = time_best([&] { gemm_nn(ma, mb, cp, false, Exec::parallel); }, 5);
    const bool same = std::memcmp(cs.a.data(), cp.a.data(), cs.a.size() * sizeof(float)) == 0;
    report("gemm_nn f32", flops, "GFLOP/s", ts, tp, same);
    check(same);
  }

  {
    const std::int64_t n = 1500, qh = 8, kvh = 4, d = 32;
    Mat<float> q(n, qh * d), k(n, kvh * d), v(n, kvh * d), os(n, qh * d), op(n, qh * d),
        ot(n, qh * d);
    std::normal_distribution<float> nf(0.0f, 0.5f);
    for (auto& e : q.a) e = nf(rng);
    for (auto& e : k.a) e = nf(rng);
    for (auto& e : v.a) e = nf(rng);
    const double flops = 4.0 * n * n * qh * d / 1e9;
    const double ts = time_best(
        [&] { attention_gqa<float>(q, k, v, qh, kvh, d, os, AttentionMode::reference, nullptr, nullptr, Exec::serial); }, 3);
    const double tp = time_best(
        [&] { attention_gqa<float>(q, k, v, qh, kvh, d, op, AttentionMode::reference, nullptr, nullptr, Exec::parallel); }, 3);
    const bool same = std::memcmp(os.a.data(), op.a.data(), os.a.size() * sizeof(float)) == 0;
    report("attention reference", flops, "GFLOP/s", ts, tp, same);
    check(same);

    const double tt = time_best(
        [&] { attention_gqa<float>(q, k, v, qh, kvh, d, ot, AttentionMode::tiled, nullptr, nullptr, Exec::parallel); }, 3);
    double worst = 0.0;
    for (std::size_t i = 0; i < ot.a.size(); ++i)
      worst = std::max(worst, static_cast<double>(std::abs(ot.a[i] - os.a[i])));
    std::printf("%-22s parallel %8.3f ms  vs reference max abs diff %.2e\n", "attention tiled",
                1e3 * tt, worst);
    if (!(worst <= 1e-5)) exit_code = 1;
  }

  return exit_code;
}
