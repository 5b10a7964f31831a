#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dpt/metrics.hpp"
#include "dpt/model.hpp"

namespace dpt {

struct BenchResult {
  std::size_t height = 0;
  std::size_t width = 0;
  int runs = 0;
  double mean_ms = 0;
  double std_ms = 0;
  double min_ms = 0;
  double flops = 0;
};

template <typename T>
Tensor<T> random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Tensor<T> img({3, h, w});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  T* d = img.mutable_data();
  for (std::size_t i = 0; i < img.numel(); ++i) d[i] = static_cast<T>(dist(rng));
  return img;
}

// Wall-clock statistics of the forward pass after warmup. Measurement only;
// outputs are never fed back into anything numeric.
template <typename T>
BenchResult bench_forward(DptModel<T>& m, std::size_t h, std::size_t w, int runs, int warmup,
                          std::uint64_t seed) {
  check_config(runs >= 1, "bench: runs must be >= 1");
  auto image = random_image<T>(h, w, seed);
  for (int i = 0; i < warmup; ++i) forward(m, image);
  std::vector<double> ms(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    auto out = forward(m, image);
    auto t1 = std::chrono::steady_clock::now();
    (void)out;
    ms[static_cast<std::size_t>(i)] =
        std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  BenchResult r;
  r.height = h;
  r.width = w;
  r.runs = runs;
  r.min_ms = ms[0];
  for (double v : ms) {
    r.mean_ms += v;
    r.min_ms = std::min(r.min_ms, v);
  }
  r.mean_ms /= runs;
  for (double v : ms) r.std_ms += (v - r.mean_ms) * (v - r.mean_ms);
  r.std_ms = std::sqrt(r.std_ms / runs);
  r.flops = estimate_flops(m.cfg, h, w);
  return r;
}

inline std::string bench_table(const std::vector<BenchResult>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "size" << std::right << std::setw(10) << "runs"
     << std::setw(14) << "mean_ms" << std::setw(14) << "std_ms" << std::setw(14) << "min_ms"
     << std::setw(16) << "gflops" << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(12)
       << (std::to_string(r.height) + "x" + std::to_string(r.width)) << std::right
       << std::setw(10) << r.runs << std::fixed << std::setprecision(3) << std::setw(14)
       << r.mean_ms << std::setw(14) << r.std_ms << std::setw(14) << r.min_ms
       << std::setprecision(3) << std::setw(16) << r.flops / 1e9 << "\n";
  }
  return os.str();
}

// One row of the resolution sweep: aligned relative absolute deviation at a
// given inference size, and its change relative to the first (reference)
// size.
struct SweepRow {
  std::size_t size = 0;
  double abs_rel = 0;
  double rel_change_pct = 0;  // relative_improvement vs the first row
};

// Runs inference at each size against a caller-supplied inverse-depth ground
// truth per size and reports the relative performance degradation against
// the first size. The harness format is fixed; the values are model-bound.
template <typename T>
std::vector<SweepRow> resolution_sweep(DptModel<T>& m, const std::vector<std::size_t>& sizes,
                                       const std::vector<Tensor<double>>& gt_inverse_depth,
                                       std::uint64_t seed) {
  check_config(!sizes.empty() && sizes.size() == gt_inverse_depth.size(),
               "sweep: need one ground-truth map per size");
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    std::size_t s = sizes[i];
    check_shape(gt_inverse_depth[i].rank() == 2 && gt_inverse_depth[i].extent(0) == s &&
                    gt_inverse_depth[i].extent(1) == s,
                "sweep: ground truth " + std::to_string(i) + " must be " + std::to_string(s) +
                    "x" + std::to_string(s));
    auto image = random_image<T>(s, s, seed);
    auto out = forward(m, image);
    check_shape(out.prediction.extent(0) == 1, "sweep: expected a depth model");
    DepthEvalPair pair;
    pair.prediction = Tensor<double>({s, s});
    double* pd = pair.prediction.mutable_data();
    for (std::size_t j = 0; j < s * s; ++j)
      pd[j] = static_cast<double>(out.prediction.at(j));
    pair.ground_truth = gt_inverse_depth[i];
    pair.gt_is_inverse_depth = true;
    pair.valid_mask.assign(s * s, 1);
    SweepRow row;
    row.size = s;
    row.abs_rel = depth_metrics(pair, true).abs_rel;
    rows.push_back(row);
  }
  for (auto& row : rows)
    row.rel_change_pct = relative_improvement(row.abs_rel, rows.front().abs_rel);
  return rows;
}

inline std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "size" << std::right << std::setw(14) << "abs_rel"
     << std::setw(20) << "rel_change_pct" << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(10) << r.size << std::right << std::fixed
       << std::setprecision(6) << std::setw(14) << r.abs_rel << std::setprecision(2)
       << std::setw(20) << std::showpos << r.rel_change_pct << std::noshowpos << "\n";
  }
  return os.str();
}

}  // namespace dpt
