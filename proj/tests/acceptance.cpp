// End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "bns/analysis.hpp"
#include "bns/app.hpp"
#include "bns/bench.hpp"
#include "bns/microbn.hpp"
#include "bns/net.hpp"
#include "helpers.hpp"

using namespace bns;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Tolerances

constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr double kMomentsTol = 1e-12;
constexpr std::size_t kMomentTensors = 100;
constexpr std::size_t kCovModels = 20;
constexpr std::size_t kCovDraws = 1'000'000;
constexpr double kCovSigmas = 3.0;
constexpr std::size_t kMaHorizon = 100'000;
constexpr double kMaRelTol = 0.05;
constexpr double kSpeedupPercent = 36.7;
constexpr double kSpeedupPointTol = 0.1;
constexpr double kMemFraction = 0.03125;
constexpr double kAccuracyGap = 0.02;
constexpr double kOrderTie = 0.005;
constexpr std::size_t kSignTrials = 100;
constexpr double kSignAlpha = 0.05;
constexpr double kKernelSpeedup = 4.0;
constexpr std::size_t kKernelReps = 9;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << std::fixed << v;
  return s.str();
}

const fs::path& scratch() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / ("bns_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

fs::path config_path(const std::string& rel) { return fs::path(BNS_SOURCE_DIR) / "configs" / rel; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

using Row = std::map<std::string, std::string>;

std::vector<Row> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::vector<std::string> header;
  std::vector<Row> rows;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::stringstream ss(l);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header.empty()) {
      header = split(line);
      continue;
    }
    const auto cells = split(line);
    Row r;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) r[header[i]] = cells[i];
    rows.push_back(std::move(r));
  }
  return rows;
}

// Runs one shipped config in-process and returns its output directory.
fs::path run_config(const std::string& rel, const std::string& command, std::size_t jobs = 1) {
  const fs::path out = scratch() / (fs::path(rel).replace_extension("").string() + "_j" + std::to_string(jobs));
  app::Options o;
  o.command = command;
  o.config = config_path(rel);
  o.out = out;
  o.jobs = jobs;
  std::ostringstream log;
  const int code = app::run(o, log);
  if (code != app::ok) throw std::runtime_error(rel + " exited with code " + std::to_string(code) + "\n" + log.str());
  return out;
}

double mean_final_acc(const fs::path& out) {
  const auto m = json::parse(slurp(out / "manifest.json"));
  double sum = 0.0;
  for (const auto& r : m.at("runs")) sum += r.at("final_val_acc").get<double>();
  return sum / static_cast<double>(m.at("runs").size());
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? sep : "") + parts[i];
  return s;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome gradient_exactness() {
  struct Case {
    std::string name;
    SamplingStrategy strategy;
    VdnConfig vdn;
  };
  const std::vector<Case> cases{{"Full", SamplingStrategy::full(), {}},
                                {"NS", {Strategy::ns, 0.5}, {}},
                                {"BS", {Strategy::bs, 0.5}, {}},
                                {"FS", {Strategy::fs, 0.25}, {}},
                                {"FRS", {Strategy::frs, 0.3}, {}},
                                {"VDN-mixed", {Strategy::fs, 0.25}, {VdnMode::mixed, 1, 0.5}}};
  const std::size_t n = 4, side = 6, classes = 3;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);

  double worst = 0.0;
  std::vector<std::string> parts;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const auto& c = cases[k];
    const Model model = Model::build(conv_bn_model(side, side, 1, {3, 3, 3}, classes), 100 + k);
    const SamplingPlan plan = make_plan(c.strategy, model.bn_input_shapes(n), 0, 100 + k);
    Tensor4 x = testutil::random_tensor(n, side, side, 1, 200 + k);
    BatchLayout layout = BatchLayout::all_real(n);
    if (c.vdn.mode != VdnMode::off) {
      x = prepend_virtual(x, testutil::random_tensor(c.vdn.n_v, side, side, 1, 300 + k));
      layout = BatchLayout::virtual_first(c.vdn.n_v, n);
    }
    PlanScheme scheme(&plan, c.vdn);
    const auto rep = grad_check(model, x, labels, &scheme, layout, kGradStep);
    worst = std::max(worst, rep.max_error);
    parts.push_back(c.name + "=" + [&] {
      std::ostringstream s;
      s.precision(1);
      s << std::scientific << rep.max_error;
      return s.str();
    }());
  }
  return {worst < kGradTol, join(parts, " ") + " (tol 1e-4)"};
}

Outcome statistics_oracles() {
  double worst = 0.0;
  std::size_t checks = 0;
  RngStream rng(7, {0, 0, Purpose::test});
  for (std::size_t t = 0; t < kMomentTensors; ++t) {
    const std::size_t n = 2 + rng.uniform_int(0, 14), h = 1 + rng.uniform_int(0, 9), w = 1 + rng.uniform_int(0, 9),
                      c = 1 + rng.uniform_int(0, 5);
    const double scale = std::exp(rng.normal(0.0, 2.0)), shift = rng.normal(0.0, 10.0);
    const Tensor4 x = testutil::random_tensor(n, h, w, c, 1000 + t, scale, shift);
    std::vector<IndexSet> sets{full_indices(x)};
    for (auto tag : {Strategy::ns, Strategy::bs, Strategy::fs, Strategy::frs}) {
      const double ratio = 0.05 + 0.9 * rng.uniform();
      sets.push_back(plan_indices(make_plan({tag, ratio}, {x.shape()}, 0, t), 0));
    }
    const std::size_t hs = 1 + rng.uniform_int(0, h - 1), ws = 1 + rng.uniform_int(0, w - 1);
    sets.push_back(gather_patch(x, rng.uniform_int(0, h - hs), rng.uniform_int(0, w - ws), hs, ws));
    const std::size_t ns = 1 + rng.uniform_int(0, n - 1);
    sets.push_back(gather_rows(x, rng.uniform_int(0, n - ns), ns));
    for (const auto& idx : sets) {
      worst = std::max(worst, testutil::max_stats_err(channel_moments(x, idx), testutil::naive_moments(x, idx)));
      ++checks;
    }
  }
  std::ostringstream s;
  s.precision(2);
  s << std::scientific << worst;
  return {worst < kMomentsTol, std::to_string(checks) + " index sets on " + std::to_string(kMomentTensors) +
                                   " tensors, max rel err " + s.str() + " (tol 1e-12)"};
}

Outcome mean_variance_prediction() {
  std::vector<CovModel> models{CovModel::iid(8, 1.0), CovModel::equicorrelated(8, 1.0, 1.0)};
  RngStream rng(11, {0, 0, Purpose::test});
  while (models.size() < kCovModels) models.push_back(CovModel::random(2 + rng.uniform_int(0, 14), rng));

  double worst_z = 0.0;
  bool closed_ok = true;
  closed_ok = closed_ok && std::abs(predict_mean_variance(models[0]) - 1.0 / 8) < 1e-15;
  closed_ok = closed_ok && std::abs(predict_mean_variance(models[1]) - 1.0) < 1e-15;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto mc = testutil::mc_mean_variance(models[i], kCovDraws, 500 + i);
    worst_z = std::max(worst_z, std::abs(mc.value - predict_mean_variance(models[i])) / mc.standard_error);
  }
  return {closed_ok && worst_z < kCovSigmas, std::to_string(models.size()) + " models, worst |z| = " +
                                                 fmt(worst_z, 2) + " (limit 3), closed cases v/s and v " +
                                                 (closed_ok ? "exact" : "WRONG")};
}

Outcome moving_average_variance() {
  double worst = 0.0;
  std::vector<std::string> parts;
  for (double a : {0.3, 0.7, 0.9}) {
    const double sim = testutil::simulate_ma_ratio(a, kMaHorizon, static_cast<std::uint64_t>(a * 100));
    const double rel = std::abs(sim / ma_variance_ratio(a) - 1.0);
    worst = std::max(worst, rel);
    parts.push_back("a=" + fmt(a, 1) + ": " + fmt(sim) + " vs " + fmt(ma_variance_ratio(a)));
  }
  return {worst < kMaRelTol, join(parts, ", ") + " (worst " + fmt(100 * worst, 2) + "%, tol 5%)"};
}

Outcome speedup_number() {
  const auto r = theoretical_speedup(56 * 56 * 128, 1.0 / 32);
  const double pct = 100.0 * (r.speedup - 1.0);
  const bool ok = std::abs(pct - kSpeedupPercent) <= kSpeedupPointTol && std::abs(r.mem_fraction - kMemFraction) < 1e-12;
  return {ok, "speedup +" + fmt(pct, 2) + "%, mem_fraction " + fmt(100 * r.mem_fraction, 3) + "%"};
}

Outcome convergence_ordering() {
  const std::vector<std::pair<std::string, std::string>> runs{
      {"Full", "convergence/full.json"}, {"FS", "convergence/fs.json"},  {"VDN-mixed", "convergence/vdn_mixed.json"},
      {"VDN", "convergence/vdn.json"},   {"BS", "convergence/bs.json"},  {"NS", "convergence/ns.json"}};
  std::map<std::string, double> acc;
  std::vector<std::string> parts;
  for (const auto& [name, rel] : runs) {
    acc[name] = mean_final_acc(run_config(rel, "train"));
    parts.push_back(name + "=" + fmt(acc[name], 3));
  }
  const bool close_fs = acc["Full"] - acc["FS"] <= kAccuracyGap;
  const bool close_mixed = acc["Full"] - acc["VDN-mixed"] <= kAccuracyGap;
  const bool order = acc["FS"] + kOrderTie >= acc["VDN"] && acc["VDN"] + kOrderTie >= acc["BS"] &&
                     acc["BS"] + kOrderTie > acc["NS"];
  bool ns_worst = true;
  for (const auto& [name, a] : acc)
    if (name != "NS") ns_worst = ns_worst && acc["NS"] < a;
  std::string why;
  if (!close_fs) why += " FS gap>2pt";
  if (!close_mixed) why += " VDN-mixed gap>2pt";
  if (!order) why += " ordering FS>=VDN>=BS>NS violated";
  if (!ns_worst) why += " NS not worst";
  return {close_fs && close_mixed && order && ns_worst, join(parts, " ") + why};
}

Outcome estimation_error_ordering() {
  // Each trial is one epoch: a fixed plan and fresh activations per iteration.
  const Shape4 shape{32, 16, 16, 8};
  const SamplingStrategy fs{Strategy::fs, 1.0 / 16}, bs{Strategy::bs, 1.0 / 16};
  const std::size_t iterations = 10;
  std::size_t fs_wins = 0;
  double ratio_fs = 0.0, ratio_bs = 0.0;
  for (std::size_t t = 0; t < kSignTrials; ++t) {
    const auto pf = make_plan(fs, {shape}, 0, 1 + t), pb = make_plan(bs, {shape}, 0, 1 + t);
    ratio_fs = realized_ratio(pf, 0);
    ratio_bs = realized_ratio(pb, 0);
    const auto idx_f = plan_indices(pf, 0), idx_b = plan_indices(pb, 0);
    RngStream rng(1 + t, {0, 0, Purpose::test});
    double ef = 0.0, eb = 0.0;
    for (std::size_t it = 0; it < iterations; ++it) {
      const Tensor4 x = synth_correlated_activations(shape, 1.0, 0.3, 1.0, rng);
      const auto full = channel_moments(x, full_indices(x));
      ef += estimation_errors(channel_moments(x, idx_f), full).first;
      eb += estimation_errors(channel_moments(x, idx_b), full).first;
    }
    fs_wins += ef < eb;
  }
  // One-sided sign test: P(X >= wins) under Binomial(trials, 1/2).
  double p = 0.0;
  for (std::size_t k = fs_wins; k <= kSignTrials; ++k)
    p += std::exp(std::lgamma(kSignTrials + 1.0) - std::lgamma(k + 1.0) - std::lgamma(kSignTrials - k + 1.0) -
                  static_cast<double>(kSignTrials) * std::log(2.0));
  std::ostringstream ps;
  ps.precision(2);
  ps << std::scientific << p;
  const bool equal_ratio = std::abs(ratio_fs - ratio_bs) < 1e-12;
  return {equal_ratio && p < kSignAlpha, "FS lower in " + std::to_string(fs_wins) + "/" + std::to_string(kSignTrials) +
                                             " trials, p = " + ps.str() + ", realized ratios " + fmt(ratio_fs) +
                                             "/" + fmt(ratio_bs)};
}

Outcome correlation_ranking() {
  auto per_seed = [](const fs::path& out) {
    std::map<std::string, std::vector<std::vector<double>>> mats;
    for (const auto& r : read_csv(out / "corr.csv")) {
      auto& m = mats[r.at("seed")];
      const std::size_t i = std::stoul(r.at("row")), j = std::stoul(r.at("col"));
      if (m.size() <= i) m.resize(i + 1);
      if (m[i].size() <= j) m[i].resize(j + 1);
      m[i][j] = std::stod(r.at("r"));
    }
    std::map<std::string, double> out_map;
    for (const auto& [s, m] : mats) out_map[s] = mean_abs_off_diagonal(m);
    return out_map;
  };
  const auto bs = per_seed(run_config("analyze/bs.json", "analyze"));
  const auto ns = per_seed(run_config("analyze/ns.json", "analyze"));
  double mb = 0.0, mn = 0.0;
  std::size_t wins = 0;
  for (const auto& [s, v] : bs) {
    mb += v;
    mn += ns.at(s);
    wins += v < ns.at(s);
  }
  mb /= static_cast<double>(bs.size());
  mn /= static_cast<double>(ns.size());
  return {bs.size() == 5 && mb < mn, "mean |r| BS " + fmt(mb, 3) + " < NS " + fmt(mn, 3) + " (BS lower in " +
                                         std::to_string(wins) + "/" + std::to_string(bs.size()) + " seeds)"};
}

Outcome kernel_speedup() {
  const std::size_t n = 64, h = 128, w = 128, c = 32;
  const std::vector<double> ratios{1.0, 0.25, 1.0 / 16, 1.0 / 32};
  std::vector<std::string> lines;
  bool ok = true;
  for (auto tag : {Strategy::bs, Strategy::fs}) {
    std::vector<BenchCell> grid;
    for (double r : ratios)
      grid.push_back({n, h, w, c, r == 1.0 ? SamplingStrategy::full() : SamplingStrategy{tag, r}});
    const auto rows = bench_sweep(grid, kKernelReps, 3);
    bool mono = true;
    for (std::size_t i = 1; i < rows.size(); ++i) mono = mono && rows[i].speedup >= rows[i - 1].speedup;
    const bool fast = rows.back().speedup >= kKernelSpeedup;
    ok = ok && mono && fast;
    std::vector<std::string> sp;
    for (const auto& r : rows) sp.push_back(fmt(r.speedup, 2));
    lines.push_back(std::string(to_string(tag)) + " speedups [" + join(sp, ", ") + "]" + (mono ? "" : " not monotone"));
  }
  return {ok, "m=2^20 c=32, " + join(lines, "; ") + " (need >= 4 at 1/32)"};
}

Outcome micro_bn() {
  const double local = mean_final_acc(run_config("microbn/local.json", "microbn"));
  const double vdn = mean_final_acc(run_config("microbn/local_vdn.json", "microbn"));
  const auto sync = read_csv(run_config("microbn/sync_full.json", "microbn") / "metrics.csv");
  const auto full = read_csv(run_config("microbn/full_batch.json", "train") / "metrics.csv");
  bool bitwise = !sync.empty() && sync.size() == full.size();
  for (std::size_t i = 0; bitwise && i < sync.size(); ++i)
    for (const char* k : {"epoch", "train_loss", "val_acc", "seed"}) bitwise = bitwise && sync[i].at(k) == full[i].at(k);
  return {vdn >= local && bitwise, "(64, 4) local_vdn " + fmt(vdn, 3) + " vs local " + fmt(local, 3) +
                                      ", sync_full vs single-node BN " +
                                      (bitwise ? "bitwise equal" : "DIFFERENT") + " over " +
                                      std::to_string(sync.size()) + " rows"};
}

Outcome determinism() {
  struct Target {
    std::string rel, command;
    std::vector<std::string> files;
  };
  const std::vector<Target> targets{{"determinism/train.json", "train", {"metrics.csv"}},
                                    {"determinism/analyze.json", "analyze", {"metrics.csv", "errors.csv", "corr.csv"}},
                                    {"determinism/microbn.json", "microbn", {"metrics.csv"}},
                                    {"determinism/decay_sweep.json", "decay-sweep", {"metrics.csv", "decay_sweep.csv"}}};
  std::size_t compared = 0;
  std::vector<std::string> bad;
  for (const auto& t : targets) {
    std::vector<fs::path> outs;
    for (int rep = 0; rep < 2; ++rep) {
      const fs::path out = scratch() / ("det_" + t.command + "_" + std::to_string(rep));
      const std::string cmd = std::string(BNSAMPLE_EXE) + " " + t.command + " --config " +
                              config_path(t.rel).string() + " --out " + out.string() + " --jobs " +
                              (rep == 0 ? "1" : "2") + " > /dev/null 2>&1";
      if (std::system(cmd.c_str()) != 0) bad.push_back(t.command + " run failed");
      outs.push_back(out);
    }
    for (const auto& f : t.files) {
      const std::string a = slurp(outs[0] / f), b = slurp(outs[1] / f);
      ++compared;
      if (a.empty() || a != b) bad.push_back(t.command + "/" + f);
    }
  }
  return {bad.empty(), std::to_string(compared) + " CSV files rerun (sequential vs --jobs 2)" +
                           (bad.empty() ? ", all byte-identical" : ", mismatched: " + join(bad, " "))};
}

}  // namespace

// Optional arguments select criteria by number, e.g. `acceptance 1 5`.
int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient exactness", gradient_exactness},
      {"statistics oracles", statistics_oracles},
      {"sampled-mean variance prediction", mean_variance_prediction},
      {"moving-average variance ratio", moving_average_variance},
      {"adder-tree speedup number", speedup_number},
      {"convergence ordering on blobs", convergence_ordering},
      {"FS vs BS estimation error", estimation_error_ordering},
      {"BS vs NS inter-layer correlation", correlation_ranking},
      {"statistics kernel speedup", kernel_speedup},
      {"micro-BN (64, 4)", micro_bn},
      {"determinism", determinism},
  };
  std::vector<std::size_t> selected;
  for (int a = 1; a < argc; ++a) selected.push_back(std::stoul(argv[a]) - 1);
  if (selected.empty())
    for (std::size_t i = 0; i < criteria.size(); ++i) selected.push_back(i);

  int failed = 0;
  for (std::size_t i : selected) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << (i + 1) << "] " << criteria[i].first << ": " << o.detail
              << " (" << fmt(secs, 1) << " s)" << std::endl;
  }
  std::cout << (selected.size() - failed) << "/" << selected.size() << " criteria passed" << std::endl;
  fs::remove_all(scratch());
  return failed == 0 ? 0 : 1;
}
