#include "bns/app.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#ifndef BNS_VERSION
#define BNS_VERSION "0.1.0+unknown"
#endif

namespace bns::app {

using nlohmann::json;

std::string version() { return BNS_VERSION; }

// ---------------------------------------------------------------------------
// Schema

namespace {

std::string type_name(const json& j) { return j.type_name(); }

/// Reads keys of one JSON object, remembering which were consumed so that
/// leftovers can be reported as unknown.
class Reader {
public:
  Reader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_, "expected an object");
  }

  std::string field(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key, T def) {
    seen_.insert(key);
    if (!j_.contains(key)) return def;
    return convert<T>(j_.at(key), field(key));
  }

  const json* sub(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
  }

  template <class T>
  static T convert(const json& v, const std::string& field) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field, "expected a boolean, got " + type_name(v));
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field, "expected a string, got " + type_name(v));
      return v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field, "expected an integer, got " + type_name(v));
      if (v.is_number_unsigned()) return static_cast<T>(v.get<std::uint64_t>());
      const auto i = v.get<std::int64_t>();
      if (std::is_unsigned_v<T> && i < 0) throw ConfigError(field, "must be non-negative");
      return static_cast<T>(i);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field, "expected a number, got " + type_name(v));
      const double d = v.get<double>();
      if (!std::isfinite(d)) throw ConfigError(field, "must be finite");
      return d;
    } else {
      // std::vector<E>
      if (!v.is_array()) throw ConfigError(field, "expected an array, got " + type_name(v));
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], field + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

private:
  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field, what);
}

SamplingStrategy make_strategy(const std::string& name, double ratio, const std::string& sfield,
                               const std::string& rfield) {
  Strategy tag;
  try {
    tag = parse_strategy(name);
  } catch (const std::exception&) {
    throw ConfigError(sfield, "unknown strategy '" + name + "' (expected Full, NS, BS, FS or FRS)");
  }
  require(ratio > 0.0 && ratio <= 1.0, rfield, "must be in (0, 1], got " + std::to_string(ratio));
  require(tag != Strategy::full || ratio == 1.0, rfield, "Full requires ratio 1");
  return {tag, ratio};
}

VdnMode make_vdn_mode(const std::string& s, const std::string& field) {
  try {
    return parse_vdn_mode(s);
  } catch (const std::exception&) {
    throw ConfigError(field, "unknown mode '" + s + "' (expected off, pure or mixed)");
  }
}

std::vector<BenchCell> default_bench_grid() {
  std::vector<BenchCell> g;
  for (double r : {1.0, 0.25, 0.0625, 0.03125})
    g.push_back({64, 128, 128, 32, r == 1.0 ? SamplingStrategy::full() : SamplingStrategy(Strategy::fs, r)});
  return g;
}

}  // namespace

RunConfig parse_config(const json& j, const std::string& command) {
  RunConfig cfg;
  require(std::find(commands().begin(), commands().end(), command) != commands().end(), "command",
          "unknown command '" + command + "'");
  Reader root(j, "");
  cfg.command = command;
  const auto declared = root.get<std::string>("command", command);
  require(declared == command, "command", "config is for '" + declared + "' but '" + command + "' was requested");

  cfg.seeds = root.get<std::vector<std::uint64_t>>("seeds", cfg.seeds);
  require(!cfg.seeds.empty(), "seeds", "must not be empty");
  require(std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() == cfg.seeds.size(), "seeds",
          "must not repeat");

  const auto strategy = root.get<std::string>("strategy", "Full");
  const double ratio = root.get<double>("ratio", 1.0);
  cfg.strategy = make_strategy(strategy, ratio, "strategy", "ratio");

  cfg.vdn.mode = make_vdn_mode(root.get<std::string>("vdn", "off"), "vdn");
  cfg.vdn.n_v = root.get<std::size_t>("n_v", cfg.vdn.n_v);
  cfg.vdn.mix = root.get<double>("mix", cfg.vdn.mix);
  require(cfg.vdn.n_v >= 1, "n_v", "must be >= 1");
  require(cfg.vdn.mix >= 0.0 && cfg.vdn.mix <= 1.0, "mix", "must be in [0, 1]");

  cfg.decay = root.get<double>("decay", cfg.decay);
  require(cfg.decay > 0.0 && cfg.decay <= 1.0, "decay", "must be in (0, 1]");

  if (const json* d = root.sub("dataset")) {
    Reader r(*d, "dataset");
    auto& p = cfg.dataset;
    p.classes = r.get("classes", p.classes);
    p.per_class = r.get("per_class", p.per_class);
    p.val_per_class = r.get("val_per_class", p.val_per_class);
    p.h = r.get("h", p.h);
    p.w = r.get("w", p.w);
    p.noise = r.get("noise", p.noise);
    p.offset_std = r.get("offset_std", p.offset_std);
    p.shift = r.get("shift", p.shift);
    p.amplitude = r.get("amplitude", p.amplitude);
    p.scatter = r.get("scatter", p.scatter);
    p.blobs = r.get("blobs", p.blobs);
    p.blob_scale = r.get("blob_scale", p.blob_scale);
    p.seed = r.get("seed", p.seed);
    r.finish();
  }
  {
    const auto& p = cfg.dataset;
    require(p.classes >= 2, "dataset.classes", "must be >= 2");
    require(p.per_class >= 1, "dataset.per_class", "must be >= 1");
    require(p.val_per_class >= 1, "dataset.val_per_class", "must be >= 1");
    require(p.h >= 3, "dataset.h", "must be >= 3");
    require(p.w >= 3, "dataset.w", "must be >= 3");
    require(p.noise >= 0.0, "dataset.noise", "must be >= 0");
    require(p.offset_std >= 0.0, "dataset.offset_std", "must be >= 0");
    require(2 * p.shift + 3 <= std::min(p.h, p.w), "dataset.shift", "too large for the image size");
    require(p.blobs >= 1 && (p.scatter || p.blobs == 1), "dataset.blobs", "must be 1, or >= 1 with scatter");
    require(p.blob_scale > 0.0, "dataset.blob_scale", "must be > 0");
  }

  if (const json* m = root.sub("model")) {
    Reader r(*m, "model");
    cfg.channels = r.get("channels", cfg.channels);
    r.finish();
  }
  require(!cfg.channels.empty(), "model.channels", "must not be empty");
  for (std::size_t i = 0; i < cfg.channels.size(); ++i)
    require(cfg.channels[i] >= 1, "model.channels[" + std::to_string(i) + "]", "must be >= 1");

  bool batch_given = false;
  if (const json* t = root.sub("train")) {
    Reader r(*t, "train");
    auto& tc = cfg.train;
    batch_given = r.has("batch_size");
    tc.epochs = r.get("epochs", tc.epochs);
    tc.lr = r.get("lr", tc.lr);
    tc.milestones = r.get("milestones", tc.milestones);
    tc.lr_gamma = r.get("lr_gamma", tc.lr_gamma);
    tc.momentum = r.get("momentum", tc.momentum);
    tc.weight_decay = r.get("weight_decay", tc.weight_decay);
    tc.batch_size = r.get("batch_size", tc.batch_size);
    tc.persist_moving_average = r.get("persist_moving_average", tc.persist_moving_average);
    tc.record_epochs = r.get("record_epochs", tc.record_epochs);
    tc.eval_batch = r.get("eval_batch", tc.eval_batch);
    r.finish();
  }

  if (const json* mb = root.sub("microbn")) {
    Reader r(*mb, "microbn");
    auto& m = cfg.microbn;
    m.gradient_batch = r.get("gradient_batch", m.gradient_batch);
    m.statistic_batch = r.get("statistic_batch", m.statistic_batch);
    const auto policy = r.get<std::string>("policy", std::string(to_string(m.policy)));
    try {
      m.policy = parse_micro_policy(policy);
    } catch (const std::exception&) {
      throw ConfigError("microbn.policy", "unknown policy '" + policy +
                                              "' (expected local, sync_full, sync_bs or local_vdn)");
    }
    m.k_nodes = r.get("k_nodes", m.k_nodes);
    m.vdn.mode = make_vdn_mode(r.get<std::string>("vdn", std::string(to_string(m.vdn.mode))), "microbn.vdn");
    m.vdn.n_v = r.get("n_v", m.vdn.n_v);
    m.vdn.mix = r.get("mix", m.vdn.mix);
    r.finish();
  }
  {
    const auto& m = cfg.microbn;
    require(m.statistic_batch >= 1, "microbn.statistic_batch", "must be >= 1");
    require(m.gradient_batch >= 1 && m.gradient_batch % m.statistic_batch == 0, "microbn.gradient_batch",
            "must be a positive multiple of statistic_batch");
    if (m.policy == MicroPolicy::sync_bs)
      require(m.k_nodes >= 1 && m.k_nodes <= m.nodes(), "microbn.k_nodes",
              "must be in [1, " + std::to_string(m.nodes()) + "]");
    if (m.policy == MicroPolicy::local_vdn) {
      require(m.vdn.mode != VdnMode::off, "microbn.vdn", "local_vdn needs pure or mixed");
      require(m.vdn.n_v >= 1, "microbn.n_v", "must be >= 1");
      require(m.vdn.mix >= 0.0 && m.vdn.mix <= 1.0, "microbn.mix", "must be in [0, 1]");
    }
  }
  if (command == "microbn") {
    require(!batch_given || cfg.train.batch_size == cfg.microbn.gradient_batch, "train.batch_size",
            "must equal microbn.gradient_batch");
    cfg.train.batch_size = cfg.microbn.gradient_batch;
  }

  {
    const auto& tc = cfg.train;
    const std::size_t n_train = cfg.dataset.per_class * cfg.dataset.classes;
    require(tc.epochs >= 1, "train.epochs", "must be >= 1");
    require(tc.lr > 0.0, "train.lr", "must be > 0");
    require(tc.lr_gamma > 0.0, "train.lr_gamma", "must be > 0");
    require(tc.momentum >= 0.0 && tc.momentum < 1.0, "train.momentum", "must be in [0, 1)");
    require(tc.weight_decay >= 0.0, "train.weight_decay", "must be >= 0");
    require(tc.batch_size >= 1 && tc.batch_size <= n_train, "train.batch_size",
            "must be in [1, " + std::to_string(n_train) + "]");
    require(tc.eval_batch >= 1, "train.eval_batch", "must be >= 1");
  }
  if (command == "analyze" && cfg.train.record_epochs == 0) cfg.train.record_epochs = 1;

  cfg.bench_grid = default_bench_grid();
  if (const json* b = root.sub("bench")) {
    Reader r(*b, "bench");
    cfg.bench_repetitions = r.get("repetitions", cfg.bench_repetitions);
    if (const json* g = r.sub("grid")) {
      require(g->is_array(), "bench.grid", "expected an array");
      cfg.bench_grid.clear();
      for (std::size_t i = 0; i < g->size(); ++i) {
        const std::string f = "bench.grid[" + std::to_string(i) + "]";
        Reader c((*g)[i], f);
        BenchCell cell;
        cell.n = c.get<std::size_t>("n", 1);
        cell.h = c.get<std::size_t>("h", 1);
        cell.w = c.get<std::size_t>("w", 1);
        cell.c = c.get<std::size_t>("c", 1);
        require(cell.n >= 1 && cell.h >= 1 && cell.w >= 1 && cell.c >= 1, f, "dims must be >= 1");
        cell.strategy = make_strategy(c.get<std::string>("strategy", "Full"), c.get<double>("ratio", 1.0),
                                      f + ".strategy", f + ".ratio");
        c.finish();
        cfg.bench_grid.push_back(cell);
      }
    }
    r.finish();
  }
  require(cfg.bench_repetitions >= 5, "bench.repetitions", "must be >= 5");

  if (const json* s = root.sub("decay_sweep")) {
    Reader r(*s, "decay_sweep");
    cfg.alphas = r.get("alphas", cfg.alphas);
    r.finish();
  }
  require(!cfg.alphas.empty(), "decay_sweep.alphas", "must not be empty");
  for (std::size_t i = 0; i < cfg.alphas.size(); ++i)
    require(cfg.alphas[i] > 0.0 && cfg.alphas[i] <= 1.0, "decay_sweep.alphas[" + std::to_string(i) + "]",
            "must be in (0, 1]");

  cfg.output_dir = root.get<std::string>("output_dir", cfg.output_dir.string());
  if (root.has("vdn_stats")) {
    cfg.vdn_stats = root.get<std::string>("vdn_stats", "");
    require(std::filesystem::is_regular_file(*cfg.vdn_stats), "vdn_stats",
            "file '" + cfg.vdn_stats->string() + "' does not exist");
  }
  root.finish();

  cfg.train.strategy = cfg.strategy;
  cfg.train.vdn = cfg.vdn;
  cfg.train.decay = cfg.decay;
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path, const std::string& command) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot read '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("--config", std::string("not valid JSON: ") + e.what());
  }
  RunConfig cfg = parse_config(j, command);
  // Relative paths inside the file resolve against the file's directory.
  if (cfg.vdn_stats && cfg.vdn_stats->is_relative()) {
    const auto rel = path.parent_path() / *cfg.vdn_stats;
    if (std::filesystem::is_regular_file(rel)) cfg.vdn_stats = rel;
  }
  return cfg;
}

void apply_overrides(RunConfig& cfg, std::optional<std::uint64_t> seed, std::optional<std::filesystem::path> out) {
  if (!seed) {
    if (const char* env = std::getenv("BNSAMPLE_SEED"); env != nullptr && *env != '\0') {
      char* end = nullptr;
      const unsigned long long v = std::strtoull(env, &end, 10);
      if (end == nullptr || *end != '\0') throw ConfigError("BNSAMPLE_SEED", "expected an unsigned integer");
      seed = v;
    }
  }
  if (seed) cfg.seeds = {*seed};
  if (out) cfg.output_dir = *out;
}

json RunConfig::resolved() const {
  json j;
  j["command"] = command;
  j["seeds"] = seeds;
  j["strategy"] = std::string(to_string(strategy.tag()));
  j["ratio"] = strategy.ratio();
  j["vdn"] = std::string(to_string(vdn.mode));
  j["n_v"] = vdn.n_v;
  j["mix"] = vdn.mix;
  j["decay"] = decay;
  j["train"] = {{"epochs", train.epochs},
                {"lr", train.lr},
                {"milestones", train.milestones},
                {"lr_gamma", train.lr_gamma},
                {"momentum", train.momentum},
                {"weight_decay", train.weight_decay},
                {"batch_size", train.batch_size},
                {"persist_moving_average", train.persist_moving_average},
                {"record_epochs", train.record_epochs},
                {"eval_batch", train.eval_batch}};
  j["dataset"] = {{"classes", dataset.classes},       {"per_class", dataset.per_class},
                  {"val_per_class", dataset.val_per_class}, {"h", dataset.h},
                  {"w", dataset.w},                   {"noise", dataset.noise},
                  {"offset_std", dataset.offset_std}, {"shift", dataset.shift},
                  {"amplitude", dataset.amplitude},   {"scatter", dataset.scatter},
                  {"blobs", dataset.blobs},           {"blob_scale", dataset.blob_scale},
                  {"seed", dataset.seed}};
  j["model"] = {{"channels", channels}};
  j["microbn"] = {{"gradient_batch", microbn.gradient_batch},
                  {"statistic_batch", microbn.statistic_batch},
                  {"policy", std::string(to_string(microbn.policy))},
                  {"k_nodes", microbn.k_nodes},
                  {"vdn", std::string(to_string(microbn.vdn.mode))},
                  {"n_v", microbn.vdn.n_v},
                  {"mix", microbn.vdn.mix}};
  auto grid = json::array();
  for (const auto& c : bench_grid)
    grid.push_back({{"n", c.n},
                    {"h", c.h},
                    {"w", c.w},
                    {"c", c.c},
                    {"strategy", std::string(to_string(c.strategy.tag()))},
                    {"ratio", c.strategy.ratio()}});
  j["bench"] = {{"repetitions", bench_repetitions}, {"grid", grid}};
  j["decay_sweep"] = {{"alphas", alphas}};
  j["output_dir"] = output_dir.string();
  if (vdn_stats) j["vdn_stats"] = vdn_stats->string();
  return j;
}

std::string manifest_hash(const json& resolved, const std::string& ver) {
  // The output directory does not change results; leave it out so reruns
  // into another directory carry the same hash.
  json j = resolved;
  j.erase("output_dir");
  const std::string text = j.dump() + "|" + ver;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Runs

namespace {

struct Context {
  const RunConfig& cfg;
  SyntheticDataset data;
  ModelSpec spec;
  std::optional<VirtualSampler> sampler;
};

struct SeedOutput {
  std::uint64_t seed = 0;
  std::string metrics;
  std::string errors;
  std::string corr;
  std::string decay;
  json runs = json::array();
  bool diverged = false;

  json to_json() const {
    return {{"seed", seed},   {"metrics", metrics}, {"errors", errors}, {"corr", corr},
            {"decay", decay}, {"runs", runs},       {"diverged", diverged}};
  }
  static SeedOutput from_json(const json& j) {
    SeedOutput s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.metrics = j.at("metrics").get<std::string>();
    s.errors = j.at("errors").get<std::string>();
    s.corr = j.at("corr").get<std::string>();
    s.decay = j.at("decay").get<std::string>();
    s.runs = j.at("runs");
    s.diverged = j.at("diverged").get<bool>();
    return s;
  }
};

json run_record(const TrainReport& rep, std::uint64_t seed, const std::string& label) {
  json r;
  r["label"] = label;
  r["seed"] = seed;
  r["diverged"] = rep.diverged;
  r["final_val_acc"] = rep.final_val_acc();
  auto ratios = json::array();
  if (!rep.manifests.empty() && rep.manifests.front().contains("layers"))
    for (const auto& l : rep.manifests.front().at("layers")) ratios.push_back(l.at("realized_ratio"));
  r["realized_ratios"] = ratios;
  r["plans"] = rep.manifests;
  return r;
}

TrainReport train_standard(const Context& ctx, const TrainConfig& tc, Model& model) {
  if (ctx.sampler) {
    StandardPolicy policy(model, tc, *ctx.sampler);
    return train(model, ctx.data, tc, policy);
  }
  return train(model, ctx.data, tc);
}

SeedOutput run_seed(const Context& ctx, std::uint64_t seed) {
  const RunConfig& cfg = ctx.cfg;
  SeedOutput out;
  out.seed = seed;
  TrainConfig tc = cfg.train;
  tc.seed = seed;

  std::ostringstream metrics;
  if (cfg.command == "train" || cfg.command == "analyze") {
    Model model = Model::build(ctx.spec, seed);
    const TrainReport rep = train_standard(ctx, tc, model);
    write_metrics_csv(rep, tc, metrics, false);
    out.runs.push_back(run_record(rep, seed, rep.label));
    out.diverged = rep.diverged;
    if (cfg.command == "analyze" && !rep.diverged) {
      const ErrorTrace& tr = rep.errors;
      std::ostringstream e, c;
      e.precision(17);
      c.precision(17);
      for (std::size_t l = 0; l < tr.layers(); ++l)
        for (std::size_t i = 0; i < tr.iterations(); ++i)
          e << seed << ',' << l << ',' << i << ',' << tr.e_mu[l][i] << ',' << tr.e_sigma[l][i] << '\n';
      if (tr.layers() >= 2 && tr.iterations() >= 3) {
        const auto r = pearson_matrix(tr);
        for (std::size_t a = 0; a < r.size(); ++a)
          for (std::size_t b = 0; b < r.size(); ++b) {
            c << seed << ',' << a << ',' << b << ',';
            if (std::isfinite(r[a][b]))
              c << r[a][b];
            else
              c << "nan";
            c << '\n';
          }
        out.runs.back()["mean_abs_offdiag_r"] = mean_abs_off_diagonal(r);
      }
      out.errors = e.str();
      out.corr = c.str();
    }
  } else if (cfg.command == "microbn") {
    Model model = Model::build(ctx.spec, seed);
    const TrainReport rep = run_microbn(model, ctx.data, cfg.microbn, tc);
    write_metrics_csv(rep, tc, metrics, false);
    out.runs.push_back(run_record(rep, seed, rep.label));
    out.diverged = rep.diverged;
  } else if (cfg.command == "decay-sweep") {
    std::ostringstream d;
    d.precision(17);
    for (double alpha : cfg.alphas) {
      TrainConfig ta = tc;
      ta.decay = alpha;
      Model model = Model::build(ctx.spec, seed);
      TrainReport rep = train_standard(ctx, ta, model);
      std::ostringstream a;
      a << rep.label << "-a" << alpha;
      rep.label = a.str();
      write_metrics_csv(rep, ta, metrics, false);
      d << alpha << ',' << seed << ',' << rep.final_val_acc() << ',' << (rep.diverged ? 1 : 0) << '\n';
      auto rec = run_record(rep, seed, rep.label);
      rec["decay"] = alpha;
      out.runs.push_back(std::move(rec));
      out.diverged = out.diverged || rep.diverged;
    }
    out.decay = d.str();
  }
  out.metrics = metrics.str();
  return out;
}

std::vector<SeedOutput> run_seeds(const Context& ctx, std::size_t jobs, const std::filesystem::path& parts,
                                  std::ostream& log) {
  const auto& seeds = ctx.cfg.seeds;
  std::vector<SeedOutput> outs;
  if (jobs <= 1 || seeds.size() <= 1) {
    for (auto s : seeds) {
      log << "  seed " << s << " ...\n" << std::flush;
      outs.push_back(run_seed(ctx, s));
    }
    return outs;
  }

  // One worker process per seed, at most `jobs` alive; each writes its own
  // part file and the parent merges them in seed order.
  std::filesystem::create_directories(parts);
  auto part_path = [&](std::uint64_t s) { return parts / ("seed_" + std::to_string(s) + ".json"); };
  std::size_t next = 0, running = 0;
  bool failed = false;
  std::cout.flush();
  std::cerr.flush();
  log.flush();
  while (next < seeds.size() || running > 0) {
    if (next < seeds.size() && running < jobs) {
      const std::uint64_t s = seeds[next++];
      const pid_t pid = fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) {
        int code = 0;
        try {
          const SeedOutput o = run_seed(ctx, s);
          std::ofstream f(part_path(s));
          f << o.to_json().dump();
          f.close();
          if (!f) code = 1;
        } catch (const std::exception& e) {
          std::cerr << "seed " << s << ": " << e.what() << '\n';
          code = 1;
        }
        std::cerr.flush();
        _exit(code);
      }
      log << "  seed " << s << " started (pid " << pid << ")\n" << std::flush;
      ++running;
      continue;
    }
    int status = 0;
    if (wait(&status) > 0) {
      --running;
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed = true;
    }
  }
  if (failed) throw std::runtime_error("a worker process failed");
  for (auto s : seeds) {
    std::ifstream f(part_path(s));
    outs.push_back(SeedOutput::from_json(json::parse(f)));
  }
  std::filesystem::remove_all(parts);
  return outs;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

void summarize_runs(const std::vector<SeedOutput>& outs, std::ostream& log) {
  std::map<std::string, std::vector<double>> acc;
  std::vector<std::string> order;
  for (const auto& o : outs)
    for (const auto& r : o.runs) {
      const auto label = r.at("label").get<std::string>();
      if (!acc.count(label)) order.push_back(label);
      acc[label].push_back(r.at("final_val_acc").get<double>());
    }
  for (const auto& l : order) {
    const auto& v = acc[l];
    double mean = 0.0;
    for (double a : v) mean += a;
    mean /= static_cast<double>(v.size());
    log << "  " << l << ": mean final val acc " << mean << " over " << v.size() << " seed(s)\n";
  }
}

}  // namespace

int run(const Options& opts, std::ostream& log) {
  RunConfig cfg;
  try {
    cfg = load_config(opts.config, opts.command);
    apply_overrides(cfg, opts.seed, opts.out);
    if (opts.jobs == 0) throw ConfigError("--jobs", "must be >= 1");
    std::error_code ec;
    std::filesystem::create_directories(cfg.output_dir, ec);
    const auto probe = cfg.output_dir / ".write_test";
    std::ofstream(probe) << "";
    if (ec || !std::filesystem::exists(probe))
      throw ConfigError("output_dir", "'" + cfg.output_dir.string() + "' is not writable");
    std::filesystem::remove(probe);
  } catch (const ConfigError& e) {
    log << "error: " << e.what() << '\n';
    return invalid_config;
  }

  const json resolved = cfg.resolved();
  const std::string ver = version();
  const std::string hash = manifest_hash(resolved, ver);
  const std::string tag = "# manifest=" + hash + "\n";
  const auto& dir = cfg.output_dir;

  json manifest;
  manifest["manifest_hash"] = hash;
  manifest["version"] = ver;
  manifest["command"] = cfg.command;
  manifest["seeds"] = cfg.seeds;
  manifest["config"] = resolved;

  log << cfg.command << " -> " << dir.string() << " (manifest " << hash << ")\n";

  if (cfg.command == "bench") {
    const auto rows = bench_sweep(cfg.bench_grid, cfg.bench_repetitions, cfg.seeds.front());
    std::ostringstream csv;
    csv << tag;
    write_bench_csv(rows, csv);
    write_file(dir / "bench.csv", csv.str());
    auto cells = json::array();
    for (const auto& r : rows) {
      cells.push_back({{"strategy", std::string(to_string(r.strategy))},
                       {"nominal_ratio", r.nominal_ratio},
                       {"realized_ratio", r.realized_ratio},
                       {"speedup", r.speedup}});
      log << "  " << to_string(r.strategy) << " ratio " << r.realized_ratio << " m=" << r.m << " c=" << r.c
          << ": speedup " << r.speedup << " (full " << r.t_full_us << " us, sampled " << r.t_sampled_us
          << " us)\n";
    }
    manifest["bench"] = cells;
    write_file(dir / "manifest.json", manifest.dump(2) + "\n");
    return ok;
  }

  Context ctx{cfg, make_blob_dataset(cfg.dataset), {}, {}};
  const bool microbn = cfg.command == "microbn";
  ctx.spec = conv_bn_model(cfg.dataset.h, cfg.dataset.w, 1, cfg.channels, cfg.dataset.classes);
  ctx.spec.bn_decay = cfg.decay;
  if (!microbn && cfg.vdn.mode != VdnMode::off) {
    if (cfg.vdn_stats) {
      ctx.sampler = load_virtual_sampler(*cfg.vdn_stats);
      ctx.sampler->n_v = cfg.vdn.n_v;
    } else {
      const Tensor4 all[] = {ctx.data.train_images};
      ctx.sampler = fit_dataset_stats(all, cfg.vdn.n_v);
      save_virtual_sampler(*ctx.sampler, dir / "vdn_stats.json");
    }
  }

  const auto outs = run_seeds(ctx, opts.jobs, dir / ".parts", log);

  std::string metrics = tag + "epoch,train_loss,val_acc,strategy,ratio,seed\n";
  bool diverged_any = false;
  auto runs = json::array();
  for (const auto& o : outs) {
    metrics += o.metrics;
    diverged_any = diverged_any || o.diverged;
    for (const auto& r : o.runs) runs.push_back(r);
  }
  write_file(dir / "metrics.csv", metrics);
  if (cfg.command == "analyze") {
    std::string errors = tag + "seed,layer,iter,e_mu,e_sigma\n", corr = tag + "seed,row,col,r\n";
    for (const auto& o : outs) {
      errors += o.errors;
      corr += o.corr;
    }
    write_file(dir / "errors.csv", errors);
    write_file(dir / "corr.csv", corr);
  }
  if (cfg.command == "decay-sweep") {
    std::string decay = tag + "alpha,seed,final_val_acc,diverged\n";
    for (const auto& o : outs) decay += o.decay;
    write_file(dir / "decay_sweep.csv", decay);

    std::map<double, std::pair<double, std::size_t>> by_alpha;
    for (const auto& o : outs)
      for (const auto& r : o.runs) {
        auto& e = by_alpha[r.at("decay").get<double>()];
        e.first += r.at("final_val_acc").get<double>();
        ++e.second;
      }
    double best = cfg.alphas.front(), best_acc = -1.0;
    for (double a : cfg.alphas) {
      const auto& e = by_alpha[a];
      const double mean = e.first / static_cast<double>(e.second);
      log << "  decay " << a << ": mean final val acc " << mean << '\n';
      if (mean > best_acc) {
        best_acc = mean;
        best = a;
      }
    }
    const auto [lo, hi] = std::minmax_element(cfg.alphas.begin(), cfg.alphas.end());
    const bool interior = best != *lo && best != *hi;
    log << "  best decay " << best << (interior ? " (interior)" : " (at the edge of the sweep)") << '\n';
    manifest["best_decay"] = best;
    manifest["best_decay_interior"] = interior;
  }
  manifest["runs"] = runs;
  manifest["diverged"] = diverged_any;
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");

  summarize_runs(outs, log);
  if (diverged_any) {
    log << "error: training diverged (non-finite loss or parameters)\n";
    return diverged;
  }
  return ok;
}

}  // namespace bns::app
