#include "scaling_lab/runner.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/report.hpp"
#include "scaling_lab/rng.hpp"
#include "scaling_lab/svg.hpp"

#ifndef SCALING_LAB_VERSION
#define SCALING_LAB_VERSION "0.0.0"
#endif

namespace scaling_lab::runner {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string utc(std::chrono::system_clock::time_point t, const char* format) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[64];
  std::strftime(buf, sizeof(buf), format, &tm);
  return buf;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void validate(const config::ExperimentConfig& c) {
  switch (c.kind) {
    case config::Kind::clt:
      c.clt.validate();
      break;
    case config::Kind::biasvar:
      c.biasvar.validate();
      break;
    case config::Kind::emergence:
      c.emergence.validate();
      break;
    case config::Kind::assumptions:
      c.assumptions.validate();
      break;
  }
}

std::vector<std::string> run_assumptions(const config::AssumptionsPlan& p, const fs::path& dir) {
  auto model = nanoformer::init_model(p.model, p.model_seed);
  if (p.train_tokens > 0) {
    auto hyper = p.hyper;
    hyper.seed = derive_seed(p.seed, {fnv1a64("assumptions-train")});
    hyper.steps = nanoformer::steps_for_epochs(p.epochs, p.train_tokens, hyper);
    model = nanoformer::train(std::move(model), p.source, p.train_tokens, hyper).model;
  }
  const auto batch = nanoformer::materialize_dataset(
      p.source, static_cast<std::int64_t>(p.batch_sequences) * static_cast<std::int64_t>(p.seq_len),
      static_cast<int>(p.seq_len), derive_seed(p.seed, {fnv1a64("assumptions-batch")}));
  const auto rep = nanoformer::check_assumptions(model, batch, derive_seed(p.seed, {fnv1a64("assumptions-pairs")}),
                                                 p.pairs);
  auto files = report::write_assumptions(rep, dir);
  nanoformer::save_checkpoint(model, dir / "model.ckpt");
  files.push_back("model.ckpt");
  return files;
}

}  // namespace

std::string tool_version() { return SCALING_LAB_VERSION; }

int resolve_jobs(std::optional<int> flag) {
  if (flag) {
    if (*flag < 1) throw ConfigError("--jobs: must be at least 1");
    return *flag;
  }
  const char* env = std::getenv("SCALING_LAB_JOBS");
  if (!env || !*env) return 1;
  int v = 0;
  const std::string_view s(env);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || v < 1) {
    throw ConfigError("SCALING_LAB_JOBS: expected a positive integer, got \"" + std::string(s) + "\"");
  }
  return v;
}

std::string format_issues(const std::vector<config::Issue>& issues) {
  std::string out;
  for (const auto& i : issues) out += (i.path.empty() ? std::string("config") : i.path) + ": " + i.message + "\n";
  return out;
}

config::ExperimentConfig load_or_throw(const fs::path& path) {
  auto loaded = config::load_config(path);
  if (!loaded.ok()) throw ConfigError(path.string() + " is invalid:\n" + format_issues(loaded.issues));
  return *loaded.config;
}

fs::path make_run_dir(const fs::path& base, const std::string& kind) {
  std::error_code ec;
  fs::create_directories(base, ec);
  if (ec) throw IoError("cannot create " + base.string() + ": " + ec.message());
  const std::string stem = kind + "-" + utc(std::chrono::system_clock::now(), "%Y%m%d-%H%M%S");
  for (int i = 0; i < 10000; ++i) {
    const fs::path dir = base / (i == 0 ? stem : stem + "-" + std::to_string(i));
    // create_directory reports false when the path already exists.
    if (fs::create_directory(dir, ec)) return dir;
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  }
  throw IoError("no free run directory under " + base.string());
}

ordered_json seed_table(const config::ExperimentConfig& c) {
  ordered_json t = ordered_json::array();
  switch (c.kind) {
    case config::Kind::clt:
      for (auto n : c.clt.contexts) {
        t.push_back({{"n", n}, {"context_seed_r0", derive_seed(c.clt.seed, {fnv1a64("clt-context"), n, 0})}});
      }
      break;
    case config::Kind::biasvar: {
      const auto& p = c.biasvar;
      const std::size_t J = p.data_sizes.size();
      for (std::size_t pi = 0; pi < p.capacities.size(); ++pi) {
        for (int s = 0; s < p.reference_seeds; ++s) {
          t.push_back({{"capacity", pi}, {"D", p.reference_size}, {"seed_index", s},
                       {"seed", biasvar::run_seed(p.seed, pi, J, s)}});
        }
        for (std::size_t di = 0; di < J; ++di) {
          for (int s = 0; s < p.seeds; ++s) {
            t.push_back({{"capacity", pi}, {"D", p.data_sizes[di]}, {"seed_index", s},
                         {"seed", biasvar::run_seed(p.seed, pi, di, s)}});
          }
        }
      }
      break;
    }
    case config::Kind::emergence: {
      const auto& p = c.emergence;
      for (std::size_t pi = 0; pi < p.capacities.size(); ++pi) {
        for (std::size_t di = 0; di < p.data_sizes.size(); ++di) {
          for (int s = 0; s < p.seeds; ++s) {
            t.push_back({{"capacity", pi}, {"D", p.data_sizes[di]}, {"seed_index", s},
                         {"seed", emergence::cell_seed(p.seed, pi, di, s)}});
          }
        }
      }
      break;
    }
    case config::Kind::assumptions:
      t.push_back({{"model_seed", c.assumptions.model_seed}});
      break;
  }
  return t;
}

RunResult run(config::ExperimentConfig cfg, const RunOptions& options) {
  const int jobs = resolve_jobs(options.jobs);
  cfg.apply(options.seed.value_or(cfg.seed), jobs);
  if (options.out) cfg.output_dir = options.out->string();
  if (options.no_plots) cfg.plots = false;
  validate(cfg);

  RunResult result;
  result.run_dir = make_run_dir(cfg.output_dir, config::to_string(cfg.kind));
  const auto resolved = config::to_json(cfg);
  ordered_json& m = result.manifest;
  m["manifest_version"] = 1;
  m["tool_version"] = tool_version();
  m["kind"] = config::to_string(cfg.kind);
  m["seed"] = cfg.seed;
  m["jobs"] = jobs;
  m["config_hash"] = hex(fnv1a64(resolved.dump()));
  m["started"] = utc(std::chrono::system_clock::now(), "%Y-%m-%dT%H:%M:%SZ");
  m["config"] = resolved;
  m["seeds"] = seed_table(cfg);
  const auto write_manifest = [&] { report::write_text(result.run_dir / "manifest.json", m.dump(2) + "\n"); };
  write_manifest();

  try {
    switch (cfg.kind) {
      case config::Kind::clt:
        result.files = report::write_clt(cltlab::run_clt(cfg.clt), result.run_dir);
        break;
      case config::Kind::biasvar:
        result.files = report::write_biasvar(biasvar::run_decomposition(cfg.biasvar), result.run_dir);
        break;
      case config::Kind::emergence:
        result.files = report::write_emergence(emergence::emergence_sweep(cfg.emergence), result.run_dir);
        break;
      case config::Kind::assumptions:
        result.files = run_assumptions(cfg.assumptions, result.run_dir);
        break;
    }
    if (cfg.plots && cfg.kind != config::Kind::assumptions) {
      for (auto& f : svg::render_run(result.run_dir)) result.files.push_back(f);
    }
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    m["status"] = "failed";
    m["error"] = e.what();
    m["finished"] = utc(std::chrono::system_clock::now(), "%Y-%m-%dT%H:%M:%SZ");
    write_manifest();
    if (dynamic_cast<const ExperimentError*>(&e)) throw;
    throw ExperimentError(e.what());
  }
  m["status"] = "ok";
  m["finished"] = utc(std::chrono::system_clock::now(), "%Y-%m-%dT%H:%M:%SZ");
  m["files"] = result.files;
  write_manifest();
  return result;
}

std::vector<std::string> render_plots(const fs::path& run_dir) { return svg::render_run(run_dir); }

}  // namespace scaling_lab::runner
