// Command-line driver: forward solves, single-box inference, step-wise
// inversion, and chain diagnostics.  Every run writes its artifacts plus a
// manifest.json listing each file with an FNV-1a checksum.
//
// Exit codes: 0 success, 2 configuration/input error, 3 convergence-gate
// failure (artifacts retained), 4 forward-solver failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ductile/config.hpp"
#include "ductile/diagnostics.hpp"
#include "ductile/fem.hpp"
#include "ductile/inference.hpp"
#include "ductile/io.hpp"
#include "ductile/pipeline.hpp"

namespace fs = std::filesystem;
using ductile::config::ConfigError;
using json = nlohmann::json;

namespace {

struct GateFailure {
  int stage = 0;  // 0: single-box run
};

struct Artifacts {
  fs::path dir;
  std::vector<fs::path> files;

  explicit Artifacts(const fs::path& d) : dir(d) { fs::create_directories(d); }

  fs::path path(const std::string& name) {
    files.push_back(dir / name);
    return files.back();
  }
};

std::string iso_utc(std::time_t t) {
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(Artifacts& a, const std::string& command,
                    const std::string& config_path, std::uint64_t seed,
                    std::time_t started) {
  json m;
  m["command"] = command;
  m["config"] = config_path;
  m["root_seed"] = seed;
  m["output_dir"] = a.dir.string();
  m["started_utc"] = iso_utc(started);
  m["finished_utc"] = iso_utc(std::time(nullptr));
  json files = json::array();
  for (const auto& f : a.files) {
    files.push_back({{"file", f.filename().string()},
                     {"fnv1a64", ductile::io::hex64(
                                     ductile::io::file_checksum(f.string()))}});
  }
  m["artifacts"] = files;
  std::ofstream out(a.dir / "manifest.json", std::ios::binary);
  out << m.dump(2) << "\n";
}

/// Rows whose first column is a name rather than a number.
void write_named_csv(const fs::path& path, const std::vector<std::string>& header,
                     const std::vector<std::pair<std::string, std::vector<double>>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (size_t i = 0; i < header.size(); ++i)
    out << (i ? "," : "") << header[i];
  out << "\n";
  for (const auto& [name, vals] : rows) {
    out << name;
    for (double v : vals) out << "," << ductile::io::format_double(v);
    out << "\n";
  }
}

ductile::io::Table chain_table(const ductile::inference::Chain& ch,
                               const std::vector<std::string>& names) {
  ductile::io::Table t;
  t.header = {"index"};
  t.header.insert(t.header.end(), names.begin(), names.end());
  t.header.insert(t.header.end(), {"log_post", "accepted", "stage"});
  const int n = ch.length();
  const int k = static_cast<int>(names.size());
  t.rows.resize(n);
  for (int j = 0; j < n; ++j) {
    auto& r = t.rows[j];
    r.reserve(k + 4);
    r.push_back(j);
    for (int i = 0; i < k; ++i) r.push_back(ch.samples(j, i));
    r.push_back(ch.log_post[j]);
    r.push_back(ch.accepted[j]);
    r.push_back(ch.stage[j]);
  }
  return t;
}

void write_histogram(const fs::path& path, const Eigen::VectorXd& samples,
                     double lo, double hi, int bins = 20) {
  std::vector<int> count(bins, 0);
  const double w = (hi - lo) / bins;
  for (int j = 0; j < samples.size(); ++j) {
    int b = static_cast<int>((samples[j] - lo) / w);
    b = std::max(0, std::min(bins - 1, b));
    ++count[b];
  }
  ductile::io::Table t;
  t.header = {"bin_left", "bin_right", "count"};
  for (int b = 0; b < bins; ++b)
    t.rows.push_back({lo + b * w, lo + (b + 1) * w, double(count[b])});
  ductile::io::write_csv(path.string(), t);
}

void write_curve(const fs::path& path, const Eigen::VectorXd& u,
                 const Eigen::VectorXd& f) {
  ductile::io::Table t;
  t.header = {"step", "displacement_mm", "force_N"};
  for (int i = 0; i < f.size(); ++i)
    t.rows.push_back({double(i + 1), u[i], f[i]});
  ductile::io::write_csv(path.string(), t);
}

void write_chain_set(Artifacts& a, const std::string& prefix,
                     const ductile::pipeline::SamplerRun& run,
                     const std::vector<std::string>& names) {
  for (size_t c = 0; c < run.chains.size(); ++c)
    ductile::io::write_csv(
        a.path(prefix + "chain_" + std::to_string(c) + ".csv").string(),
        chain_table(run.chains[c], names));
}

fs::path resolve_out(const std::string& flag, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("DUCTILE_OUT")) return env;
  return fallback;
}

// ----------------------------------------------------------------------------
// forward
// ----------------------------------------------------------------------------

int cmd_forward(const std::string& config_path, const std::string& model_flag,
                const std::string& out_flag, bool fields) {
  using namespace ductile;
  const std::time_t started = std::time(nullptr);
  auto cfg = pipeline::ExperimentConfig::from_file(config_path);
  if (!model_flag.empty()) cfg.model = pipeline::parse_model(model_flag);

  const fem::Mesh mesh = fem::build_mesh(cfg.geom);
  const fem::LoadProgram load = cfg.load_program(cfg.obs.steps);
  fem::ForwardSolver solver(mesh, cfg.model, cfg.material, load, cfg.solve);
  const fem::LoadDisplacementCurve curve = solver.run();

  Artifacts a(resolve_out(out_flag, "out_forward"));
  const auto resp = pipeline::to_response(curve);
  Eigen::VectorXd disp(resp.values.size());
  for (size_t i = 0; i < curve.points.size(); ++i)
    disp[i] = curve.points[i].displacement;
  write_curve(a.path("curve.csv"), disp, resp.values);

  if (fields) {
    const Eigen::VectorXd alpha = solver.nodal_alpha();
    io::Table t;
    t.header = {"node_id", "x", "y", "ux", "uy", "d", "alpha"};
    const int nn = static_cast<int>(mesh.nodes.size());
    for (int n = 0; n < nn; ++n)
      t.rows.push_back({double(n), mesh.nodes[n][0], mesh.nodes[n][1],
                        solver.u()[2 * n], solver.u()[2 * n + 1],
                        solver.d_field()[n], alpha[n]});
    io::write_csv(a.path("fields.csv").string(), t);
  }

  write_manifest(a, "forward", config_path, cfg.mcmc.seed, started);
  std::printf("forward: %zu steps, final force %s N -> %s\n",
              curve.points.size(),
              io::format_double(resp.values[resp.values.size() - 1]).c_str(),
              a.dir.string().c_str());
  return 0;
}

// ----------------------------------------------------------------------------
// infer
// ----------------------------------------------------------------------------

int cmd_infer(const ductile::pipeline::ExperimentConfig& cfg,
              const std::string& config_path, const std::string& out_flag,
              bool stub) {
  using namespace ductile;
  const std::time_t started = std::time(nullptr);

  inference::PriorBox box;
  pipeline::SamplerRun run;
  Artifacts a(resolve_out(out_flag, "out_infer"));

  if (stub) {
    // Analytic stand-in for the FEM forward: each active parameter is
    // observed directly (4 copies), so the posterior is a product of
    // Gaussians centered on the config's material values.
    if (cfg.listed_priors.empty())
      throw ConfigError("stub inference needs at least one [priors] entry");
    std::vector<std::string> active;
    for (const auto& name : pipeline::param_names())
      if (std::find(cfg.listed_priors.begin(), cfg.listed_priors.end(), name) !=
          cfg.listed_priors.end())
        active.push_back(name);
    box = pipeline::make_box(cfg, active);
    const int k = box.dim();
    const int reps = 4;
    inference::Observation obs;
    obs.m.resize(k * reps);
    for (int i = 0; i < k; ++i) {
      const double truth = pipeline::get_param(cfg.material, active[i]);
      for (int r = 0; r < reps; ++r) obs.m[i * reps + r] = truth;
    }
    obs.sigma2 = cfg.obs.sigma2;
    const auto fwd = [k, reps](const Eigen::VectorXd& x) {
      inference::ForwardResponse r;
      r.values.resize(k * reps);
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < reps; ++j) r.values[i * reps + j] = x[i];
      return r;
    };
    run = pipeline::run_chains(cfg, 0, cfg.mcmc.sampler, cfg.mcmc.chains,
                               cfg.mcmc.samples, box, fwd, obs, box.init);
  } else {
    auto res = pipeline::infer_single(cfg);
    box = std::move(res.box);
    run = std::move(res.run);
    write_curve(a.path("observation.csv"), res.observation.displacement,
                res.observation.obs.m);
  }

  write_chain_set(a, "", run, box.names);
  const int drop =
      static_cast<int>(std::floor(cfg.mcmc.burn_in * cfg.mcmc.samples));
  std::vector<std::pair<std::string, std::vector<double>>> rows;
  for (int i = 0; i < box.dim(); ++i) {
    Eigen::VectorXd pooled(
        run.chains.size() * (run.chains[0].length() - drop));
    int at = 0;
    for (const auto& ch : run.chains) {
      const int kept = ch.length() - drop;
      pooled.segment(at, kept) = ch.samples.col(i).tail(kept);
      at += kept;
    }
    const double mean = pooled.mean();
    const double sd = pooled.size() > 1
                          ? std::sqrt((pooled.array() - mean).square().sum() /
                                      (pooled.size() - 1))
                          : 0.0;
    rows.push_back({box.names[i], {mean, sd, run.worst_rhat}});
    write_histogram(a.path("hist_" + box.names[i] + ".csv"), pooled, box.lo[i],
                    box.hi[i]);
  }
  write_named_csv(a.path("summary.csv"), {"param", "mean", "sd", "rhat_std"},
                  rows);
  write_manifest(a, "infer", config_path, cfg.mcmc.seed, started);

  std::printf("infer: %d chains x %d samples (%s)", cfg.mcmc.chains,
              cfg.mcmc.samples, cfg.mcmc.sampler.c_str());
  for (int i = 0; i < box.dim(); ++i)
    std::printf("  %s = %s", box.names[i].c_str(),
                io::format_double(run.mean[i]).c_str());
  std::printf("  rhat %.4g -> %s\n", run.worst_rhat, a.dir.string().c_str());
  if (!run.gate_passed) throw GateFailure{};
  return 0;
}

// ----------------------------------------------------------------------------
// stepwise
// ----------------------------------------------------------------------------

int cmd_stepwise(const ductile::pipeline::ExperimentConfig& cfg,
                 const std::string& config_path, const std::string& out_flag) {
  using namespace ductile;
  const std::time_t started = std::time(nullptr);
  const auto res = pipeline::stepwise_bi(cfg);

  Artifacts a(resolve_out(out_flag, "out_stepwise"));
  write_curve(a.path("observation.csv"), res.observation.displacement,
              res.observation.obs.m);

  std::vector<std::pair<std::string, std::vector<double>>> report;
  for (const auto& sr : res.stages) {
    write_chain_set(a, "stage" + std::to_string(sr.spec.id) + "_", sr.run,
                    sr.spec.active);
    report.push_back({sr.spec.sampler,
                      {double(sr.spec.id), double(sr.spec.window),
                       double(sr.spec.samples), double(sr.spec.chains),
                       sr.run.worst_rhat, sr.run.gate_passed ? 1.0 : 0.0}});
  }
  write_named_csv(
      a.path("stage_report.csv"),
      {"sampler", "stage", "window", "samples", "chains", "rhat_std", "gate"},
      report);

  if (res.success) {
    std::vector<std::pair<std::string, std::vector<double>>> rows;
    for (const auto& [name, value] : res.estimate) rows.push_back({name, {value}});
    write_named_csv(a.path("estimate.csv"), {"param", "value"}, rows);
  }
  write_manifest(a, "stepwise", config_path, cfg.mcmc.seed, started);

  for (const auto& sr : res.stages) {
    std::printf("stage %d [%s] window %d rhat %-10.4g", sr.spec.id,
                sr.spec.sampler.c_str(), sr.spec.window, sr.run.worst_rhat);
    for (int i = 0; i < sr.run.mean.size(); ++i)
      std::printf("  %s = %s", sr.spec.active[i].c_str(),
                  io::format_double(sr.run.mean[i]).c_str());
    std::printf("\n");
  }
  if (!res.success) {
    std::fprintf(stderr, "stepwise: R-hat gate failed at stage %d\n",
                 res.failed_stage);
    throw GateFailure{res.failed_stage};
  }
  std::printf("stepwise: estimates written to %s\n", a.dir.string().c_str());
  return 0;
}

// ----------------------------------------------------------------------------
// diagnose
// ----------------------------------------------------------------------------

int cmd_diagnose(const std::vector<std::string>& chain_files, double burnin,
                 const std::string& out_flag, int max_lag) {
  using namespace ductile;
  const std::time_t started = std::time(nullptr);
  if (chain_files.size() < 2)
    throw ConfigError("diagnose: R-hat needs at least 2 chain files");
  if (burnin < 0.0 || burnin >= 1.0)
    throw ConfigError("diagnose: burn-in fraction must lie in [0, 1)");

  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> tails;
  for (const auto& file : chain_files) {
    io::Table t;
    try {
      t = io::read_csv(file);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    if (t.header.size() < 5 || t.header.front() != "index" ||
        t.header[t.header.size() - 3] != "log_post")
      throw ConfigError(file + ": not a chain file (index,...,log_post,accepted,stage)");
    const std::vector<std::string> cur(t.header.begin() + 1, t.header.end() - 3);
    if (names.empty())
      names = cur;
    else if (names != cur)
      throw ConfigError(file + ": parameter columns differ from the first file");
    const int n = static_cast<int>(t.rows.size());
    const int drop = static_cast<int>(std::floor(burnin * n));
    if (n - drop < 2) throw ConfigError(file + ": too few samples after burn-in");
    Eigen::MatrixXd m(n - drop, names.size());
    for (int j = drop; j < n; ++j)
      for (size_t i = 0; i < names.size(); ++i) m(j - drop, i) = t.rows[j][i + 1];
    tails.push_back(std::move(m));
  }
  const int common = static_cast<int>(tails[0].rows());
  for (auto& t : tails)
    if (t.rows() != common)
      throw ConfigError("diagnose: chains must share a common length");

  const auto report = diagnostics::rhat(tails);
  Artifacts a(resolve_out(out_flag, "out_diagnose"));
  std::vector<std::pair<std::string, std::vector<double>>> rows;
  for (size_t i = 0; i < names.size(); ++i) {
    const auto& e = report.params[i];
    rows.push_back({names[i], {e.b_over_n, e.w, e.rhat_paper, e.rhat_std}});
    std::printf("%-12s B/n %-12.6g W %-12.6g rhat %-8.5g\n", names[i].c_str(),
                e.b_over_n, e.w, e.rhat_std);
  }
  write_named_csv(a.path("rhat.csv"),
                  {"param", "b_over_n", "w", "rhat_paper", "rhat_std"}, rows);

  io::Table acf_t;
  acf_t.header = {"lag"};
  acf_t.header.insert(acf_t.header.end(), names.begin(), names.end());
  const int lags = std::min(max_lag, common - 1);
  acf_t.rows.assign(lags + 1, std::vector<double>());
  for (int l = 0; l <= lags; ++l) acf_t.rows[l].push_back(l);
  for (size_t i = 0; i < names.size(); ++i) {
    const Eigen::VectorXd col = tails[0].col(i);
    for (int l = 0; l <= lags; ++l)
      acf_t.rows[l].push_back(diagnostics::acf(col, l));
  }
  io::write_csv(a.path("acf.csv").string(), acf_t);
  write_manifest(a, "diagnose", chain_files[0], 0, started);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ductile: phase-field fracture forward solves and Bayesian "
               "parameter identification"};
  app.require_subcommand(1);

  std::string config_path, out_flag, model_flag, sampler_flag;
  int chains_flag = -1, samples_flag = -1, threads_flag = -1, max_lag = 50;
  std::int64_t seed_flag = -1;
  double burnin_flag = -1.0;
  bool fields = false, stub = false;
  std::vector<std::string> chain_files;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--out", out_flag, "output directory (env DUCTILE_OUT)");
    c->add_option("--threads", threads_flag, "worker-thread cap");
  };

  auto* fwd = app.add_subcommand("forward", "run the forward model");
  fwd->add_option("config", config_path)->required();
  fwd->add_option("--model", model_flag, "override the damage model (m1|m2|m3)");
  fwd->add_flag("--fields", fields, "write nodal u, d, alpha snapshots");
  add_common(fwd);

  auto* inf = app.add_subcommand("infer", "single-box MCMC inference");
  inf->add_option("config", config_path)->required();
  inf->add_option("--sampler", sampler_flag, "mh|dram|enkf");
  inf->add_option("--chains", chains_flag, "number of parallel chains");
  inf->add_option("--samples", samples_flag, "samples per chain");
  inf->add_option("--seed", seed_flag, "root seed");
  inf->add_option("--burnin", burnin_flag, "burn-in fraction");
  inf->add_flag("--stub", stub, "replace the FEM forward with a direct-observation stub");
  add_common(inf);

  auto* stp = app.add_subcommand("stepwise", "step-wise Bayesian inversion");
  stp->add_option("config", config_path)->required();
  stp->add_option("--seed", seed_flag, "root seed");
  add_common(stp);

  auto* dia = app.add_subcommand("diagnose", "R-hat/ACF report from chain CSVs");
  dia->add_option("chains", chain_files, "chain CSV files")->required();
  dia->add_option("--burnin", burnin_flag, "burn-in fraction (default 0.2)");
  dia->add_option("--max-lag", max_lag, "ACF lag cutoff");
  dia->add_option("--out", out_flag, "output directory (env DUCTILE_OUT)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand(fwd)) return cmd_forward(config_path, model_flag, out_flag, fields);
    if (app.got_subcommand(dia))
      return cmd_diagnose(chain_files, burnin_flag < 0 ? 0.2 : burnin_flag,
                          out_flag, max_lag);

    auto cfg = ductile::pipeline::ExperimentConfig::from_file(config_path);
    if (!sampler_flag.empty()) {
      if (sampler_flag != "mh" && sampler_flag != "dram" && sampler_flag != "enkf")
        throw ConfigError("unknown sampler '" + sampler_flag + "'");
      cfg.mcmc.sampler = sampler_flag;
    }
    if (chains_flag >= 0) cfg.mcmc.chains = chains_flag;
    if (samples_flag >= 0) cfg.mcmc.samples = samples_flag;
    if (seed_flag >= 0) cfg.mcmc.seed = static_cast<std::uint64_t>(seed_flag);
    if (burnin_flag >= 0) cfg.mcmc.burn_in = burnin_flag;
    if (threads_flag > 0) cfg.mcmc.threads = threads_flag;
    if (cfg.mcmc.chains < 1) throw ConfigError("--chains must be >= 1");
    if (cfg.mcmc.samples < 1) throw ConfigError("--samples must be >= 1");
    if (cfg.mcmc.burn_in < 0.0 || cfg.mcmc.burn_in >= 1.0)
      throw ConfigError("--burnin must lie in [0, 1)");

    if (app.got_subcommand(inf)) return cmd_infer(cfg, config_path, out_flag, stub);
    if (app.got_subcommand(stp)) return cmd_stepwise(cfg, config_path, out_flag);
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const GateFailure&) {
    return 3;
  } catch (const ductile::fem::StepFailure& e) {
    std::fprintf(stderr, "solver failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
