#pragma once

// Command implementations behind the `perft` executable. Each returns a
// process exit code:
//   0 success, 1 partial sweep failure / unexpected error, 2 config error,
//   3 training divergence.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "perft/checkpoint.hpp"

namespace perft::cli {

enum ExitCode : int { kOk = 0, kPartialFailure = 1, kConfigError = 2, kDiverged = 3 };

struct Overrides {
  std::optional<std::string> output_dir;
  std::optional<std::uint64_t> seed;  // replaces train.seed (model init, shuffling, dropout)
};

struct Io {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

inline std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_history_csv(std::ostream& os, const std::vector<TrainRecord>& history) {
  os << "step,total_loss,task_loss,lb_moe,z_moe,lb_peft,lr\n";
  for (const auto& r : history) {
    os << r.step << ',' << fmt_real(r.total_loss) << ',' << fmt_real(r.task_loss) << ','
       << fmt_real(r.lb_moe) << ',' << fmt_real(r.z_moe) << ',' << fmt_real(r.lb_peft) << ','
       << fmt_real(r.learning_rate) << '\n';
  }
}

/// Fixed probe token for live parameter enumeration.
inline Matrix probe_token(std::size_t d_model) {
  Rng rng(0x5EED);
  return init_matrix(1, d_model, init::ScaledNormal{1.0}, rng);
}

struct RunResult {
  Model model;
  std::vector<TrainRecord> history;
  EvalResult eval;
  ParamReport params;
  json summary;
};

inline json summary_json(const RunResult& r, const ExperimentConfig& cfg) {
  json s;
  s["variant"] = to_string(cfg.strategy.variant);
  s["steps"] = r.history.size();
  s["final_task_loss"] = r.eval.loss;
  s["last_step_task_loss"] = r.history.empty() ? r.eval.loss : r.history.back().task_loss;
  if (r.eval.accuracy) {
    s["accuracy"] = *r.eval.accuracy;
  } else {
    s["accuracy"] = nullptr;
  }
  s["param_report"] = to_json(r.params);
  json routing;
  json moe = json::array();
  for (const auto& st : r.eval.moe_routing) moe.push_back(to_json(st));
  routing["moe"] = moe;
  json peft = json::array();
  for (const auto& st : r.eval.peft_routing) peft.push_back(to_json(st));
  routing["peft"] = peft;
  s["routing_stats"] = routing;
  return s;
}

/// Builds, trains and evaluates one configuration; writes nothing.
inline RunResult run_experiment(const ExperimentConfig& cfg) {
  if (cfg.counting_only) {
    throw ConfigError("preset", "'" + cfg.preset.value_or("?") + "' is a counting-only preset");
  }
  const Dataset data = generate_task(cfg.task);
  RunResult r{build_model(cfg.model, cfg.strategy, cfg.task.kind, data.output_dim(), cfg.train.seed),
              {}, {}, {}, {}};
  r.params = enumerate_params(r.model, probe_token(cfg.model.moe.d_model));
  r.history = train(r.model, data, cfg.train);
  r.eval = evaluate(r.model, data);
  r.summary = summary_json(r, cfg);
  return r;
}

/// Writes history.csv, summary.json and checkpoint/ under cfg.output_dir.
inline void write_run_artifacts(const ExperimentConfig& cfg, const RunResult& r) {
  const std::filesystem::path dir(cfg.output_dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "history.csv", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / "history.csv").string());
    write_history_csv(os, r.history);
  }
  {
    std::ofstream os(dir / "summary.json", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / "summary.json").string());
    os << r.summary.dump(2) << '\n';
  }
  save_checkpoint(dir / "checkpoint", cfg, r.model);
}

inline ExperimentConfig apply_overrides(ExperimentConfig cfg, const Overrides& o) {
  if (o.output_dir) cfg.output_dir = *o.output_dir;
  if (o.seed) cfg.train.seed = *o.seed;
  return cfg;
}

/// Maps exceptions to the exit-code contract.
template <typename Fn>
int guarded(Io io, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    io.err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DivergedError& e) {
    io.err << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return kPartialFailure;
  }
}

inline int cmd_train(const std::string& config_path, const Overrides& o = {}, Io io = {}) {
  return guarded(io, [&] {
    const ExperimentConfig cfg = apply_overrides(load_experiment(config_path), o);
    const RunResult r = run_experiment(cfg);
    write_run_artifacts(cfg, r);
    io.out << r.summary.dump(2) << '\n';
    return static_cast<int>(kOk);
  });
}

/// Evaluates a checkpoint (or, without one, the freshly initialised model)
/// on the configured task and prints the metrics as JSON.
inline int cmd_eval(const std::string& config_path, const std::optional<std::string>& checkpoint,
                    const Overrides& o = {}, Io io = {}) {
  return guarded(io, [&] {
    ExperimentConfig cfg;
    Model model;
    if (checkpoint) {
      auto ck = load_checkpoint(*checkpoint);
      cfg = std::move(ck.config);
      model = std::move(ck.model);
      if (!config_path.empty()) {
        // The task may be swapped for evaluation; the model must match.
        ExperimentConfig other = load_experiment(config_path);
        if (other.task.kind != cfg.task.kind || other.task.d_model != cfg.task.d_model) {
          throw ConfigError("task", "task does not match the checkpoint's model");
        }
        cfg.task = other.task;
      }
    } else {
      cfg = apply_overrides(load_experiment(config_path), o);
      if (cfg.counting_only) throw ConfigError("preset", "counting-only preset");
      model = build_model(cfg.model, cfg.strategy, cfg.task.kind,
                          Dataset{cfg.task, {}, {}, {}}.output_dim(), cfg.train.seed);
    }
    const Dataset data = generate_task(cfg.task);
    const EvalResult ev = evaluate(model, data);
    json j;
    j["loss"] = ev.loss;
    if (ev.accuracy) {
      j["accuracy"] = *ev.accuracy;
    } else {
      j["accuracy"] = nullptr;
    }
    json moe = json::array();
    for (const auto& s : ev.moe_routing) moe.push_back(to_json(s));
    j["routing_stats"]["moe"] = moe;
    json peft = json::array();
    for (const auto& s : ev.peft_routing) peft.push_back(to_json(s));
    j["routing_stats"]["peft"] = peft;
    io.out << j.dump(2) << '\n';
    return static_cast<int>(kOk);
  });
}

/// Closed-form ParamReport as JSON; builds no tensors.
inline int cmd_count(const std::string& config_path, Io io = {}) {
  return guarded(io, [&] {
    const ExperimentConfig cfg = load_experiment(config_path);
    json j;
    j["mode"] = to_string(cfg.strategy.variant);
    const json report = to_json(count_params(cfg.count_spec()));
    for (auto& [k, v] : report.items()) j[k] = v;
    io.out << j.dump(2) << '\n';
    return static_cast<int>(kOk);
  });
}

/// vectors.csv and pca.csv for one layer of a checkpoint. PCA axes are fitted
/// on the FFN key vectors and applied to every vector of the bundle.
inline int cmd_analyze(const std::string& checkpoint_dir, std::size_t layer,
                       const std::string& out_dir, Io io = {}) {
  return guarded(io, [&] {
    const LoadedCheckpoint ck = load_checkpoint(checkpoint_dir);
    if (layer >= ck.model.layers.size()) {
      throw ConfigError("layer", "layer " + std::to_string(layer) + " out of range");
    }
    const VectorBundle bundle = extract_vectors(ck.model, layer);
    std::vector<std::vector<double>> all;
    for (const auto& v : bundle.vectors) all.push_back(v.values);
    const PcaResult pca = pca_project(bundle.of(VectorKind::key), all, 2);
    for (const auto& w : pca.warnings) io.err << "warning: " << w << '\n';

    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    std::ofstream vec(dir / "vectors.csv", std::ios::trunc);
    std::ofstream pc(dir / "pca.csv", std::ios::trunc);
    if (!vec || !pc) throw IoError("cannot write into " + dir.string());
    write_vectors_csv(vec, bundle);
    write_pca_csv(pc, bundle, pca);
    json j;
    for (auto k : {VectorKind::key, VectorKind::expert, VectorKind::peft_key, VectorKind::peft_expert})
      j["counts"][to_string(k)] = bundle.count(k);
    j["explained_variance_ratio"] = pca.explained_ratio;
    io.out << j.dump(2) << '\n';
    return static_cast<int>(kOk);
  });
}

// ---------------------------------------------------------------------------
// Sweeps.
//
// Grid file:
//   { "base": <experiment config object> | "base_config": "<path>",
//     "grid": { "variant": [...], "M": [...], "K_tilde": [...], "D_B": [...] },
//     "output_dir": "<dir>" }
// Missing grid axes take the base config's value. Cells whose strategies
// coincide after ignoring fields the variant does not use are run once.

struct SweepCell {
  std::string label;
  json strategy;  // overrides merged into the base strategy section
};

struct SweepPlan {
  json base;
  std::vector<SweepCell> cells;
  std::string output_dir = "runs/sweep";
};

inline SweepPlan plan_sweep(const json& grid_file, const std::filesystem::path& relative_to) {
  using namespace config_detail;
  reject_unknown(grid_file, "", {"base", "base_config", "grid", "output_dir"});
  SweepPlan plan;
  if (grid_file.contains("base") == grid_file.contains("base_config")) {
    throw ConfigError("base", "exactly one of 'base' or 'base_config' is required");
  }
  if (grid_file.contains("base")) {
    plan.base = grid_file.at("base");
  } else {
    std::filesystem::path p = grid_file.at("base_config").get<std::string>();
    if (p.is_relative()) p = relative_to / p;
    plan.base = read_json_file(p);
  }
  if (auto o = read_string(grid_file, "", "output_dir")) plan.output_dir = *o;

  const ExperimentConfig base = parse_experiment(plan.base);
  json grid = grid_file.contains("grid") ? grid_file.at("grid") : json::object();
  reject_unknown(grid, "grid", {"variant", "M", "K_tilde", "D_B"});
  auto axis = [&](const char* key, json fallback) {
    if (!grid.contains(key)) return json::array({fallback});
    const auto& a = grid.at(key);
    if (!a.is_array() || a.empty()) throw ConfigError(std::string("grid.") + key, "expected a non-empty array");
    return a;
  };
  const json variants = axis("variant", to_string(base.strategy.variant));
  const json ms = axis("M", base.strategy.num_experts);
  const json kts = axis("K_tilde", base.strategy.top_k);
  const json dbs = axis("D_B", base.strategy.bottleneck);

  std::set<std::string> seen;
  for (const auto& v : variants) {
    const auto parsed = v.is_string() ? parse_variant(v.get<std::string>()) : std::nullopt;
    const bool known = parsed.has_value();
    const Variant variant = parsed.value_or(Variant::none);
    for (const auto& m : ms) {
      for (const auto& kt : kts) {
        for (const auto& db : dbs) {
          json s{{"variant", v}, {"M", m}, {"K_tilde", kt}, {"D_B", db}};
          // Normalise fields the variant ignores so duplicates collapse.
          if (known && variant != Variant::perft_r) s["K_tilde"] = 1;
          if (known && variant != Variant::perft_r && variant != Variant::perft_d) s["M"] = 1;
          if (known && variant == Variant::none) s["D_B"] = base.strategy.bottleneck;
          const std::string key = s.dump();
          if (!seen.insert(key).second) continue;
          std::ostringstream label;
          label << "cell_" << plan.cells.size() << '_'
                << (v.is_string() ? v.get<std::string>() : std::string("invalid")) << "_M"
                << s["M"].dump() << "_K" << s["K_tilde"].dump() << "_DB" << s["D_B"].dump();
          plan.cells.push_back({label.str(), s});
        }
      }
    }
  }
  return plan;
}

struct CellOutcome {
  bool ok = false;
  std::string error;
  std::optional<ParamReport> count;
  double final_loss = 0.0;
  std::optional<double> accuracy;
};

inline std::size_t sweep_threads() {
  if (const char* env = std::getenv("PERFT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return 1;
}

inline int cmd_sweep(const std::string& grid_path, const Overrides& o = {}, Io io = {}) {
  return guarded(io, [&] {
    const json grid_file = read_json_file(grid_path);
    SweepPlan plan = plan_sweep(grid_file, std::filesystem::path(grid_path).parent_path());
    if (o.output_dir) plan.output_dir = *o.output_dir;
    const std::filesystem::path root(plan.output_dir);
    std::filesystem::create_directories(root);

    std::vector<CellOutcome> outcomes(plan.cells.size());
    auto run_cell = [&](std::size_t i) {
      CellOutcome& out = outcomes[i];
      try {
        json cfg_json = plan.base;
        json strategy = cfg_json.contains("strategy") ? cfg_json["strategy"] : json::object();
        for (auto& [k, v] : plan.cells[i].strategy.items()) strategy[k] = v;
        cfg_json["strategy"] = strategy;
        cfg_json["output_dir"] = (root / plan.cells[i].label).string();
        const ExperimentConfig cfg = apply_overrides(parse_experiment(cfg_json), Overrides{std::nullopt, o.seed});
        out.count = count_params(cfg.count_spec());
        const RunResult r = run_experiment(cfg);
        write_run_artifacts(cfg, r);
        out.final_loss = r.eval.loss;
        out.accuracy = r.eval.accuracy;
        out.ok = true;
      } catch (const std::exception& e) {
        out.error = e.what();
      }
    };

    const std::size_t workers = std::min(sweep_threads(), std::max<std::size_t>(plan.cells.size(), 1));
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < plan.cells.size(); i = next++) run_cell(i);
      });
    }
    for (auto& t : pool) t.join();

    std::ofstream csv(root / "frontier.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write frontier.csv");
    csv << "variant,M,K_tilde,D_B,activated_params,efficiency,final_loss,accuracy,status\n";
    bool any_failed = false;
    for (std::size_t i = 0; i < plan.cells.size(); ++i) {
      const auto& s = plan.cells[i].strategy;
      const auto& oc = outcomes[i];
      auto field = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
      csv << field(s["variant"]) << ',' << field(s["M"]) << ',' << field(s["K_tilde"]) << ','
          << field(s["D_B"]) << ',';
      csv << (oc.count ? std::to_string(oc.count->trainable_activated_per_token) : "") << ','
          << (oc.count ? fmt_real(oc.count->activated_efficiency) : "") << ',';
      if (oc.ok) {
        csv << fmt_real(oc.final_loss) << ',' << (oc.accuracy ? fmt_real(*oc.accuracy) : "")
            << ",ok\n";
      } else {
        any_failed = true;
        std::string msg = oc.error;
        for (auto& ch : msg)
          if (ch == ',' || ch == '\n' || ch == '"') ch = ';';
        csv << ",,error: " << msg << '\n';
        io.err << plan.cells[i].label << ": " << oc.error << '\n';
      }
    }
    io.out << "sweep: " << plan.cells.size() << " cells -> " << (root / "frontier.csv").string()
           << '\n';
    return static_cast<int>(any_failed ? kPartialFailure : kOk);
  });
}

}  // namespace perft::cli
