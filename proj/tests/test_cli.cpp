#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "perft/cli.hpp"

namespace fs = std::filesystem;
using namespace perft;
using namespace perft::cli;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::trunc);
  os << text;
}

/// A config small enough to train in milliseconds.
json small_config(const fs::path& out) {
  json j = json::parse(R"({
    "model": {"L": 1, "D": 6, "D_ffn": 8, "N": 3, "K": 2},
    "strategy": {"variant": "perft_r", "M": 3, "K_tilde": 1, "D_B": 2},
    "task": {"kind": "cluster_classification", "num_clusters": 3, "T": 3, "samples": 24,
             "noise_std": 0.1, "seed": 4},
    "train": {"lr": 0.005, "warmup_steps": 2, "batch_size": 8, "epochs": 2, "seed": 9}
  })");
  j["output_dir"] = out.string();
  return j;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() /
           (std::string("perft_cli_") + info->name() + "_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write_config(const std::string& name, const json& j) {
    const fs::path p = dir_ / name;
    write_file(p, j.dump(2));
    return p;
  }

  int run(const std::function<int(Io)>& fn) {
    out_.str("");
    err_.str("");
    return fn(Io{out_, err_});
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

struct ProcessResult {
  int code;
  std::string output;
};

ProcessResult run_binary(const std::string& args) {
  const std::string cmd = std::string(PERFT_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return {-1, ""};
  std::string output;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) output += buf;
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, output};
}

std::vector<std::string> csv_lines(const fs::path& p) {
  std::istringstream is(slurp(p));
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);) lines.push_back(line);
  return lines;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration parsing.

TEST(Config, PresetsAndRoundTrip) {
  const ExperimentConfig toy = load_experiment(fs::path(PERFT_CONFIG_DIR) / "toy.json");
  EXPECT_EQ(toy.model.num_layers, 2u);
  EXPECT_EQ(toy.model.moe.d_model, 16u);
  EXPECT_EQ(toy.model.moe.d_ffn, 32u);
  EXPECT_EQ(toy.model.moe.num_experts, 4u);
  EXPECT_EQ(toy.model.moe.top_k, 2u);
  EXPECT_EQ(toy.task.d_model, 16u);
  const json once = to_json(toy);
  EXPECT_EQ(to_json(parse_experiment(once)), once);

  const ExperimentConfig big = load_experiment(fs::path(PERFT_CONFIG_DIR) / "olmoe_dims_qv.json");
  EXPECT_TRUE(big.counting_only);
  EXPECT_EQ(big.model.num_layers, 16u);
  EXPECT_EQ(big.model.moe.num_experts, 64u);
  EXPECT_EQ(big.model.moe.top_k, 8u);
  EXPECT_EQ(big.model_activated_total, 1'280'000'000ULL);
}

TEST(Config, FieldLevelErrors) {
  auto field_of = [](const json& j) {
    try {
      parse_experiment(j);
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("<none>");
  };
  json j = small_config("x");
  j["model"]["K"] = 4;
  EXPECT_EQ(field_of(j), "model.K");
  j = small_config("x");
  j["strategy"]["K_tilde"] = 5;
  EXPECT_EQ(field_of(j), "strategy.K_tilde");
  j = small_config("x");
  j["strategy"]["colour"] = "red";
  EXPECT_EQ(field_of(j), "strategy.colour");
  j = small_config("x");
  j["extra"] = 1;
  EXPECT_EQ(field_of(j), "extra");
  j = small_config("x");
  j["model"].erase("D");
  EXPECT_EQ(field_of(j), "model.D");
  j = small_config("x");
  j["train"]["lr"] = "fast";
  EXPECT_EQ(field_of(j), "train.lr");
  j = small_config("x");
  j["task"]["noise_std"] = -1.0;
  EXPECT_EQ(field_of(j), "task.noise_std");
  EXPECT_EQ(field_of(json{{"preset", "huge"}}), "preset");
  EXPECT_EQ(field_of(json::object()), "model");
}

// ---------------------------------------------------------------------------
// train / eval.

TEST_F(CliTest, TrainWritesAllArtifacts) {
  const auto cfg = write_config("c.json", small_config(dir_ / "run"));
  ASSERT_EQ(run([&](Io io) { return cmd_train(cfg.string(), {}, io); }), kOk) << err_.str();
  EXPECT_TRUE(fs::exists(dir_ / "run" / "history.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "run" / "summary.json"));
  EXPECT_TRUE(fs::exists(dir_ / "run" / "checkpoint" / "manifest.json"));

  const auto hist = csv_lines(dir_ / "run" / "history.csv");
  EXPECT_EQ(hist.front(), "step,total_loss,task_loss,lb_moe,z_moe,lb_peft,lr");
  EXPECT_EQ(hist.size(), 1u + 6u);
  const json summary = json::parse(slurp(dir_ / "run" / "summary.json"));
  for (const char* key : {"final_task_loss", "accuracy", "param_report", "routing_stats"}) {
    EXPECT_TRUE(summary.contains(key)) << key;
  }
  EXPECT_EQ(summary["routing_stats"]["peft"].size(), 1u);
}

TEST_F(CliTest, InvalidConfigExitsTwoNamingTheField) {
  json j = small_config(dir_ / "run");
  j["model"]["K"] = 7;
  const auto cfg = write_config("bad.json", j);
  EXPECT_EQ(run([&](Io io) { return cmd_train(cfg.string(), {}, io); }), kConfigError);
  EXPECT_NE(err_.str().find("model.K"), std::string::npos) << err_.str();
  EXPECT_FALSE(fs::exists(dir_ / "run"));
  EXPECT_EQ(run([&](Io io) { return cmd_train((dir_ / "missing.json").string(), {}, io); }),
            kConfigError);
  write_file(dir_ / "broken.json", "{ not json");
  EXPECT_EQ(run([&](Io io) { return cmd_train((dir_ / "broken.json").string(), {}, io); }),
            kConfigError);
}

TEST_F(CliTest, DivergenceExitsThree) {
  json j = small_config(dir_ / "run");
  j["task"]["kind"] = "cluster_regression";
  j["train"]["lr"] = 1e300;
  j["train"]["warmup_steps"] = 0;
  j["train"]["batch_size"] = 1;
  const auto cfg = write_config("c.json", j);
  EXPECT_EQ(run([&](Io io) { return cmd_train(cfg.string(), {}, io); }), kDiverged) << err_.str();
  EXPECT_NE(err_.str().find("step"), std::string::npos);
}

TEST_F(CliTest, RerunIsByteIdentical) {
  const auto a = write_config("a.json", small_config(dir_ / "a"));
  const auto b = write_config("b.json", small_config(dir_ / "b"));
  ASSERT_EQ(run([&](Io io) { return cmd_train(a.string(), {}, io); }), kOk);
  ASSERT_EQ(run([&](Io io) { return cmd_train(b.string(), {}, io); }), kOk);
  EXPECT_EQ(slurp(dir_ / "a" / "summary.json"), slurp(dir_ / "b" / "summary.json"));
  EXPECT_EQ(slurp(dir_ / "a" / "history.csv"), slurp(dir_ / "b" / "history.csv"));
}

TEST_F(CliTest, OverridesApply) {
  const auto cfg = write_config("c.json", small_config(dir_ / "ignored"));
  ASSERT_EQ(run([&](Io io) { return cmd_train(cfg.string(), Overrides{(dir_ / "o1").string(), 9}, io); }),
            kOk);
  ASSERT_EQ(run([&](Io io) { return cmd_train(cfg.string(), Overrides{(dir_ / "o2").string(), 10}, io); }),
            kOk);
  EXPECT_FALSE(fs::exists(dir_ / "ignored"));
  // Seed 9 is the config's own seed, so only o2 differs.
  EXPECT_NE(slurp(dir_ / "o1" / "history.csv"), slurp(dir_ / "o2" / "history.csv"));
}

TEST_F(CliTest, CheckpointRoundTripsExactly) {
  const json j = small_config(dir_ / "run");
  const auto cfgp = write_config("c.json", j);
  ASSERT_EQ(run([&](Io io) { return cmd_train(cfgp.string(), {}, io); }), kOk);
  const RunResult fresh = run_experiment(parse_experiment(j));
  const LoadedCheckpoint ck = load_checkpoint(dir_ / "run" / "checkpoint");
  const auto a = fresh.model.parameters();
  const auto b = ck.model.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name(), b[i]->name());
    EXPECT_EQ(a[i]->value(), b[i]->value()) << a[i]->name();
    EXPECT_EQ(a[i]->frozen(), b[i]->frozen());
  }
  // eval on the checkpoint reproduces the summary's final loss.
  ASSERT_EQ(run([&](Io io) {
              return cmd_eval("", (dir_ / "run" / "checkpoint").string(), {}, io);
            }),
            kOk);
  const json ev = json::parse(out_.str());
  const json summary = json::parse(slurp(dir_ / "run" / "summary.json"));
  EXPECT_EQ(ev["loss"], summary["final_task_loss"]);
  EXPECT_EQ(ev["accuracy"], summary["accuracy"]);
}

TEST_F(CliTest, EvalFreshModelAndErrors) {
  const auto cfg = write_config("c.json", small_config(dir_ / "run"));
  ASSERT_EQ(run([&](Io io) { return cmd_eval(cfg.string(), std::nullopt, {}, io); }), kOk);
  const json a = json::parse(out_.str());
  ASSERT_EQ(run([&](Io io) { return cmd_eval(cfg.string(), std::nullopt, {}, io); }), kOk);
  EXPECT_EQ(json::parse(out_.str()), a);
  EXPECT_EQ(run([&](Io io) { return cmd_eval("", (dir_ / "nope").string(), {}, io); }),
            kConfigError);
}

// ---------------------------------------------------------------------------
// count.

TEST_F(CliTest, CountQvLoraRankFour) {
  const auto cfg = fs::path(PERFT_CONFIG_DIR) / "olmoe_dims_qv.json";
  ASSERT_EQ(run([&](Io io) { return cmd_count(cfg.string(), io); }), kOk) << err_.str();
  const json j = json::parse(out_.str());
  EXPECT_EQ(j["mode"], "baseline_qv");
  EXPECT_EQ(j["trainable_activated_per_token"], 524288);
  EXPECT_NEAR(j["activated_efficiency_percent"].get<double>(), 0.041, 0.041 * 0.005);
}

TEST_F(CliTest, CountMatchesTrainEmbeddedReportAndNoneIsZero) {
  for (const char* variant : {"perft_r", "perft_e", "perft_d", "perft_s", "baseline_qv",
                              "baseline_gate", "none"}) {
    json j = small_config(dir_ / variant);
    j["strategy"]["variant"] = variant;
    const auto cfg = write_config(std::string(variant) + ".json", j);
    ASSERT_EQ(run([&](Io io) { return cmd_count(cfg.string(), io); }), kOk);
    json counted = json::parse(out_.str());
    counted.erase("mode");
    ASSERT_EQ(run([&](Io io) { return cmd_train(cfg.string(), {}, io); }), kOk) << err_.str();
    const json summary = json::parse(slurp(dir_ / variant / "summary.json"));
    EXPECT_EQ(summary["param_report"], counted) << variant;
    if (std::string(variant) == "none") {
      EXPECT_EQ(counted["trainable_total"], 0);
    }
  }
}

TEST_F(CliTest, CountRejectsInvalidConfig) {
  json j = json::parse(R"({"preset": "olmoe-dims", "strategy": {"variant": "perft_s", "D_B": 0}})");
  const auto cfg = write_config("c.json", j);
  EXPECT_EQ(run([&](Io io) { return cmd_count(cfg.string(), io); }), kConfigError);
  EXPECT_NE(err_.str().find("D_B"), std::string::npos);
  // Counting-only presets refuse to train.
  EXPECT_EQ(run([&](Io io) {
              return cmd_train((fs::path(PERFT_CONFIG_DIR) / "olmoe_dims_qv.json").string(), {}, io);
            }),
            kConfigError);
}

// ---------------------------------------------------------------------------
// analyze.

TEST_F(CliTest, AnalyzeExportsVectorsAndPca) {
  const auto cfg = write_config("c.json", small_config(dir_ / "run"));
  ASSERT_EQ(run([&](Io io) { return cmd_train(cfg.string(), {}, io); }), kOk);
  const fs::path ck = dir_ / "run" / "checkpoint";
  ASSERT_EQ(run([&](Io io) { return cmd_analyze(ck.string(), 0, (dir_ / "an").string(), io); }), kOk)
      << err_.str();
  const json counts = json::parse(out_.str())["counts"];
  EXPECT_EQ(counts["key"], 3 * 8);
  EXPECT_EQ(counts["expert"], 3);
  EXPECT_EQ(counts["peft_key"], 3 * 2);
  EXPECT_EQ(counts["peft_expert"], 3);

  const auto vec = csv_lines(dir_ / "an" / "vectors.csv");
  const auto pca = csv_lines(dir_ / "an" / "pca.csv");
  EXPECT_EQ(vec.front(), "kind,layer,index,c1,c2,c3,c4,c5,c6");
  EXPECT_EQ(pca.front(), "kind,layer,index,c1,c2");
  EXPECT_EQ(vec.size(), 1u + 24 + 3 + 6 + 3);
  EXPECT_EQ(pca.size(), vec.size());

  // Logits recomputed from the exported expert vectors match a forward pass.
  const LoadedCheckpoint loaded = load_checkpoint(ck);
  std::vector<std::vector<double>> g(3);
  for (const auto& line : vec) {
    if (line.rfind("expert,", 0) != 0) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    const std::size_t idx = std::stoul(cells[2]);
    for (std::size_t k = 3; k < cells.size(); ++k) g[idx].push_back(std::stod(cells[k]));
  }
  const Dataset ds = generate_task(loaded.config.task);
  const Matrix& x = ds.samples[0].input;
  const auto& layer = loaded.model.layers[0];
  const Tensor h = add(attention_forward(layer, Tensor::constant(x), false), Tensor::constant(x));
  const ModelOutput out = loaded.model.forward(Tensor::constant(x));
  const Matrix& logits = out.layers[0].moe_routing.logits.value();
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t i = 0; i < 3; ++i) {
      double dot = 0.0;
      for (std::size_t d = 0; d < 6; ++d) dot += h.value()(t, d) * g[i][d];
      EXPECT_NEAR(dot, logits(t, i), 1e-12);
    }

  EXPECT_EQ(run([&](Io io) { return cmd_analyze(ck.string(), 5, (dir_ / "an2").string(), io); }),
            kConfigError);
  EXPECT_EQ(run([&](Io io) {
              return cmd_analyze((dir_ / "none").string(), 0, (dir_ / "an3").string(), io);
            }),
            kConfigError);
}

// ---------------------------------------------------------------------------
// sweep.

TEST_F(CliTest, SingleCellSweepEqualsTrain) {
  const json base = small_config(dir_ / "train");
  const auto cfg = write_config("c.json", base);
  ASSERT_EQ(run([&](Io io) { return cmd_train(cfg.string(), {}, io); }), kOk);
  const json grid{{"base_config", "c.json"}, {"output_dir", (dir_ / "sweep").string()}};
  const auto gp = write_config("grid.json", grid);
  ASSERT_EQ(run([&](Io io) { return cmd_sweep(gp.string(), {}, io); }), kOk) << err_.str();
  const auto rows = csv_lines(dir_ / "sweep" / "frontier.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], "variant,M,K_tilde,D_B,activated_params,efficiency,final_loss,accuracy,status");
  fs::path cell;
  for (const auto& e : fs::directory_iterator(dir_ / "sweep"))
    if (e.is_directory()) cell = e.path();
  EXPECT_EQ(slurp(cell / "summary.json"), slurp(dir_ / "train" / "summary.json"));
  EXPECT_EQ(slurp(cell / "history.csv"), slurp(dir_ / "train" / "history.csv"));
}

TEST_F(CliTest, SweepIsOrderIndependentAndMatchesCount) {
  json base = small_config(dir_ / "unused");
  base.erase("output_dir");
  auto sweep = [&](const json& variants, const std::string& out, const char* threads) {
    const json grid{{"base", base},
                    {"grid", {{"variant", variants}, {"M", {1, 3}}, {"D_B", {1, 2}}}},
                    {"output_dir", (dir_ / out).string()}};
    const auto gp = write_config(out + ".json", grid);
    ::setenv("PERFT_THREADS", threads, 1);
    const int rc = run([&](Io io) { return cmd_sweep(gp.string(), {}, io); });
    ::unsetenv("PERFT_THREADS");
    EXPECT_EQ(rc, kOk) << err_.str();
    auto rows = csv_lines(dir_ / out / "frontier.csv");
    rows.erase(rows.begin());
    return rows;
  };
  auto a = sweep(json{"perft_r", "perft_d", "perft_s"}, "a", "1");
  auto b = sweep(json{"perft_s", "perft_d", "perft_r"}, "b", "3");
  // perft_s ignores M: 2 + 4 + 4 cells.
  EXPECT_EQ(a.size(), 10u);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);

  for (const auto& row : a) {
    std::istringstream ls(row);
    std::vector<std::string> c;
    for (std::string cell; std::getline(ls, cell, ',');) c.push_back(cell);
    ASSERT_EQ(c.size(), 9u) << row;
    EXPECT_EQ(c[8], "ok");
    json cfg = base;
    cfg["strategy"]["variant"] = c[0];
    cfg["strategy"]["M"] = std::stoi(c[1]);
    cfg["strategy"]["K_tilde"] = std::stoi(c[2]);
    cfg["strategy"]["D_B"] = std::stoi(c[3]);
    const auto cp = write_config("count.json", cfg);
    ASSERT_EQ(run([&](Io io) { return cmd_count(cp.string(), io); }), kOk);
    EXPECT_EQ(json::parse(out_.str())["trainable_activated_per_token"].get<std::uint64_t>(),
              std::stoull(c[4]))
        << row;
  }
}

TEST_F(CliTest, FailedCellIsRecordedAndSweepContinues) {
  json base = small_config(dir_ / "unused");
  const json grid{{"base", base},
                  {"grid", {{"variant", {"perft_s", "perft_r"}}, {"M", {2}}, {"K_tilde", {3}}}},
                  {"output_dir", (dir_ / "sw").string()}};
  const auto gp = write_config("grid.json", grid);
  EXPECT_EQ(run([&](Io io) { return cmd_sweep(gp.string(), {}, io); }), kPartialFailure);
  const auto rows = csv_lines(dir_ / "sw" / "frontier.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_NE(rows[1].find(",ok"), std::string::npos);
  EXPECT_NE(rows[2].find("error"), std::string::npos);
  EXPECT_NE(rows[2].find("K_tilde"), std::string::npos);
}

TEST_F(CliTest, SweepGridErrors) {
  const auto gp = write_config("g.json", json{{"grid", {{"variant", {"perft_s"}}}}});
  EXPECT_EQ(run([&](Io io) { return cmd_sweep(gp.string(), {}, io); }), kConfigError);
  const auto gp2 = write_config(
      "g2.json", json{{"base", small_config(dir_ / "u")}, {"grid", {{"alpha", {1, 2}}}}});
  EXPECT_EQ(run([&](Io io) { return cmd_sweep(gp2.string(), {}, io); }), kConfigError);
}

TEST(SweepPlan, ShippedGridDedupes) {
  const fs::path p = fs::path(PERFT_CONFIG_DIR) / "sweep.json";
  const SweepPlan plan = plan_sweep(read_json_file(p), p.parent_path());
  // perft_r and perft_d over 3 M x 2 D_B each, perft_s over 2 D_B.
  EXPECT_EQ(plan.cells.size(), 6u + 6u + 2u);
}

// ---------------------------------------------------------------------------
// The executable itself.

TEST_F(CliTest, BinaryExitCodes) {
  const auto count = run_binary("count --config " +
                                (fs::path(PERFT_CONFIG_DIR) / "olmoe_dims_qv.json").string());
  EXPECT_EQ(count.code, 0) << count.output;
  EXPECT_NE(count.output.find("524288"), std::string::npos);

  EXPECT_EQ(run_binary("").code, kConfigError);
  EXPECT_EQ(run_binary("frobnicate").code, kConfigError);
  EXPECT_EQ(run_binary("train").code, kConfigError);

  json j = small_config(dir_ / "run");
  j["model"]["K"] = 9;
  const auto bad = write_config("bad.json", j);
  const auto r = run_binary("train --config " + bad.string());
  EXPECT_EQ(r.code, kConfigError);
  EXPECT_NE(r.output.find("model.K"), std::string::npos) << r.output;

  const auto good = write_config("good.json", small_config(dir_ / "ignored"));
  const auto t = run_binary("train --config " + good.string() + " --out " + (dir_ / "bin").string() +
                            " --seed 3");
  EXPECT_EQ(t.code, 0) << t.output;
  EXPECT_TRUE(fs::exists(dir_ / "bin" / "summary.json"));
  const auto a = run_binary("analyze --checkpoint " + (dir_ / "bin" / "checkpoint").string() +
                            " --layer 0 --out " + (dir_ / "an").string());
  EXPECT_EQ(a.code, 0) << a.output;
  EXPECT_TRUE(fs::exists(dir_ / "an" / "pca.csv"));
}
