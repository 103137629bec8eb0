#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "modec/harness/pipeline.hpp"

using namespace modec;
using namespace modec::harness;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("modec_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

json tiny_json(const fs::path& out_dir) {
  auto j = json::parse(R"({
    "seed": 3,
    "suite": {"kind": "multigoal", "tasks": 2, "horizon": 12},
    "shape": {"preset": "2x8", "hidden": 8},
    "pretrain": {"steps": 200, "batch_size": 16, "warmup_steps": 50, "log_interval": 100,
                 "sac": {"critic_hidden": 16}},
    "joint": {"episodes": 2, "ims_batch": 4, "reptile_inner_steps": 1, "batch_size": 16,
              "selector_hidden": 8},
    "distill": {"steps": 60, "batch_size": 8, "warmup_steps": 8, "hidden": 8, "env_weight": 0.0,
                "log_interval": 30},
    "adapt": {"steps": 300, "shots_per_k": 2},
    "devices": [{"profile": {"name": "quiet", "per_module_us": 500, "overhead_us": 1000},
                 "constraints_ms": [20.0, 0.5, 5.2]}],
    "eval": {"episodes": 30}
  })");
  j["out_dir"] = out_dir.string();
  return j;
}

ExperimentConfig tiny(const fs::path& out_dir) { return parse_config(tiny_json(out_dir).dump()); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Captures std::cerr for the lifetime of the object.
struct CerrCapture {
  std::stringstream buf;
  std::streambuf* old = std::cerr.rdbuf(buf.rdbuf());
  ~CerrCapture() { std::cerr.rdbuf(old); }
};

Checkpoint random_checkpoint(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1e3);
  Checkpoint c{kCheckpointFormat, "pretrain", seed, "abc", {}, {}};
  c.meta["note"] = "x";
  for (const char* name : {"a", "b.w", "c"}) {
    diffcore::Tensor t(3, 5);
    for (auto& v : t.values()) v = n(rng) * std::pow(10.0, static_cast<int>(rng() % 40) - 20);
    c.params.add(name, t);
  }
  c.params.get("c")[0] = -0.0;
  c.params.get("c")[1] = 5e-324;
  return c;
}

}  // namespace

TEST_CASE("config: defaults, strict keys, validation, stage hashes") {
  const auto c = tiny("/tmp/x");
  CHECK(c.seed == 3);
  CHECK(c.suite.seed == 3);
  CHECK(c.shape.layers == 2);
  CHECK(c.shape.modules_per_layer == 8);
  CHECK(c.shape.task_count == 2);
  CHECK(c.joint.sac.critic_hidden == 16);
  CHECK(c.devices.at(0).profile.name == "quiet");
  CHECK(c.devices.at(0).profile.expected_ms(2) == doctest::Approx(2.0).epsilon(1e-15));

  auto bad = [](const std::function<void(json&)>& edit) {
    auto j = tiny_json("/tmp/x");
    edit(j);
    CHECK_THROWS_AS(parse_config(j.dump()), ConfigError);
  };
  bad([](json& j) { j["typo"] = 1; });
  bad([](json& j) { j["pretrain"]["sac"]["gama"] = 0.9; });
  bad([](json& j) { j["devices"][0]["extra"] = true; });
  bad([](json& j) { j["eval"]["episodes"] = 29; });
  bad([](json& j) { j["pretrain"]["steps"] = -4; });
  bad([](json& j) { j["pretrain"]["steps"] = "many"; });
  bad([](json& j) { j["variant"] = "fixed_k"; });
  bad([](json& j) { j["variant"] = "fixed_k"; j["eval"]["fixed_k"] = 17; });
  bad([](json& j) { j["variant"] = "modec_o"; });
  bad([](json& j) { j["variant"] = "best"; });
  bad([](json& j) { j["shape"]["preset"] = "3x3"; });
  bad([](json& j) { j["devices"][0]["constraints_ms"] = json::array({1.0, -2.0}); });
  bad([](json& j) { j["devices"][0]["profile"]["name"] = "a,b"; });
  bad([](json& j) { j["devices"].push_back(j["devices"][0]); });
  bad([](json& j) { j["joint"]["sac"] = {{"critic_hidden", 32}}; });
  CHECK_THROWS_AS(parse_config("{"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);

  // Downstream edits leave upstream hashes alone.
  auto j = tiny_json("/tmp/x");
  j["distill"]["lr"] = 0.5;
  const auto d = parse_config(j.dump());
  CHECK(stage_hash(c, Stage::kPretrain) == stage_hash(d, Stage::kPretrain));
  CHECK(stage_hash(c, Stage::kJoint) == stage_hash(d, Stage::kJoint));
  CHECK(stage_hash(c, Stage::kDistill) != stage_hash(d, Stage::kDistill));
  CHECK(stage_hash(c, Stage::kAdapt) != stage_hash(d, Stage::kAdapt));
  j["out_dir"] = "/tmp/elsewhere";
  CHECK(stage_hash(d, Stage::kAdapt) == stage_hash(parse_config(j.dump()), Stage::kAdapt));
  j["seed"] = 4;
  CHECK(stage_hash(d, Stage::kPretrain) != stage_hash(parse_config(j.dump()), Stage::kPretrain));

  // Canonical JSON parses back to the same hashes.
  const auto again = parse_config(config_to_json(c));
  for (auto s : {Stage::kPretrain, Stage::kJoint, Stage::kDistill, Stage::kAdapt})
    CHECK(stage_hash(again, s) == stage_hash(c, s));
}

TEST_CASE("config: profile files resolve relative to the config") {
  const auto dir = scratch("profiles");
  fs::create_directories(dir / "p");
  std::ofstream(dir / "p" / "dev.json")
      << R"({"name": "dev", "per_module_us": 100, "overhead_us": 300, "noise_sigma_us": 10})";
  auto j = tiny_json(dir / "out");
  j["devices"][0]["profile"] = "p/dev.json";
  std::ofstream(dir / "cfg.json") << j.dump();
  const auto c = load_config(dir / "cfg.json");
  CHECK(c.devices.at(0).profile.name == "dev");
  CHECK(c.devices.at(0).profile.noise_sigma_us == 10.0);
  j["devices"][0]["profile"] = "p/missing.json";
  std::ofstream(dir / "cfg.json", std::ios::trunc) << j.dump();
  CHECK_THROWS_AS(load_config(dir / "cfg.json"), ConfigError);
}

TEST_CASE("checkpoint: bit-exact round trip, hash, mismatch warning") {
  const auto dir = scratch("ckpt");
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = random_checkpoint(seed);
    const auto back = deserialize(serialize(c));
    CHECK(back.params.identical(c.params));
    CHECK(std::signbit(back.params.get("c")[0]));
    CHECK(back.meta == c.meta);
    CHECK(checkpoint_hash(back) == checkpoint_hash(c));
    save_checkpoint(dir / "c.json", c);
    CHECK(checkpoint_hash(load_checkpoint(dir / "c.json")) == checkpoint_hash(c));
  }
  auto c = random_checkpoint(9);
  auto d = c;
  d.params.get("a")[4] = std::nextafter(d.params.get("a")[4], 1e300);
  CHECK(checkpoint_hash(c) != checkpoint_hash(d));

  save_checkpoint(dir / "w.json", c);
  {
    CerrCapture cap;
    const auto loaded = load_checkpoint(dir / "w.json", "other");
    CHECK(loaded.params.identical(c.params));
    CHECK(cap.buf.str().find("warning") != std::string::npos);
  }
  {
    CerrCapture cap;
    load_checkpoint(dir / "w.json", "abc");
    CHECK(cap.buf.str().empty());
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.json"), CheckpointError);
  std::ofstream(dir / "bad.json") << R"({"format_version": 99})";
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.json"), CheckpointError);
  std::ofstream(dir / "trunc.json") << serialize(c).substr(0, 40);
  CHECK_THROWS_AS(load_checkpoint(dir / "trunc.json"), CheckpointError);
}

TEST_CASE("artifacts: pack and unpack every stage") {
  modnet::NetShape shape{.layers = 2, .modules_per_layer = 3, .hidden = 5, .state_dim = 4,
                         .action_dim = 2, .task_count = 3};
  mtrl::PretrainConfig pc;
  pc.sac.critic_hidden = 7;
  pc.sac.initial_log_alpha = -1.25;
  const auto init = mtrl::initial_state(shape, pc, 11);
  const auto ck = deserialize(serialize(pack_pretrain(init, 11, "h")));
  const auto back = unpack_pretrain(ck, pc.sac.alpha_lr);
  CHECK(back.policy.params().identical(init.policy.params()));
  CHECK(back.critics.online.identical(init.critics.online));
  CHECK(back.critics.target.identical(init.critics.target));
  CHECK(back.critics.shape.hidden == 7);
  CHECK(back.temperatures.alphas() == init.temperatures.alphas());
  CHECK(back.temperatures.target_entropy() == init.temperatures.target_entropy());
  CHECK(unpack_policy(ck).shape().modules_per_layer == 3);

  std::mt19937_64 rng(2);
  selector::IterativeSelectorNet ims({4, 3, 6, 5}, rng);
  distill::OneShotSelectorNet student({4, 3, 6, 5}, rng);
  CHECK(unpack_ims(deserialize(serialize(pack_ims(ims, 1, "h")))).params().identical(ims.params()));
  CHECK(unpack_student(deserialize(serialize(pack_student(student, 1, "h"))))
            .params()
            .identical(student.params()));
  device::DeviceAdapterNet adapter(6, 4, 5.0, 2.0, rng);
  const device::DeviceProfile p{"dev", 1.0, 2.0, 0.5, device::LatencyMode::kSimulated};
  const auto ack = deserialize(serialize(pack_adapter(adapter, p, 1, "h")));
  CHECK(unpack_adapter(ack).predict(4.4) == adapter.predict(4.4));
  CHECK(adapter_profile(ack).noise_sigma_us == 0.5);

  CHECK_THROWS_AS(unpack_ims(ck), CheckpointError);
  CHECK_THROWS_AS(unpack_adapter(ck), CheckpointError);
  auto broken = ck;
  broken.params = extract_params(ck.params, "policy/");
  CHECK_THROWS_AS(unpack_pretrain(broken, 1e-3), CheckpointError);
  CHECK_THROWS_AS(extract_params(ck.params, "nothing/"), CheckpointError);
}

TEST_CASE("report: header-only, two lines, CSV round trip, unwritable path") {
  EvalReport empty;
  CHECK(report_csv(empty) == "device,constraint_ms,success_rate,ci95,flops,violation_rate,mean_K\n");
  CHECK(report_jsonl(empty).empty());
  EvalReport one{{{"fast", 8.0, 0.5, ci95(0.5, 30), 1234.5, 0.01, 3.25, 30, false}}};
  const auto csv = report_csv(one);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);

  EvalReport many;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    many.cells.push_back({i % 2 ? "a" : "b", u(rng) * 30.0, u(rng), u(rng) / 7.0, u(rng) * 1e6,
                          u(rng), 1.0 + 15.0 * u(rng), 0, false});
  }
  sort_cells(many);
  for (std::size_t i = 1; i < many.cells.size(); ++i) {
    const auto& a = many.cells[i - 1];
    const auto& b = many.cells[i];
    CHECK((a.device < b.device || (a.device == b.device && a.constraint_ms <= b.constraint_ms)));
  }
  CHECK(parse_report_csv(report_csv(many)).cells == many.cells);

  const auto dir = scratch("report");
  report_emit(one, dir / "r");
  CHECK(slurp(dir / "r.csv") == csv);
  const auto row = json::parse(slurp(dir / "r.jsonl"));
  CHECK(row.at("mean_K") == 3.25);
  CHECK(row.at("episodes") == 30);
  std::ofstream(dir / "file") << "x";
  CHECK_THROWS(report_emit(one, dir / "file" / "r"));
  CHECK_THROWS(parse_report_csv("wrong,header\n"));
}

TEST_CASE("evaluate: slack and infeasible budgets, worker independence") {
  modnet::NetShape shape{.layers = 2, .modules_per_layer = 4, .hidden = 6, .state_dim = 4,
                         .action_dim = 2, .task_count = 2};
  std::mt19937_64 rng(8);
  modnet::ModularPolicyNet base(shape, rng);
  distill::OneShotSelectorNet student({4, 2, 8, 6}, rng);
  envs::SuiteConfig suite{.kind = envs::SuiteKind::kMultiGoal, .tasks = 2, .horizon = 10, .seed = 1};
  const device::DeviceProfile quiet{"quiet", 500.0, 1000.0, 0.0, device::LatencyMode::kSimulated};
  device::AdapterConfig acfg;
  acfg.collect.shots_per_k = 1;
  const auto adapter = device::adapt(suite, quiet, base, student, acfg, 2).adapter;
  const auto select = device::student_selector(student);
  const KPolicy by_adapter = [&](double c) { return adapter.deployed_k(c); };

  const auto slack = evaluate_cell(suite, base, select, by_adapter, quiet, 100.0, 30, 5);
  CHECK(slack.mean_k == 8.0);
  CHECK(slack.violation_rate == 0.0);
  CHECK(slack.flops == static_cast<double>(base.flops(modnet::ModuleMask::full(8))));
  CHECK_FALSE(slack.infeasible);
  CHECK(slack.episodes == 30);

  const auto tight = evaluate_cell(suite, base, select, by_adapter, quiet, 1.0, 30, 5);
  CHECK(tight.infeasible);
  CHECK(tight.violation_rate == 1.0);
  CHECK(tight.mean_k == 1.0);

  const auto at_k3 = evaluate_cell(suite, base, select, by_adapter, quiet, quiet.expected_ms(3), 30, 5);
  CHECK(at_k3.mean_k == 3.0);
  CHECK(at_k3.violation_rate == 0.0);
  CHECK(at_k3.flops < slack.flops);
  CHECK(at_k3.ci95 == doctest::Approx(ci95(at_k3.success_rate, 30)).epsilon(1e-15));

  const device::DeviceProfile noisy{"noisy", 500.0, 1000.0, 300.0, device::LatencyMode::kSimulated};
  const auto serial = evaluate_cell(suite, base, select, by_adapter, noisy, 3.0, 30, 5, 1);
  const auto pooled = evaluate_cell(suite, base, select, by_adapter, noisy, 3.0, 30, 5, 4);
  CHECK(serial == pooled);
  CHECK(serial.violation_rate > 0.0);
  CHECK(serial.violation_rate < 1.0);
  CHECK_THROWS(evaluate_cell(suite, base, select, by_adapter, quiet, 3.0, 0, 5));
  CHECK(ci95(0.5, 100) == doctest::Approx(0.098).epsilon(1e-12));
  CHECK(ci95(1.0, 30) == 0.0);
}

TEST_CASE("pipeline: determinism, resume, fixed-K bypass, stage errors") {
  const auto dir_a = scratch("pipe_a");
  const auto dir_b = scratch("pipe_b");
  const auto a = run_pipeline(tiny(dir_a));
  const auto b = run_pipeline(tiny(dir_b));
  REQUIRE(a.stages.size() == 5);
  for (std::size_t i = 0; i < a.stages.size(); ++i) {
    CAPTURE(a.stages[i].name);
    CHECK(a.stages[i].checkpoint_hash == b.stages[i].checkpoint_hash);
    CHECK_FALSE(a.stages[i].reused);
  }
  CHECK(slurp(dir_a / "report_modec.csv") == slurp(dir_b / "report_modec.csv"));
  for (const char* f : {"pretrain.ckpt.json", "joint_base.ckpt.json", "joint_ims.ckpt.json",
                        "distill.ckpt.json", "adapt_quiet.ckpt.json", "report_modec.jsonl",
                        "pretrain_metrics.jsonl", "joint_metrics.jsonl", "distill_metrics.jsonl"}) {
    CAPTURE(f);
    CHECK(fs::exists(dir_a / f));
  }
  const auto joint_row = json::parse(slurp(dir_a / "joint_metrics.jsonl").substr(0, slurp(dir_a / "joint_metrics.jsonl").find('\n')));
  for (const char* k : {"episode", "K", "dist0", "distK", "ims_loss", "rg_loss", "success"})
    CHECK(joint_row.contains(k));

  REQUIRE(a.report.cells.size() == 3);
  CHECK(a.report.cells[0].constraint_ms == 0.5);
  CHECK(a.report.cells[0].infeasible);
  CHECK(a.report.cells[0].violation_rate == 1.0);
  CHECK(a.report.cells[2].mean_k == 16.0);
  CHECK(a.report.cells[2].violation_rate == 0.0);

  // Resume reuses every stage and reproduces the report.
  const auto resumed = run_pipeline(tiny(dir_a));
  for (std::size_t i = 0; i + 1 < resumed.stages.size(); ++i) CHECK(resumed.stages[i].reused);
  CHECK(resumed.report.cells == a.report.cells);

  // A distill edit retrains distill and adapt only.
  auto j = tiny_json(dir_a);
  j["distill"]["lr"] = 3e-3;
  const auto edited = run_pipeline(parse_config(j.dump()));
  CHECK(edited.stages[0].reused);
  CHECK(edited.stages[1].reused);
  CHECK_FALSE(edited.stages[2].reused);
  CHECK_FALSE(edited.stages[3].reused);

  // Fixed K skips adaptation and deploys exactly K.
  j = tiny_json(dir_a);
  j["variant"] = "fixed_k";
  j["eval"]["fixed_k"] = 5;
  const auto fixed = run_pipeline(parse_config(j.dump()));
  CHECK(fixed.adapters.empty());
  CHECK(fixed.stages.size() == 4);
  for (const auto& cell : fixed.report.cells) CHECK(cell.mean_k == 5.0);
  CHECK(fs::exists(dir_a / "report_fixed_k.csv"));

  j = tiny_json(dir_a);
  j["variant"] = "modec_i";
  const auto iterative = run_pipeline(parse_config(j.dump()));
  CHECK_FALSE(iterative.distilled.has_value());
  CHECK(fs::exists(dir_a / "adapt_quiet_ims.ckpt.json"));

  j = tiny_json(scratch("pipe_err"));
  j["pretrain"]["batch_size"] = 0;
  try {
    run_pipeline(parse_config(j.dump()));
    FAIL("expected a stage failure");
  } catch (const PipelineError& e) {
    CHECK(std::string(e.what()).find("stage pretrain") != std::string::npos);
  }
}
