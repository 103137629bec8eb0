// Command-line front end: one verb per pipeline stage plus eval, pipeline and bench.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>

#include <CLI11.hpp>

#include "modec/diffcore/seed.hpp"
#include "modec/harness/pipeline.hpp"

namespace fs = std::filesystem;
using namespace modec;
using namespace modec::harness;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> episodes;

  void attach(CLI::App* app) {
    app->add_option("--seed", seed, "master seed, replacing the config value");
    app->add_option("--out-dir", out_dir, "output directory, replacing the config value");
    app->add_option("--episodes", episodes, "evaluation episodes per cell (>= 30)");
  }

  ExperimentConfig apply(ExperimentConfig c) const {
    if (seed) c.seed = c.suite.seed = *seed;
    if (out_dir) c.out_dir = *out_dir;
    if (episodes) {
      if (*episodes < 30) throw ConfigError("--episodes must be at least 30");
      c.eval.episodes = *episodes;
    }
    return c;
  }
};

ExperimentConfig config_or_default(const std::string& path, const Overrides& o) {
  return o.apply(path.empty() ? ExperimentConfig{} : load_config(path));
}

void emit(const nlohmann::ordered_json& row) { std::cout << row.dump() << '\n' << std::flush; }

void saved(const fs::path& path, const Checkpoint& c) {
  save_checkpoint(path, c);
  std::cerr << "wrote " << path.string() << " (hash " << checkpoint_hash(c) << ")\n";
}

device::MaskSelector selector_for(const ExperimentConfig& c, const std::optional<distill::OneShotSelectorNet>& student,
                                  const std::optional<selector::IterativeSelectorNet>& ims) {
  if (c.variant == Variant::kModecI) {
    if (!ims) throw CheckpointError("modec_i needs the iterative selector checkpoint");
    const auto& net = *ims;
    return [&net](const diffcore::Tensor& s, const modnet::TaskContext& t, std::size_t k) {
      return distill::teacher_mask(net, s, t, k);
    };
  }
  if (!student) throw CheckpointError("this variant needs the one-shot selector checkpoint");
  return device::student_selector(*student);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Device-adaptive modular policies: training, adaptation and constrained evaluation"};
  app.require_subcommand(1);
  Overrides o;

  std::string config, out, pretrained, out_base, out_ims, base_path, ims_path, ms_path, profile_path;
  std::vector<double> constraints;
  bool no_resume = false;
  std::size_t shots = 20;

  auto* pre = app.add_subcommand("pretrain", "multi-task SAC with the full mask");
  pre->add_option("--config", config, "experiment config")->required()->check(CLI::ExistingFile);
  pre->add_option("--out", out, "checkpoint to write")->required();
  o.attach(pre);

  auto* joint = app.add_subcommand("joint", "joint base and iterative-selector training");
  joint->add_option("--pretrained", pretrained, "pretrain checkpoint")->required();
  joint->add_option("--config", config, "experiment config")->required()->check(CLI::ExistingFile);
  joint->add_option("--out-base", out_base, "base checkpoint to write")->required();
  joint->add_option("--out-ims", out_ims, "iterative selector checkpoint to write")->required();
  o.attach(joint);

  auto* dist = app.add_subcommand("distill", "distill the one-shot selector");
  dist->add_option("--base", base_path, "joint base checkpoint")->required();
  dist->add_option("--ims", ims_path, "teacher checkpoint; omit for modec_o");
  dist->add_option("--config", config, "experiment config")->required()->check(CLI::ExistingFile);
  dist->add_option("--out", out, "checkpoint to write")->required();
  o.attach(dist);

  auto* adapt = app.add_subcommand("adapt", "fit the device adapter for one profile");
  adapt->add_option("--profile", profile_path, "device profile")->required()->check(CLI::ExistingFile);
  adapt->add_option("--base", base_path, "joint base checkpoint")->required();
  adapt->add_option("--ms", ms_path, "one-shot selector checkpoint")->required();
  adapt->add_option("--config", config, "experiment config; defaults apply when omitted");
  adapt->add_option("--out", out, "checkpoint to write")->required();
  o.attach(adapt);

  auto* eval = app.add_subcommand("eval", "constrained evaluation from stage checkpoints in the output directory");
  eval->add_option("--config", config, "experiment config")->required()->check(CLI::ExistingFile);
  eval->add_option("--profile", profile_path, "evaluate only this profile")->check(CLI::ExistingFile);
  eval->add_option("--constraints", constraints, "budgets in ms for --profile");
  o.attach(eval);

  auto* pipe = app.add_subcommand("pipeline", "every stage, then evaluation; resumes by default");
  pipe->add_option("--config", config, "experiment config")->required()->check(CLI::ExistingFile);
  pipe->add_flag("--no-resume", no_resume, "retrain every stage");
  o.attach(pipe);

  auto* bench = app.add_subcommand("bench", "latency curve of a profile as CSV");
  bench->add_option("--profile", profile_path, "device profile")->required()->check(CLI::ExistingFile);
  bench->add_option("--config", config, "experiment config for the network shape");
  bench->add_option("--base", base_path, "base checkpoint; an untrained net when omitted");
  bench->add_option("--ms", ms_path, "one-shot selector checkpoint; untrained when omitted");
  bench->add_option("--shots", shots, "measurements per K")->check(CLI::PositiveNumber);
  o.attach(bench);

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) {
      const auto c = config_or_default(config, o);
      const auto r = mtrl::pretrain(c.suite, c.shape, c.pretrain, c.seed,
                                    [](const mtrl::MetricsRow& row) { emit(metrics_json(row)); });
      saved(out, pack_pretrain(r, c.seed, stage_hash(c, Stage::kPretrain)));
    } else if (joint->parsed()) {
      const auto c = config_or_default(config, o);
      const auto p = unpack_pretrain(load_checkpoint(pretrained, stage_hash(c, Stage::kPretrain)),
                                     c.joint.sac.alpha_lr);
      const auto r = selector::joint_learn(c.suite, p, c.joint, c.seed,
                                           [](const selector::JointMetricsRow& row) { emit(metrics_json(row)); });
      const auto h = stage_hash(c, Stage::kJoint);
      saved(out_base, pack_joint_base(r, c.seed, h));
      saved(out_ims, pack_ims(r.ims, c.seed, h));
    } else if (dist->parsed()) {
      const auto c = config_or_default(config, o);
      const auto h = stage_hash(c, Stage::kJoint);
      const auto base = unpack_policy(load_checkpoint(base_path, h));
      std::optional<selector::IterativeSelectorNet> teacher;
      if (!ims_path.empty()) teacher = unpack_ims(load_checkpoint(ims_path, h));
      if (!teacher && c.variant != Variant::kModecO) {
        throw ConfigError("--ims is required unless the variant is modec_o");
      }
      const auto r = distill::distill_train(c.suite, base, teacher ? &*teacher : nullptr, c.distill, c.seed,
                                            [](const distill::DistillMetricsRow& row) { emit(metrics_json(row)); });
      saved(out, pack_student(r.student, c.seed, stage_hash(c, Stage::kDistill)));
    } else if (adapt->parsed()) {
      const auto c = config_or_default(config, o);
      const auto profile = device::load_profile(profile_path);
      const auto base = unpack_policy(load_checkpoint(base_path));
      const auto student = unpack_student(load_checkpoint(ms_path));
      const auto tag = "adapt/" + profile.name;
      const auto r = device::adapt(c.suite, profile, base, student, c.adapt, diffcore::derive_seed(c.seed, tag));
      for (std::size_t k = 1; k <= base.shape().module_count(); ++k) {
        emit({{"K_budget_ms", profile.expected_ms(k)},
              {"predicted_K", r.adapter.predict(profile.expected_ms(k))},
              {"deployed_K", r.adapter.deployed_k(profile.expected_ms(k))}});
      }
      saved(out, pack_adapter(r.adapter, profile, c.seed, adapter_hash(c, profile)));
    } else if (eval->parsed()) {
      auto c = config_or_default(config, o);
      if (!profile_path.empty()) {
        if (constraints.empty()) throw ConfigError("--profile needs --constraints");
        c.devices = {{device::load_profile(profile_path), profile_path, constraints}};
      }
      const fs::path dir = c.out_dir;
      const auto base = unpack_policy(load_checkpoint(joint_base_path(dir), stage_hash(c, Stage::kJoint)));
      std::optional<selector::IterativeSelectorNet> ims;
      std::optional<distill::OneShotSelectorNet> student;
      if (c.variant == Variant::kModecI) {
        ims = unpack_ims(load_checkpoint(joint_ims_path(dir), stage_hash(c, Stage::kJoint)));
      } else {
        student = unpack_student(load_checkpoint(distill_path(dir, c.variant != Variant::kModecO),
                                                 stage_hash(c, Stage::kDistill)));
      }
      const auto select = selector_for(c, student, ims);
      std::vector<device::DeviceAdapterNet> adapters;
      for (const auto& spec : c.devices) {
        if (c.variant == Variant::kFixedK) break;
        adapters.push_back(unpack_adapter(load_checkpoint(
            adapter_path(dir, spec.profile.name, c.variant == Variant::kModecI), adapter_hash(c, spec.profile))));
      }
      std::size_t next = 0;
      const auto report = evaluate_devices(c, base, [&](const DeviceSpec&) -> Deployment {
        if (c.variant == Variant::kFixedK) {
          const auto k = c.eval.fixed_k;
          return {select, [k](double) { return k; }};
        }
        const auto* a = &adapters.at(next++);
        return {select, [a](double budget) { return a->deployed_k(budget); }};
      });
      report_emit(report, report_stem(dir, c.variant));
      std::cout << report_csv(report);
    } else if (pipe->parsed()) {
      const auto c = config_or_default(config, o);
      const auto r = run_pipeline(c, {.resume = !no_resume, .write_metrics = true, .log = &std::cerr});
      for (const auto& s : r.stages) {
        if (!s.checkpoint_hash.empty()) std::cerr << s.name << " checkpoint " << s.checkpoint_hash << '\n';
      }
      std::cout << report_csv(r.report);
    } else if (bench->parsed()) {
      const auto c = config_or_default(config, o);
      const auto profile = device::load_profile(profile_path);
      std::mt19937_64 init(diffcore::derive_seed(c.seed, "bench/init"));
      const auto base = base_path.empty() ? modnet::ModularPolicyNet(c.shape, init)
                                          : unpack_policy(load_checkpoint(base_path));
      const auto n = base.shape().module_count();
      const auto student =
          ms_path.empty()
              ? distill::OneShotSelectorNet({base.shape().state_dim, base.shape().task_count, n, c.distill.hidden}, init)
              : unpack_student(load_checkpoint(ms_path));
      const auto states = selector::sample_states(c.suite, shots, diffcore::derive_seed(c.seed, "bench/states"));
      std::mt19937_64 noise(diffcore::derive_seed(c.seed, "bench/noise"));
      std::printf("device,K,expected_ms,mean_ms,std_ms,flops\n");
      for (std::size_t k = 1; k <= n; ++k) {
        double sum = 0.0, sq = 0.0;
        std::uint64_t flops = 0;
        for (const auto& s : states) {
          const auto m = device::measure_latency(profile, base, student, s.state,
                                                 modnet::TaskContext(s.task, base.shape().task_count), k, noise);
          sum += m.latency_ms;
          sq += m.latency_ms * m.latency_ms;
          flops = base.flops(m.mask);
        }
        const double mean = sum / static_cast<double>(shots);
        const double var = shots > 1 ? (sq - sum * mean) / static_cast<double>(shots - 1) : 0.0;
        std::printf("%s,%zu,%.17g,%.17g,%.17g,%llu\n", profile.name.c_str(), k, profile.expected_ms(k), mean,
                    std::sqrt(std::max(var, 0.0)), static_cast<unsigned long long>(flops));
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
