#include "modec/harness/pipeline.hpp"

#include <chrono>
#include <fstream>

#include "modec/diffcore/seed.hpp"

namespace modec::harness {

namespace fs = std::filesystem;

namespace {

class JsonlFile {
 public:
  JsonlFile(const fs::path& path, bool enabled) {
    if (!enabled) return;
    fs::create_directories(path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw PipelineError("cannot write metrics file " + path.string());
  }
  template <typename Row>
  void write(const Row& row) {
    if (out_.is_open()) out_ << metrics_json(row).dump() << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
};

template <typename Fn>
auto in_stage(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError("stage " + name + " failed: " + e.what());
  }
}

/// The stored checkpoint when resuming and its hash matches.
std::optional<Checkpoint> reusable(const fs::path& path, const std::string& hash,
                                   const PipelineOptions& o) {
  if (!o.resume || !fs::exists(path)) return std::nullopt;
  auto ck = load_checkpoint(path, hash);
  if (ck.config_hash != hash) {
    if (o.log) *o.log << "retraining " << path.filename().string() << " (configuration changed)\n";
    return std::nullopt;
  }
  return ck;
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

void note(const PipelineOptions& o, const StageRecord& r, const Timer& t) {
  if (o.log) {
    const char* verb = r.reused ? "reused" : (r.checkpoint_hash.empty() ? "ran" : "trained");
    *o.log << "[" << r.name << "] " << verb << " in " << t.seconds()
           << " s, config " << r.config_hash << '\n';
  }
}

device::MaskSelector iterative_selector(const selector::IterativeSelectorNet& ims) {
  return [&ims](const diffcore::Tensor& s, const modnet::TaskContext& t, std::size_t k) {
    return distill::teacher_mask(ims, s, t, k);
  };
}

}  // namespace

fs::path pretrain_path(const fs::path& dir) { return dir / "pretrain.ckpt.json"; }
fs::path joint_base_path(const fs::path& dir) { return dir / "joint_base.ckpt.json"; }
fs::path joint_ims_path(const fs::path& dir) { return dir / "joint_ims.ckpt.json"; }

fs::path distill_path(const fs::path& dir, bool with_teacher) {
  return dir / (with_teacher ? "distill.ckpt.json" : "distill_scratch.ckpt.json");
}

fs::path adapter_path(const fs::path& dir, const std::string& device, bool iterative) {
  return dir / ("adapt_" + device + (iterative ? "_ims" : "") + ".ckpt.json");
}

fs::path report_stem(const fs::path& dir, Variant v) { return dir / ("report_" + variant_name(v)); }

std::string adapter_hash(const ExperimentConfig& c, const device::DeviceProfile& p) {
  const auto h = diffcore::fnv1a(stage_hash(c, Stage::kAdapt) + "|" + device::profile_to_json(p));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

EvalReport evaluate_devices(const ExperimentConfig& c, const modnet::ModularPolicyNet& base,
                            const std::function<Deployment(const DeviceSpec&)>& deployment_for) {
  EvalReport report;
  for (const auto& spec : c.devices) {
    const auto d = deployment_for(spec);
    for (double budget : spec.constraints_ms) {
      report.cells.push_back(evaluate_cell(c.suite, base, d.select, d.k_policy, spec.profile,
                                           budget, c.eval.episodes, c.seed));
    }
  }
  sort_cells(report);
  return report;
}

PipelineResult run_pipeline(const ExperimentConfig& c, const PipelineOptions& o) {
  const fs::path& dir = c.out_dir;
  fs::create_directories(dir);
  PipelineResult out;

  // Trained outputs pass through their checkpoint so that fresh and resumed
  // runs continue from identical state.
  {
    Timer t;
    StageRecord rec{"pretrain", stage_hash(c, Stage::kPretrain), {}, false};
    const auto path = pretrain_path(dir);
    auto ck = reusable(path, rec.config_hash, o);
    rec.reused = ck.has_value();
    std::vector<mtrl::MetricsRow> metrics;
    if (!ck) {
      ck = in_stage("pretrain", [&] {
        JsonlFile log(dir / "pretrain_metrics.jsonl", o.write_metrics);
        auto r = mtrl::pretrain(c.suite, c.shape, c.pretrain, c.seed,
                                [&](const mtrl::MetricsRow& row) { log.write(row); });
        metrics = std::move(r.metrics);
        auto packed = pack_pretrain(r, c.seed, rec.config_hash);
        save_checkpoint(path, packed);
        return packed;
      });
    }
    out.pretrained = in_stage("pretrain", [&] { return unpack_pretrain(*ck, c.joint.sac.alpha_lr); });
    out.pretrained.metrics = std::move(metrics);
    rec.checkpoint_hash = checkpoint_hash(*ck);
    note(o, rec, t);
    out.stages.push_back(rec);
  }

  {
    Timer t;
    StageRecord rec{"joint", stage_hash(c, Stage::kJoint), {}, false};
    auto base_ck = reusable(joint_base_path(dir), rec.config_hash, o);
    auto ims_ck = base_ck ? reusable(joint_ims_path(dir), rec.config_hash, o) : std::nullopt;
    rec.reused = base_ck && ims_ck;
    std::vector<selector::JointMetricsRow> metrics;
    if (!rec.reused) {
      in_stage("joint", [&] {
        JsonlFile log(dir / "joint_metrics.jsonl", o.write_metrics);
        auto r = selector::joint_learn(c.suite, out.pretrained, c.joint, c.seed,
                                       [&](const selector::JointMetricsRow& row) { log.write(row); });
        metrics = std::move(r.metrics);
        base_ck = pack_joint_base(r, c.seed, rec.config_hash);
        ims_ck = pack_ims(r.ims, c.seed, rec.config_hash);
        save_checkpoint(joint_base_path(dir), *base_ck);
        save_checkpoint(joint_ims_path(dir), *ims_ck);
        return 0;
      });
    }
    in_stage("joint", [&] {
      auto agent = unpack_pretrain(*base_ck, c.joint.sac.alpha_lr);
      out.joint = {std::move(agent.policy), unpack_ims(*ims_ck), std::move(agent.critics),
                   std::move(agent.temperatures), std::move(metrics)};
      return 0;
    });
    rec.checkpoint_hash = checkpoint_hash(*base_ck);
    note(o, rec, t);
    out.stages.push_back(rec);
  }
  const auto& base = out.joint.base;
  const auto& ims = out.joint.ims;

  if (c.variant != Variant::kModecI) {
    Timer t;
    const bool teacher = c.variant != Variant::kModecO;
    StageRecord rec{"distill", stage_hash(c, Stage::kDistill), {}, false};
    const auto path = distill_path(dir, teacher);
    auto ck = reusable(path, rec.config_hash, o);
    rec.reused = ck.has_value();
    std::vector<distill::DistillMetricsRow> metrics;
    if (!ck) {
      ck = in_stage("distill", [&] {
        JsonlFile log(dir / (teacher ? "distill_metrics.jsonl" : "distill_scratch_metrics.jsonl"),
                      o.write_metrics);
        auto r = distill::distill_train(c.suite, base, teacher ? &ims : nullptr, c.distill, c.seed,
                                        [&](const distill::DistillMetricsRow& row) { log.write(row); });
        metrics = std::move(r.metrics);
        auto packed = pack_student(r.student, c.seed, rec.config_hash);
        save_checkpoint(path, packed);
        return packed;
      });
    }
    out.distilled = distill::DistillResult{in_stage("distill", [&] { return unpack_student(*ck); }),
                                           std::move(metrics)};
    rec.checkpoint_hash = checkpoint_hash(*ck);
    note(o, rec, t);
    out.stages.push_back(rec);
  }

  const bool iterative = c.variant == Variant::kModecI;
  const auto select = iterative ? iterative_selector(ims) : device::student_selector(out.distilled->student);
  if (c.variant != Variant::kFixedK) {
    for (const auto& spec : c.devices) {
      Timer t;
      const auto name = "adapt/" + spec.profile.name;
      StageRecord rec{name, adapter_hash(c, spec.profile), {}, false};
      const auto path = adapter_path(dir, spec.profile.name, iterative);
      auto ck = reusable(path, rec.config_hash, o);
      rec.reused = ck.has_value();
      std::vector<device::LatencySample> dataset;
      if (!ck) {
        ck = in_stage(name, [&] {
          auto r = device::adapt(c.suite, spec.profile, base, select, c.adapt,
                                 diffcore::derive_seed(c.seed, name));
          dataset = std::move(r.dataset);
          auto packed = pack_adapter(r.adapter, spec.profile, c.seed, rec.config_hash);
          save_checkpoint(path, packed);
          return packed;
        });
      }
      out.adapters.push_back({spec.profile.name, in_stage(name, [&] { return unpack_adapter(*ck); }),
                              std::move(dataset)});
      rec.checkpoint_hash = checkpoint_hash(*ck);
      note(o, rec, t);
      out.stages.push_back(rec);
    }
  }

  {
    Timer t;
    StageRecord rec{"eval", stage_hash(c, Stage::kAdapt), {}, false};
    out.report = in_stage("eval", [&] {
      return evaluate_devices(c, base, [&](const DeviceSpec& spec) -> Deployment {
        if (c.variant == Variant::kFixedK) {
          const auto k = c.eval.fixed_k;
          return {select, [k](double) { return k; }};
        }
        const device::DeviceAdapterNet* adapter = nullptr;
        for (const auto& a : out.adapters)
          if (a.device == spec.profile.name) adapter = &a.adapter;
        return {select, [adapter](double budget) { return adapter->deployed_k(budget); }};
      });
    });
    in_stage("eval", [&] {
      report_emit(out.report, report_stem(dir, c.variant));
      return 0;
    });
    note(o, rec, t);
    out.stages.push_back(rec);
  }
  return out;
}

}  // namespace modec::harness
