#include "modec/harness/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "modec/diffcore/seed.hpp"

namespace modec::harness {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct EpisodeTally {
  bool success = false;
  std::size_t steps = 0;
  std::size_t violations = 0;
  std::uint64_t flops = 0;
  std::uint64_t k_sum = 0;
};

constexpr const char* kHeader = "device,constraint_ms,success_rate,ci95,flops,violation_rate,mean_K";

}  // namespace

double ci95(double p, std::size_t n) {
  if (n == 0) throw std::invalid_argument("confidence interval over zero episodes");
  return 1.96 * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

EvalCell evaluate_cell(const envs::SuiteConfig& suite, const modnet::ModularPolicyNet& base,
                       const device::MaskSelector& select, const KPolicy& k_policy,
                       const device::DeviceProfile& profile, double constraint_ms,
                       std::size_t episodes, std::uint64_t seed, std::size_t workers) {
  if (episodes == 0) throw std::invalid_argument("evaluation needs at least one episode");
  const std::string tag = "eval/" + profile.name + "/" + num(constraint_ms);
  const auto task_count = base.shape().task_count;

  // Every episode owns its env and noise streams, so results do not depend on
  // which worker runs it.
  auto run_episode = [&](std::size_t e) {
    envs::SuiteConfig env_cfg = suite;
    env_cfg.seed = diffcore::derive_seed(seed, tag + "/env/" + std::to_string(e));
    envs::EnvSuite env(env_cfg);
    std::mt19937_64 noise(diffcore::derive_seed(seed, tag + "/noise/" + std::to_string(e)));
    EpisodeTally t;
    auto obs = env.reset_task(e % task_count);
    while (true) {
      const modnet::TaskContext task(obs.task, task_count);
      const auto k = k_policy(constraint_ms);
      const auto m = device::measure_latency(profile, base, select, obs.state, task, k, noise);
      t.violations += m.latency_ms > constraint_ms;
      t.flops += base.flops(m.mask);
      t.k_sum += k;
      ++t.steps;
      const auto r = env.step(m.action.values());
      obs.state = r.state;
      if (r.done) {
        t.success = r.success;
        return t;
      }
    }
  };

  std::vector<EpisodeTally> tallies(episodes);
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, episodes);
  if (workers == 1) {
    for (std::size_t e = 0; e < episodes; ++e) tallies[e] = run_episode(e);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t e; (e = next.fetch_add(1)) < episodes;) tallies[e] = run_episode(e);
          } catch (...) {
            errors[w] = std::current_exception();
            next = episodes;
          }
        });
      }
    }
    for (const auto& err : errors)
      if (err) std::rethrow_exception(err);
  }

  EpisodeTally sum;
  std::size_t wins = 0;
  for (const auto& t : tallies) {
    wins += t.success;
    sum.steps += t.steps;
    sum.violations += t.violations;
    sum.flops += t.flops;
    sum.k_sum += t.k_sum;
  }
  EvalCell cell;
  cell.device = profile.name;
  cell.constraint_ms = constraint_ms;
  cell.episodes = episodes;
  cell.infeasible = constraint_ms < profile.expected_ms(1);
  const auto steps = static_cast<double>(sum.steps);
  cell.success_rate = static_cast<double>(wins) / static_cast<double>(episodes);
  cell.ci95 = ci95(cell.success_rate, episodes);
  cell.flops = static_cast<double>(sum.flops) / steps;
  cell.violation_rate = static_cast<double>(sum.violations) / steps;
  cell.mean_k = static_cast<double>(sum.k_sum) / steps;
  return cell;
}

void sort_cells(EvalReport& report) {
  std::stable_sort(report.cells.begin(), report.cells.end(), [](const EvalCell& a, const EvalCell& b) {
    return a.device != b.device ? a.device < b.device : a.constraint_ms < b.constraint_ms;
  });
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream out;
  out << kHeader << '\n';
  for (const auto& c : report.cells) {
    out << c.device << ',' << num(c.constraint_ms) << ',' << num(c.success_rate) << ','
        << num(c.ci95) << ',' << num(c.flops) << ',' << num(c.violation_rate) << ','
        << num(c.mean_k) << '\n';
  }
  return out.str();
}

EvalReport parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader) throw std::runtime_error("report CSV header mismatch");
  EvalReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() != 7) throw std::runtime_error("report CSV row with " + std::to_string(f.size()) + " fields");
    EvalCell c;
    c.device = f[0];
    c.constraint_ms = std::stod(f[1]);
    c.success_rate = std::stod(f[2]);
    c.ci95 = std::stod(f[3]);
    c.flops = std::stod(f[4]);
    c.violation_rate = std::stod(f[5]);
    c.mean_k = std::stod(f[6]);
    report.cells.push_back(c);
  }
  return report;
}

std::string report_jsonl(const EvalReport& report) {
  std::string out;
  for (const auto& c : report.cells) {
    nlohmann::ordered_json j{{"device", c.device},
                             {"constraint_ms", c.constraint_ms},
                             {"success_rate", c.success_rate},
                             {"ci95", c.ci95},
                             {"flops", c.flops},
                             {"violation_rate", c.violation_rate},
                             {"mean_K", c.mean_k},
                             {"episodes", c.episodes},
                             {"infeasible", c.infeasible}};
    out += j.dump() + "\n";
  }
  return out;
}

void report_emit(const EvalReport& report, const std::filesystem::path& stem) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  for (const auto& [ext, body] : {std::pair{".csv", report_csv(report)},
                                  std::pair{".jsonl", report_jsonl(report)}}) {
    const auto path = stem.string() + ext;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write report " + path);
    out << body;
    if (!out) throw std::runtime_error("failed writing report " + path);
  }
}

}  // namespace modec::harness
