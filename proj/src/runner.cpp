#include "spfl/runner.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "spfl/checkpoint.hpp"
#include "spfl/errors.hpp"

namespace fs = std::filesystem;

namespace spfl {

std::string dataset_root(const ExperimentConfig& cfg) {
  if (!cfg.data_root.empty()) return cfg.data_root;
  if (const char* env = std::getenv(kDataRootEnv); env != nullptr && *env)
    return env;
  return "data";
}

LoadedData load_datasets(const ExperimentConfig& cfg) {
  LoadedData out;
  if (cfg.dataset == "synth") {
    out.train = synth_digits(cfg.synth_train, cfg.seed ^ 0xA11CE, true);
    out.test = synth_digits(cfg.synth_test, cfg.seed ^ 0xB0B0, true);
    out.train.tag = "synth-train";
    out.test.tag = "synth-test";
  } else if (cfg.dataset == "mnist") {
    std::string root = dataset_root(cfg);
    out.train = load_idx_dir(root, "train");
    out.test = load_idx_dir(root, "t10k");
  } else if (cfg.dataset == "cifar10") {
    std::string root = dataset_root(cfg);
    out.train = load_cifar_dir(root, true);
    out.test = load_cifar_dir(root, false);
  } else {
    throw ConfigError("unknown dataset '" + cfg.dataset + "'");
  }
  return out;
}

std::string run_manifest_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["tool"] = "spfl";
  j["version"] = kVersion;
  j["format"] = 1;
  j["seed"] = cfg.seed;
  j["config"] = cfg.to_text();
  return j.dump(2);
}

ExperimentConfig config_from_manifest(const std::string& run_dir) {
  std::ifstream is(run_dir + "/manifest.json");
  if (!is) throw FormatError("cannot open " + run_dir + "/manifest.json");
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded() || !j.contains("config"))
    throw FormatError(run_dir + "/manifest.json is not a run manifest");
  return parse_experiment_config(j["config"].get<std::string>());
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  // resolve everything before touching the output directory
  LoadedData data = load_datasets(cfg);
  NetworkSpec net = resolve_network(cfg);
  auto plan = resolve_attack_plan(cfg, data.test.height, data.test.width,
                                  data.test.num_classes);
  SimConfig sim_cfg = resolve_sim_config(cfg, plan);

  std::vector<DatasetShard> shards =
      iid_partition(data.train, cfg.clients, cfg.seed);
  if (cfg.clients_cap > 0) {
    for (auto& s : shards) {
      Rng r = Rng::derive(cfg.seed, {stream::kPartition,
                                     static_cast<uint64_t>(s.owner) + 1});
      s = stratified_cap(s, cfg.clients_cap, r);
    }
  }
  Dataset test = cfg.test_cap > 0
                     ? stratified_subset(data.test, cfg.test_cap, cfg.seed)
                     : std::move(data.test);

  Simulation sim(sim_cfg, net, std::move(shards), &test);

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream os(cfg.out_dir + "/manifest.json");
    os << run_manifest_json(cfg) << '\n';
  }
  {
    std::ofstream os(cfg.out_dir + "/net.spec");
    os << net.to_text();
  }

  ExperimentResult result;
  result.out_dir = cfg.out_dir;
  result.records = sim.run_training();

  write_metrics_csv(cfg.out_dir + "/metrics.csv", result.records);
  save_checkpoint(cfg.out_dir + "/global.ckpt", sim.global());
  for (const auto& c : sim.clients()) {
    if (c.student.manifest)
      save_checkpoint(cfg.out_dir + "/client" + std::to_string(c.id) +
                          "_student.ckpt",
                      c.student);
    if (c.has_teacher)
      save_checkpoint(cfg.out_dir + "/client" + std::to_string(c.id) +
                          "_teacher.ckpt",
                      c.teacher);
  }
  if (cfg.plots) {
    std::vector<double> ma, asr;
    for (const auto& r : result.records) {
      ma.push_back(r.ma);
      asr.push_back(r.asr);
    }
    std::string label = to_string(cfg.defense);
    write_line_chart_svg(cfg.out_dir + "/ma.svg", "Main task accuracy", "MA",
                         {{label, ma}});
    write_line_chart_svg(cfg.out_dir + "/asr.svg", "Attack success rate",
                         "ASR", {{label, asr}});
  }
  return result;
}

}  // namespace spfl
