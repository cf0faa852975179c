#pragma once

#include <string>
#include <vector>

#include "spfl/expcfg.hpp"
#include "spfl/report.hpp"
#include "spfl/sim.hpp"

namespace spfl {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kDataRootEnv = "SPFL_DATA_DIR";

struct LoadedData {
  Dataset train;
  Dataset test;
};

// Dataset root resolution: config value, then $SPFL_DATA_DIR, then "data".
std::string dataset_root(const ExperimentConfig& cfg);

// Loads (or synthesizes) the configured dataset pair.
LoadedData load_datasets(const ExperimentConfig& cfg);

struct ExperimentResult {
  std::vector<RoundRecord> records;
  std::string out_dir;
};

// Full experiment: load data, build the simulation, run all rounds, and
// persist metrics.csv, manifest.json, net.spec, checkpoints and plots
// under cfg.out_dir.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

// manifest.json contents for a run (config text + seed + version).
std::string run_manifest_json(const ExperimentConfig& cfg);

// Reads the config text back out of a run directory's manifest.
ExperimentConfig config_from_manifest(const std::string& run_dir);

}  // namespace spfl
