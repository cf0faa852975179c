#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spfl/sim.hpp"

namespace spfl {

// Flat key-value experiment configuration with [section] headers.
// Unknown sections or keys are parse errors (reported with line numbers).
struct ExperimentConfig {
  // [dataset]
  std::string dataset = "synth";  // mnist | cifar10 | synth
  std::string data_root;          // falls back to $SPFL_DATA_DIR, then "data"
  int clients_cap = 1000;         // per-client sample cap, 0 = all
  int test_cap = 1000;            // evaluation set cap, 0 = all
  int synth_train = 12000;
  int synth_test = 1000;
  // [model]
  std::string arch = "auto";  // auto | mnist_cnn | cifar_resnet | file:PATH
  // [federation]
  int clients = 10;
  int rounds = 15;
  int epochs = 2;
  int batch = 64;
  double lr = 0.1;
  uint64_t seed = 1;
  int threads = 0;
  // [defense]
  Defense defense = Defense::FedAvg;
  std::string eval = "auto";  // auto | global | ensemble
  // [aggregator]
  std::string aggregator = "auto";  // auto | FedAvg | Median | RFA | RLR
  double eta = 1.0;
  int theta = 4;
  int weiszfeld_iters = 100;
  double weiszfeld_eps = 1e-6;
  // [distill]
  double tau = 4.0;
  double beta_kd = 1.0;
  double beta_at = 1.0;
  // [attack]
  std::string attack_name;    // canonical Table row, empty = use fields below
  std::string attack_method;  // DPA | MPA | DBA | LIE | none
  int adversaries = 0;
  std::string schedule = "every";  // every | every:K | once:A/B |
                                   // staggered:A,B,../D | rounds:1,3,5
  double gamma = 1.0;
  int poison_per_batch = 20;
  double lie_z = 1.5;
  // [trigger]
  std::string trigger_rows;  // row-strings of 0/1, comma separated
  double trigger_value = 1.0;
  int trigger_row = -1;  // -1 = lower-right corner placement
  int trigger_col = -1;
  int target = 0;
  // [output]
  std::string out_dir = "out/run";
  bool plots = true;

  std::string to_text() const;
};

ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);

// One row of the canonical attack table.
struct CanonicalAttack {
  std::string name;
  AttackMethod method;
  int adversaries;
  std::string schedule_mnist;  // against the paper timeline T=30
  std::string schedule_cifar;  // against T=80
  double gamma;
};

const std::vector<CanonicalAttack>& canonical_attacks();
const CanonicalAttack& canonical_attack(const std::string& name);

// Overwrite the attack fields of `cfg` from a canonical row.
void apply_canonical_attack(ExperimentConfig& cfg, const std::string& name);

// Build the resolved attack plan (schedules mapped onto [0,T), triggers
// sized and DBA-decomposed) for the configured dataset geometry.
std::optional<AttackPlan> resolve_attack_plan(const ExperimentConfig& cfg,
                                              int image_h, int image_w,
                                              int num_classes);

// Parse a schedule string against T rounds.
std::set<int> resolve_schedule(const std::string& schedule, int rounds,
                               bool* staggered);

NetworkSpec resolve_network(const ExperimentConfig& cfg);
SimConfig resolve_sim_config(const ExperimentConfig& cfg,
                             const std::optional<AttackPlan>& plan);

}  // namespace spfl
