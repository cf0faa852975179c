#pragma once

#include <optional>
#include <string>
#include <vector>

#include "spfl/aggregation.hpp"
#include "spfl/attacks.hpp"
#include "spfl/dataset.hpp"
#include "spfl/distill.hpp"
#include "spfl/net.hpp"

namespace spfl {

enum class Defense { FedAvg, Median, RFA, RLR, SPFL, SPFL_oA, SPFL_NAD };

std::string to_string(Defense d);
Defense defense_from_string(const std::string& s);
bool defense_is_spfl(Defense d);
Variant defense_variant(Defense d);
Aggregator default_aggregator(Defense d);

enum class EvalMode { Auto, Global, Ensemble };

struct SimConfig {
  int clients = 10;
  int rounds = 15;
  int epochs = 2;     // E internal epochs, shared by all local updates
  int batch = 64;
  double lr = 0.1;
  uint64_t seed = 1;
  Defense defense = Defense::FedAvg;
  std::optional<AttackPlan> attack;
  DistillConfig distill;  // tau and beta finals; epochs/lr/T come from above
  AggregatorConfig agg;
  EvalMode eval_mode = EvalMode::Auto;
  int eval_batch = 256;
  int threads = 0;  // 0 = hardware concurrency
};

struct RoundRecord {
  int round = 0;
  double ma = 0, asr = 0, ba = 0;
  std::vector<double> client_ma, client_asr;  // per evaluated model
};

struct ClientState {
  int id = -1;
  bool adversary = false;
  DatasetShard shard;
  Params<float> student;
  Params<float> teacher;
  bool has_teacher = false;
};

// One federated training run: per-round local updates (self-distillation for
// benign SPFL clients, plain SGD otherwise, attack behaviors on schedule),
// aggregation of the submitted students, and metric evaluation. Client
// updates within a round run in parallel; results do not depend on the
// thread count because every client derives its own RNG stream from
// (seed, client, round).
class Simulation {
 public:
  Simulation(SimConfig cfg, NetworkSpec net, std::vector<DatasetShard> shards,
             const Dataset* clean_test);

  void run_round(int t);
  std::vector<RoundRecord> run_training();
  RoundRecord evaluate(int t) const;

  const SimConfig& config() const { return cfg_; }
  const Engine<float>& engine() const { return engine_; }
  const Params<float>& global() const { return global_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  const std::vector<RoundRecord>& records() const { return records_; }
  const TriggerSpec& eval_trigger() const { return eval_trigger_; }

 private:
  Params<float> client_update(int i, int t) const;
  BatchMaker<float> batch_maker(int client, int t) const;
  void make_triggered_test();

  SimConfig cfg_;
  Engine<float> engine_;
  std::vector<ClientState> clients_;
  Params<float> global_;
  const Dataset* clean_test_;
  Tensor<float> clean_inputs_;      // whole test set as one tensor
  std::vector<uint8_t> clean_labels_;
  Tensor<float> triggered_inputs_;  // clean test with the global trigger
  TriggerSpec eval_trigger_;
  std::vector<RoundRecord> records_;
};

// Accuracy and target-rate for one model (or ensemble) over prepared inputs.
struct EvalResult {
  double accuracy = 0;
  double target_rate = 0;
};

EvalResult evaluate_model(const Engine<float>& engine,
                          const Params<float>& params,
                          const Tensor<float>& clean_inputs,
                          const std::vector<uint8_t>& labels,
                          const Tensor<float>& triggered_inputs, int target,
                          int eval_batch);

EvalResult evaluate_ensemble(const Engine<float>& engine,
                             const Params<float>& teacher,
                             const Params<float>& student,
                             const Tensor<float>& clean_inputs,
                             const std::vector<uint8_t>& labels,
                             const Tensor<float>& triggered_inputs, int target,
                             int eval_batch);

}  // namespace spfl
