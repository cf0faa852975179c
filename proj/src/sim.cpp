#include "spfl/sim.hpp"

#include <atomic>
#include <cmath>
#include <thread>

#include "spfl/errors.hpp"

namespace spfl {

std::string to_string(Defense d) {
  switch (d) {
    case Defense::FedAvg: return "FedAvg";
    case Defense::Median: return "Median";
    case Defense::RFA: return "RFA";
    case Defense::RLR: return "RLR";
    case Defense::SPFL: return "SPFL";
    case Defense::SPFL_oA: return "SPFL_oA";
    case Defense::SPFL_NAD: return "SPFL_NAD";
  }
  return "?";
}

Defense defense_from_string(const std::string& s) {
  if (s == "FedAvg") return Defense::FedAvg;
  if (s == "Median") return Defense::Median;
  if (s == "RFA") return Defense::RFA;
  if (s == "RLR") return Defense::RLR;
  if (s == "SPFL") return Defense::SPFL;
  if (s == "SPFL_oA") return Defense::SPFL_oA;
  if (s == "SPFL_NAD") return Defense::SPFL_NAD;
  throw ConfigError("unknown defense '" + s + "'");
}

bool defense_is_spfl(Defense d) {
  return d == Defense::SPFL || d == Defense::SPFL_oA || d == Defense::SPFL_NAD;
}

Variant defense_variant(Defense d) {
  switch (d) {
    case Defense::SPFL_oA: return Variant::SPFL_oA;
    case Defense::SPFL_NAD: return Variant::SPFL_NAD;
    default: return Variant::SPFL;
  }
}

Aggregator default_aggregator(Defense d) {
  switch (d) {
    case Defense::Median: return Aggregator::Median;
    case Defense::RFA: return Aggregator::RFA;
    case Defense::RLR: return Aggregator::RLR;
    default: return Aggregator::FedAvg;  // SPFL runs on plain averaging
  }
}

namespace {

void parallel_for(int tasks, int threads, const std::function<void(int)>& fn) {
  if (threads <= 0)
    threads = static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, tasks));
  if (threads == 1) {
    for (int i = 0; i < tasks; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&]() {
      for (;;) {
        int i = next.fetch_add(1);
        if (i >= tasks) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<int> predict_batched(const Engine<float>& engine,
                                 const Params<float>* a,
                                 const Params<float>* b,
                                 const Tensor<float>& inputs, int eval_batch) {
  const int n = inputs.dim(0);
  const int c = inputs.dim(1), h = inputs.dim(2), w = inputs.dim(3);
  const size_t px = static_cast<size_t>(c) * h * w;
  const int k = engine.spec().num_classes;
  std::vector<int> preds(static_cast<size_t>(n));
  for (int pos = 0; pos < n; pos += eval_batch) {
    int take = std::min(eval_batch, n - pos);
    Tensor<float> chunk({take, c, h, w});
    std::copy_n(inputs.ptr() + static_cast<size_t>(pos) * px,
                static_cast<size_t>(take) * px, chunk.ptr());
    Mat<float> z = engine.forward(*a, chunk, nullptr);
    if (b != nullptr) {
      Mat<float> z2 = engine.forward(*b, chunk, nullptr);
      for (size_t j = 0; j < z.size(); ++j) z[j] = (z[j] + z2[j]) / 2.0f;
    }
    for (int i = 0; i < take; ++i)
      preds[static_cast<size_t>(pos + i)] =
          argmax_lowest(z.ptr() + static_cast<size_t>(i) * k, k);
  }
  return preds;
}

EvalResult score(const std::vector<int>& clean_preds,
                 const std::vector<int>& trig_preds,
                 const std::vector<uint8_t>& labels, int target) {
  EvalResult r;
  size_t n = labels.size();
  size_t ok = 0, hit = 0;
  for (size_t i = 0; i < n; ++i) {
    ok += clean_preds[i] == labels[i];
    hit += trig_preds[i] == target;
  }
  r.accuracy = static_cast<double>(ok) / static_cast<double>(n);
  r.target_rate = static_cast<double>(hit) / static_cast<double>(n);
  return r;
}

}  // namespace

EvalResult evaluate_model(const Engine<float>& engine,
                          const Params<float>& params,
                          const Tensor<float>& clean_inputs,
                          const std::vector<uint8_t>& labels,
                          const Tensor<float>& triggered_inputs, int target,
                          int eval_batch) {
  auto cp = predict_batched(engine, &params, nullptr, clean_inputs, eval_batch);
  auto tp =
      predict_batched(engine, &params, nullptr, triggered_inputs, eval_batch);
  return score(cp, tp, labels, target);
}

EvalResult evaluate_ensemble(const Engine<float>& engine,
                             const Params<float>& teacher,
                             const Params<float>& student,
                             const Tensor<float>& clean_inputs,
                             const std::vector<uint8_t>& labels,
                             const Tensor<float>& triggered_inputs, int target,
                             int eval_batch) {
  auto cp =
      predict_batched(engine, &teacher, &student, clean_inputs, eval_batch);
  auto tp =
      predict_batched(engine, &teacher, &student, triggered_inputs, eval_batch);
  return score(cp, tp, labels, target);
}

Simulation::Simulation(SimConfig cfg, NetworkSpec net,
                       std::vector<DatasetShard> shards,
                       const Dataset* clean_test)
    : cfg_(std::move(cfg)), engine_(std::move(net)), clean_test_(clean_test) {
  if (cfg_.clients < 2) throw ConfigError("simulation needs at least 2 clients");
  if (cfg_.rounds < 1) throw ConfigError("simulation needs at least 1 round");
  if (static_cast<int>(shards.size()) != cfg_.clients)
    throw ConfigError("shard count does not match client count");
  if (clean_test_ == nullptr || clean_test_->size() == 0)
    throw ConfigError("simulation needs a non-empty test set");

  cfg_.distill.epochs = cfg_.epochs;
  cfg_.distill.lr = cfg_.lr;
  cfg_.distill.total_rounds = cfg_.rounds;
  cfg_.distill.variant = defense_variant(cfg_.defense);

  if (cfg_.attack) {
    cfg_.attack->validate(cfg_.clients, cfg_.rounds, clean_test_->height,
                          clean_test_->width, clean_test_->num_classes);
  }

  clients_.resize(static_cast<size_t>(cfg_.clients));
  for (int i = 0; i < cfg_.clients; ++i) {
    auto& c = clients_[static_cast<size_t>(i)];
    c.id = i;
    c.shard = std::move(shards[static_cast<size_t>(i)]);
    c.adversary = cfg_.attack && cfg_.attack->is_adversary(i);
  }

  Rng init_rng = Rng::derive(cfg_.seed, {stream::kInit});
  global_ = engine_.init_params(init_rng);

  // Test tensors are fixed up front; evaluation consumes no randomness.
  const auto& t = *clean_test_;
  clean_inputs_ = Tensor<float>({static_cast<int>(t.size()), t.channels,
                                 t.height, t.width},
                                t.images);
  clean_labels_ = t.labels;
  make_triggered_test();
}

void Simulation::make_triggered_test() {
  eval_trigger_ = cfg_.attack
                      ? cfg_.attack->trigger
                      : TriggerSpec::default_for(clean_test_->height,
                                                 clean_test_->width, 0);
  triggered_inputs_ = clean_inputs_;
  stamp_trigger(eval_trigger_, triggered_inputs_);
}

BatchMaker<float> Simulation::batch_maker(int client, int t) const {
  const DatasetShard* shard = &clients_[static_cast<size_t>(client)].shard;
  uint64_t seed = cfg_.seed;
  int batch = cfg_.batch;
  return [shard, seed, client, t, batch](int epoch) {
    Rng rng = Rng::derive(seed, {stream::kBatches, static_cast<uint64_t>(client),
                                 static_cast<uint64_t>(t),
                                 static_cast<uint64_t>(epoch)});
    return epoch_batches(*shard, batch, rng);
  };
}

Params<float> Simulation::client_update(int i, int t) const {
  const ClientState& c = clients_[static_cast<size_t>(i)];
  auto maker = batch_maker(i, t);
  const bool attacking = c.adversary && cfg_.attack->attacks_at(i, t);

  if (attacking) {
    const AttackPlan& plan = *cfg_.attack;
    const TriggerSpec& local = plan.trigger_for(i);
    // every attack trains a backdoored model on poisoned batches first
    Params<float> backdoored =
        dpa_client_update(engine_, global_, maker, local,
                          plan.poison_per_batch, cfg_.epochs, cfg_.lr);
    switch (plan.method) {
      case AttackMethod::DPA:
        return backdoored;  // gamma = 1 by plan
      case AttackMethod::MPA:
      case AttackMethod::DBA: {
        double share = plan.method == AttackMethod::MPA
                           ? plan.gamma / plan.attackers_at(t)
                           : plan.gamma;
        if (share == 1.0) return backdoored;
        Params<float> out = backdoored;
        out.values = mpa_scale(backdoored.values, global_.values, share);
        return out;
      }
      case AttackMethod::LIE:
        return backdoored;  // clamped later against the colluders' stats
    }
  }

  // benign behavior (also adversaries outside their schedule)
  if (!c.adversary && defense_is_spfl(cfg_.defense) && t > 0) {
    // handled in run_round (needs mutable teacher); not reached
    throw StateError("client_update: SPFL path must go through run_round");
  }
  return sgd_round(engine_, global_, maker, cfg_.epochs, cfg_.lr);
}

void Simulation::run_round(int t) {
  const int n = cfg_.clients;
  std::vector<Params<float>> submissions(static_cast<size_t>(n));
  const bool spfl = defense_is_spfl(cfg_.defense);

  std::vector<Params<float>> lie_benign(static_cast<size_t>(n));
  const bool lie_round = cfg_.attack &&
                         cfg_.attack->method == AttackMethod::LIE &&
                         cfg_.attack->attackers_at(t) > 0;

  parallel_for(n, cfg_.threads, [&](int i) {
    ClientState& c = clients_[static_cast<size_t>(i)];
    const bool attacking = c.adversary && cfg_.attack->attacks_at(i, t);
    if (!c.adversary && spfl) {
      auto maker = batch_maker(i, t);
      if (t == 0) {
        // train from scratch, then the teacher starts as the trained student
        c.student = sgd_round(engine_, global_, maker, cfg_.epochs, cfg_.lr);
        c.teacher = c.student;
        c.has_teacher = true;
      } else {
        DistillConfig dc = cfg_.distill;
        ClientModels<float> models =
            localkd_round(engine_, global_, c.teacher, maker, dc, t);
        c.teacher = std::move(models.teacher);
        c.student = std::move(models.student);
      }
      submissions[static_cast<size_t>(i)] = c.student;
      return;
    }
    submissions[static_cast<size_t>(i)] = client_update(i, t);
    c.student = submissions[static_cast<size_t>(i)];
    if (lie_round && attacking) {
      // non-omniscient LIE: the colluders estimate benign statistics from
      // their own clean-trained models
      lie_benign[static_cast<size_t>(i)] =
          sgd_round(engine_, global_, batch_maker(i, t), cfg_.epochs, cfg_.lr);
    }
  });

  if (lie_round) {
    std::vector<std::vector<float>> population;
    for (int i = 0; i < n; ++i)
      if (clients_[static_cast<size_t>(i)].adversary &&
          cfg_.attack->attacks_at(i, t))
        population.push_back(lie_benign[static_cast<size_t>(i)].values);
    std::vector<float> mu, sigma;
    population_stats(population, mu, sigma);
    for (int i = 0; i < n; ++i)
      if (clients_[static_cast<size_t>(i)].adversary &&
          cfg_.attack->attacks_at(i, t))
        submissions[static_cast<size_t>(i)].values = lie_craft(
            submissions[static_cast<size_t>(i)].values, mu, sigma,
            cfg_.attack->lie_z);
  }

  std::vector<std::vector<float>> values;
  values.reserve(static_cast<size_t>(n));
  for (auto& s : submissions) values.push_back(std::move(s.values));

  std::vector<float> next;
  switch (cfg_.agg.method) {
    case Aggregator::FedAvg:
      next = fedavg(values, cfg_.agg.weights);
      break;
    case Aggregator::Median:
      next = coordinate_median(values);
      break;
    case Aggregator::RFA:
      next = geometric_median(values, cfg_.agg.weiszfeld_iters,
                              cfg_.agg.weiszfeld_eps)
                 .value;
      break;
    case Aggregator::RLR: {
      for (auto& v : values)
        for (size_t j = 0; j < v.size(); ++j) v[j] -= global_.values[j];
      std::vector<float> delta =
          rlr_aggregate(values, cfg_.agg.theta, cfg_.agg.eta);
      next = global_.values;
      for (size_t j = 0; j < next.size(); ++j) next[j] += delta[j];
      break;
    }
  }
  for (float v : next)
    if (!std::isfinite(v))
      throw DivergenceError("non-finite aggregate at round " +
                            std::to_string(t));
  global_.values = std::move(next);
}

RoundRecord Simulation::evaluate(int t) const {
  RoundRecord rec;
  rec.round = t;
  const int target = eval_trigger_.target_label;
  bool ensemble = cfg_.eval_mode == EvalMode::Ensemble ||
                  (cfg_.eval_mode == EvalMode::Auto &&
                   defense_is_spfl(cfg_.defense));
  if (ensemble) {
    std::vector<const ClientState*> evaluated;
    for (const auto& c : clients_)
      if (!c.adversary && c.has_teacher) evaluated.push_back(&c);
    std::vector<EvalResult> results(evaluated.size());
    parallel_for(static_cast<int>(evaluated.size()), cfg_.threads, [&](int j) {
      const ClientState& c = *evaluated[static_cast<size_t>(j)];
      results[static_cast<size_t>(j)] = evaluate_ensemble(
          engine_, c.teacher, c.student, clean_inputs_, clean_labels_,
          triggered_inputs_, target, cfg_.eval_batch);
    });
    for (const auto& r : results) {
      rec.client_ma.push_back(r.accuracy);
      rec.client_asr.push_back(r.target_rate);
      rec.ma += r.accuracy;
      rec.asr += r.target_rate;
    }
    if (!results.empty()) {
      rec.ma /= static_cast<double>(results.size());
      rec.asr /= static_cast<double>(results.size());
    }
  } else {
    EvalResult r =
        evaluate_model(engine_, global_, clean_inputs_, clean_labels_,
                       triggered_inputs_, target, cfg_.eval_batch);
    rec.ma = r.accuracy;
    rec.asr = r.target_rate;
    rec.client_ma.push_back(r.accuracy);
    rec.client_asr.push_back(r.target_rate);
  }
  rec.ba = rec.ma;  // clean accuracy; "BA" in runs without an attack
  return rec;
}

std::vector<RoundRecord> Simulation::run_training() {
  records_.clear();
  for (int t = 0; t < cfg_.rounds; ++t) {
    run_round(t);
    records_.push_back(evaluate(t));
  }
  return records_;
}

}  // namespace spfl
