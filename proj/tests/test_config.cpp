#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "spfl/expcfg.hpp"

using namespace spfl;

TEST_CASE("experiment config round-trips through its text form") {
  ExperimentConfig cfg;
  cfg.dataset = "mnist";
  cfg.defense = Defense::SPFL;
  cfg.rounds = 21;
  cfg.tau = 3.5;
  cfg.trigger_rows = "11,11";
  cfg.target = 7;
  cfg.out_dir = "out/x";
  ExperimentConfig back = parse_experiment_config(cfg.to_text());
  CHECK(back.to_text() == cfg.to_text());
  CHECK(back.dataset == "mnist");
  CHECK(back.defense == Defense::SPFL);
  CHECK(back.rounds == 21);
  CHECK(back.tau == doctest::Approx(3.5));
  CHECK(back.trigger_rows == "11,11");
  CHECK(back.target == 7);
}

TEST_CASE("config parse errors carry line context") {
  SUBCASE("missing equals") {
    CHECK_THROWS_WITH_AS(parse_experiment_config("[dataset]\nname mnist\n"),
                         doctest::Contains("line 2"), ConfigError);
  }
  SUBCASE("unknown key") {
    CHECK_THROWS_WITH_AS(parse_experiment_config("[dataset]\nnamo = x\n"),
                         doctest::Contains("namo"), ConfigError);
  }
  SUBCASE("bad value") {
    CHECK_THROWS_WITH_AS(
        parse_experiment_config("[federation]\nrounds = soon\n"),
        doctest::Contains("rounds"), ConfigError);
  }
  SUBCASE("unterminated section") {
    CHECK_THROWS_AS(parse_experiment_config("[dataset\n"), ConfigError);
  }
  SUBCASE("comments and blank lines are fine") {
    ExperimentConfig cfg = parse_experiment_config(
        "# experiment\n\n[federation]\nrounds = 4  # short\n");
    CHECK(cfg.rounds == 4);
  }
}

TEST_CASE("canonical table matches the published attack grid") {
  REQUIRE(canonical_attacks().size() == 10);
  struct Expect {
    const char* name;
    AttackMethod method;
    int nm;
    double gamma;
  };
  const Expect expected[] = {
      {"DPA-5", AttackMethod::DPA, 5, 1.0},
      {"DPA-9", AttackMethod::DPA, 9, 1.0},
      {"LIE-5", AttackMethod::LIE, 5, 1.0},
      {"LIE-9", AttackMethod::LIE, 9, 1.0},
      {"MPA-SS", AttackMethod::MPA, 1, 10.0},
      {"MPA-MS", AttackMethod::MPA, 1, 5.0},
      {"DBA-4*SS", AttackMethod::DBA, 4, 10.0},
      {"DBA-4*MS", AttackMethod::DBA, 4, 1.0},
      {"DBA-6*SS", AttackMethod::DBA, 6, 10.0},
      {"DBA-6*MS", AttackMethod::DBA, 6, 1.0},
  };
  for (const auto& e : expected) {
    const CanonicalAttack& row = canonical_attack(e.name);
    CHECK(row.method == e.method);
    CHECK(row.adversaries == e.nm);
    CHECK(row.gamma == e.gamma);
  }
  CHECK_THROWS_AS(canonical_attack("DPA-7"), UnknownNameError);
}

TEST_CASE("schedules resolve onto the round range") {
  bool staggered = false;
  SUBCASE("every iteration") {
    auto s = resolve_schedule("every", 5, &staggered);
    CHECK(s == std::set<int>{0, 1, 2, 3, 4});
    CHECK_FALSE(staggered);
  }
  SUBCASE("every fifth iteration skips round zero") {
    auto s = resolve_schedule("every:5", 16, &staggered);
    CHECK(s == std::set<int>{5, 10, 15});
  }
  SUBCASE("single shot scales with the round budget") {
    auto s = resolve_schedule("once:19/30", 30, &staggered);
    CHECK(s == std::set<int>{19});
    s = resolve_schedule("once:19/30", 15, &staggered);
    CHECK(s == std::set<int>{10});  // round(19*15/30) = 10
  }
  SUBCASE("staggered list marks the plan") {
    auto s = resolve_schedule("staggered:9,11,13,15/30", 30, &staggered);
    CHECK(s == std::set<int>{9, 11, 13, 15});
    CHECK(staggered);
  }
  SUBCASE("explicit rounds") {
    auto s = resolve_schedule("rounds:1,3", 10, &staggered);
    CHECK(s == std::set<int>{1, 3});
  }
  SUBCASE("nonsense is rejected") {
    CHECK_THROWS_AS(resolve_schedule("sometimes", 10, &staggered), ConfigError);
    CHECK_THROWS_AS(resolve_schedule("once:nineteen/30", 10, &staggered),
                    ConfigError);
  }
}

TEST_CASE("canonical attacks resolve into executable plans") {
  ExperimentConfig cfg;
  cfg.dataset = "synth";
  cfg.rounds = 15;
  SUBCASE("DPA-5 attacks every round with five adversaries, no scaling") {
    apply_canonical_attack(cfg, "DPA-5");
    auto plan = resolve_attack_plan(cfg, 28, 28, 10);
    REQUIRE(plan.has_value());
    CHECK(plan->method == AttackMethod::DPA);
    CHECK(plan->adversary_ids.size() == 5);
    CHECK(plan->schedule.size() == 15);
    CHECK(plan->gamma == 1.0);
    CHECK(plan->poison_per_batch == 20);
  }
  SUBCASE("MPA-SS is one scaled shot mid-training") {
    apply_canonical_attack(cfg, "MPA-SS");
    auto plan = resolve_attack_plan(cfg, 28, 28, 10);
    REQUIRE(plan.has_value());
    CHECK(plan->schedule == std::set<int>{10});
    CHECK(plan->gamma == 10.0);
    CHECK(plan->adversary_ids.size() == 1);
  }
  SUBCASE("DBA-4 parts partition a grid-split square") {
    apply_canonical_attack(cfg, "DBA-4*MS");
    auto plan = resolve_attack_plan(cfg, 28, 28, 10);
    REQUIRE(plan.has_value());
    REQUIRE(plan->dba_parts.size() == 4);
    size_t total = 0;
    for (const auto& p : plan->dba_parts) total += p.active_cells();
    CHECK(total == plan->trigger.active_cells());
    CHECK(plan->trigger.rows == 4);  // grown so four quadrants tile it
  }
  SUBCASE("DBA-6 uses horizontal strips of a 6x6 square") {
    apply_canonical_attack(cfg, "DBA-6*MS");
    auto plan = resolve_attack_plan(cfg, 28, 28, 10);
    REQUIRE(plan.has_value());
    CHECK(plan->trigger.rows == 6);
    CHECK(plan->dba_parts.size() == 6);
  }
  SUBCASE("unknown canonical name") {
    CHECK_THROWS_AS(apply_canonical_attack(cfg, "DDOS-1"), UnknownNameError);
  }
  SUBCASE("no attack resolves to no plan") {
    ExperimentConfig none;
    CHECK_FALSE(resolve_attack_plan(none, 28, 28, 10).has_value());
  }
}

TEST_CASE("trigger grammar parses row-strings with placement") {
  ExperimentConfig cfg;
  cfg.attack_method = "DPA";
  cfg.adversaries = 2;
  cfg.schedule = "every";
  cfg.trigger_rows = "101,010";
  cfg.trigger_row = 4;
  cfg.trigger_col = 6;
  cfg.target = 3;
  cfg.rounds = 5;
  auto plan = resolve_attack_plan(cfg, 28, 28, 10);
  REQUIRE(plan.has_value());
  const TriggerSpec& t = plan->trigger;
  CHECK(t.rows == 2);
  CHECK(t.cols == 3);
  CHECK(t.active_cells() == 3);
  CHECK(t.row_off == 4);
  CHECK(t.col_off == 6);
  CHECK(t.target_label == 3);

  SUBCASE("ragged rows are rejected") {
    cfg.trigger_rows = "11,111";
    CHECK_THROWS_AS(resolve_attack_plan(cfg, 28, 28, 10), ConfigError);
  }
  SUBCASE("only 0/1 allowed") {
    cfg.trigger_rows = "12,10";
    CHECK_THROWS_AS(resolve_attack_plan(cfg, 28, 28, 10), ConfigError);
  }
}

TEST_CASE("sim config resolution applies defense defaults") {
  ExperimentConfig cfg;
  cfg.defense = Defense::Median;
  SimConfig sim = resolve_sim_config(cfg, std::nullopt);
  CHECK(sim.agg.method == Aggregator::Median);
  cfg.defense = Defense::SPFL;
  sim = resolve_sim_config(cfg, std::nullopt);
  CHECK(sim.agg.method == Aggregator::FedAvg);
  cfg.aggregator = "RLR";
  sim = resolve_sim_config(cfg, std::nullopt);
  CHECK(sim.agg.method == Aggregator::RLR);
  cfg.aggregator = "bogus";
  CHECK_THROWS_AS(resolve_sim_config(cfg, std::nullopt), ConfigError);
}

TEST_CASE("network resolution picks architectures by dataset") {
  ExperimentConfig cfg;
  cfg.dataset = "synth";
  NetworkSpec net = resolve_network(cfg);
  CHECK(net.in_height == 28);
  cfg.dataset = "cifar10";
  net = resolve_network(cfg);
  CHECK(net.in_channels == 3);
  cfg.arch = "bogus";
  CHECK_THROWS_AS(resolve_network(cfg), ConfigError);
}
