#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "spfl/checkpoint.hpp"
#include "spfl/runner.hpp"

namespace fs = std::filesystem;
using namespace spfl;

namespace {

// Exit codes: 0 ok, 2 config parse error, 3 missing/bad data files,
// 4 unknown canonical attack name, 5 training diverged, 1 anything else.
enum ExitCode {
  kOk = 0,
  kOtherError = 1,
  kParseError = 2,
  kDataError = 3,
  kBadAttackName = 4,
  kDiverged = 5,
};

struct RunFlags {
  std::string config;
  std::string out;
  std::string attack;
  std::string defense;
  std::string dataset;
  int rounds = -1;
  int clients_cap = -1;
  int64_t seed = -1;
};

ExperimentConfig build_config(const RunFlags& f) {
  ExperimentConfig cfg;
  if (!f.config.empty()) cfg = load_experiment_config(f.config);
  if (!f.dataset.empty()) cfg.dataset = f.dataset;
  if (!f.attack.empty()) apply_canonical_attack(cfg, f.attack);
  if (!f.defense.empty()) cfg.defense = defense_from_string(f.defense);
  if (f.rounds > 0) cfg.rounds = f.rounds;
  if (f.clients_cap >= 0) cfg.clients_cap = f.clients_cap;
  if (f.seed >= 0) cfg.seed = static_cast<uint64_t>(f.seed);
  if (!f.out.empty()) cfg.out_dir = f.out;
  return cfg;
}

int guarded(const std::function<void()>& body) {
  try {
    body();
    return kOk;
  } catch (const UnknownNameError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadAttackName;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kParseError;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOtherError;
  }
}

void print_summary(const ExperimentResult& r) {
  const auto& last = r.records.back();
  std::cout << "run complete: " << r.records.size() << " rounds, final MA="
            << last.ma << " ASR=" << last.asr << "\noutputs in " << r.out_dir
            << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spfl: federated-learning poisoning workbench"};
  app.require_subcommand(1);

  // ---- run
  auto* run = app.add_subcommand("run", "run one federated experiment");
  RunFlags rf;
  run->add_option("--config", rf.config, "experiment config file");
  run->add_option("--seed", rf.seed, "RNG seed override");
  run->add_option("--out", rf.out, "output directory");
  run->add_option("--attack", rf.attack, "canonical attack name (Table rows)");
  run->add_option("--defense", rf.defense,
                  "FedAvg|Median|RFA|RLR|SPFL|SPFL_oA|SPFL_NAD");
  run->add_option("--dataset", rf.dataset, "mnist|cifar10|synth");
  run->add_option("--rounds", rf.rounds, "federation rounds override");
  run->add_option("--clients-cap", rf.clients_cap,
                  "per-client sample cap override");

  // ---- plot
  auto* plot = app.add_subcommand("plot", "render MA/ASR charts from runs");
  std::string plot_out = "plots";
  std::vector<std::string> plot_inputs;
  plot->add_option("--out", plot_out, "output directory");
  plot->add_option("runs", plot_inputs,
                   "run directories or metrics.csv files")
      ->required();

  // ---- attention
  auto* att = app.add_subcommand(
      "attention", "attention heatmaps and clean-vs-triggered distance");
  std::string att_run, att_out;
  int att_samples = 8;
  att->add_option("--run", att_run, "run directory")->required();
  att->add_option("--out", att_out, "output directory (default RUN/attention)");
  att->add_option("--samples", att_samples, "number of heatmap samples");

  // ---- grid
  auto* grid = app.add_subcommand("grid", "run an attack x defense grid");
  RunFlags gf;
  std::vector<std::string> grid_attacks, grid_defenses;
  int jobs = 1;
  grid->add_option("--config", gf.config, "base experiment config file");
  grid->add_option("--seed", gf.seed, "RNG seed override");
  grid->add_option("--out", gf.out, "base output directory");
  grid->add_option("--dataset", gf.dataset, "mnist|cifar10|synth");
  grid->add_option("--rounds", gf.rounds, "federation rounds override");
  grid->add_option("--clients-cap", gf.clients_cap, "per-client cap override");
  grid->add_option("--attacks", grid_attacks, "canonical attack names")
      ->delimiter(',')
      ->required();
  grid->add_option("--defenses", grid_defenses, "defense names")
      ->delimiter(',')
      ->required();
  grid->add_option("--jobs", jobs, "concurrent runs");

  // ---- datagen
  auto* gen = app.add_subcommand(
      "datagen", "write the synthetic digit dataset as IDX files");
  std::string gen_out = "data";
  int gen_train = 12000, gen_test = 1000;
  int64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--train", gen_train, "training sample count");
  gen->add_option("--test", gen_test, "test sample count");
  gen->add_option("--seed", gen_seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) {
    return guarded([&] {
      ExperimentConfig cfg = build_config(rf);
      print_summary(run_experiment(cfg));
    });
  }

  if (plot->parsed()) {
    return guarded([&] {
      std::vector<ChartSeries> ma, asr;
      for (const auto& input : plot_inputs) {
        std::string csv = input;
        std::string label = fs::path(input).filename().string();
        if (fs::is_directory(input)) {
          csv = input + "/metrics.csv";
        } else {
          label = fs::path(input).parent_path().filename().string();
        }
        auto records = read_metrics_csv(csv);
        ChartSeries m{label, {}}, a{label, {}};
        for (const auto& r : records) {
          m.values.push_back(r.ma);
          a.values.push_back(r.asr);
        }
        ma.push_back(std::move(m));
        asr.push_back(std::move(a));
      }
      fs::create_directories(plot_out);
      write_line_chart_svg(plot_out + "/ma.svg", "Main task accuracy", "MA",
                           ma);
      write_line_chart_svg(plot_out + "/asr.svg", "Attack success rate", "ASR",
                           asr);
      std::cout << "wrote " << plot_out << "/ma.svg and " << plot_out
                << "/asr.svg\n";
    });
  }

  if (att->parsed()) {
    return guarded([&] {
      ExperimentConfig cfg = config_from_manifest(att_run);
      LoadedData data = load_datasets(cfg);
      Dataset test = cfg.test_cap > 0
                         ? stratified_subset(data.test, cfg.test_cap, cfg.seed)
                         : std::move(data.test);

      std::ifstream spec_in(att_run + "/net.spec");
      if (!spec_in) throw FormatError("cannot open " + att_run + "/net.spec");
      std::ostringstream ss;
      ss << spec_in.rdbuf();
      Engine<float> engine(NetworkSpec::parse(ss.str()));

      // SPFL runs are judged on a benign client's purified student
      std::string ckpt = att_run + "/global.ckpt";
      if (defense_is_spfl(cfg.defense)) {
        for (int i = 0; i < cfg.clients; ++i) {
          std::string candidate = att_run + "/client" + std::to_string(i) +
                                  "_teacher.ckpt";
          if (fs::exists(candidate)) {
            ckpt = att_run + "/client" + std::to_string(i) + "_student.ckpt";
            break;
          }
        }
      }
      Params<float> params = load_checkpoint(ckpt);
      check_manifest_match(*params.manifest, *engine.manifest());
      params.manifest = engine.manifest();

      auto plan = resolve_attack_plan(cfg, test.height, test.width,
                                      test.num_classes);
      TriggerSpec trigger = plan ? plan->trigger
                                 : TriggerSpec::default_for(test.height,
                                                            test.width, 0);
      Tensor<float> inputs({static_cast<int>(test.size()), test.channels,
                            test.height, test.width},
                           test.images);
      std::string out = att_out.empty() ? att_run + "/attention" : att_out;
      AttentionReport report =
          attention_report(engine, params, inputs, trigger, out, att_samples);
      nlohmann::json j;
      j["model"] = ckpt;
      j["mean_distance"] = report.mean_distance;
      j["samples"] = report.images.size() / 2;
      std::ofstream os(out + "/attention.json");
      os << j.dump(2) << '\n';
      std::cout << "mean clean-vs-triggered attention distance: "
                << report.mean_distance << "\nimages in " << out << '\n';
    });
  }

  if (grid->parsed()) {
    return guarded([&] {
      std::string base = gf.out.empty() ? "out/grid" : gf.out;
      struct Job {
        std::string attack, defense;
      };
      std::vector<Job> todo;
      for (const auto& a : grid_attacks)
        for (const auto& d : grid_defenses) todo.push_back({a, d});
      // resolve all names up front so a typo aborts before any run starts
      for (const auto& j : todo) {
        canonical_attack(j.attack);
        defense_from_string(j.defense);
      }
      std::atomic<size_t> next{0};
      auto worker = [&]() {
        for (;;) {
          size_t i = next.fetch_add(1);
          if (i >= todo.size()) return;
          RunFlags f = gf;
          f.attack = todo[i].attack;
          f.defense = todo[i].defense;
          f.out = base + "/" + todo[i].attack + "_" + todo[i].defense;
          ExperimentConfig cfg = build_config(f);
          run_experiment(cfg);
          std::cout << "done: " << f.out << '\n';
        }
      };
      int n = std::max(1, std::min<int>(jobs, static_cast<int>(todo.size())));
      std::vector<std::future<void>> futs;
      for (int i = 0; i < n; ++i)
        futs.push_back(std::async(std::launch::async, worker));
      for (auto& f : futs) f.get();
    });
  }

  if (gen->parsed()) {
    return guarded([&] {
      fs::create_directories(gen_out);
      Dataset train = synth_digits(gen_train,
                                   static_cast<uint64_t>(gen_seed) ^ 0xA11CE,
                                   true);
      Dataset test = synth_digits(gen_test,
                                  static_cast<uint64_t>(gen_seed) ^ 0xB0B0,
                                  true);
      write_idx(train, gen_out + "/train-images-idx3-ubyte",
                gen_out + "/train-labels-idx1-ubyte");
      write_idx(test, gen_out + "/t10k-images-idx3-ubyte",
                gen_out + "/t10k-labels-idx1-ubyte");
      std::cout << "wrote " << gen_train << " train / " << gen_test
                << " test samples to " << gen_out << '\n';
    });
  }

  return kOk;
}
