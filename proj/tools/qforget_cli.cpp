// qforget: pretrain, unlearn, evaluate, attack, sweep and report from one
// JSON config. Exit 0 on success, 1 on a failed run, 2 on bad input.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "qforget/error.hpp"
#include "qforget/harness.hpp"

namespace {

using namespace qforget;
using json = nlohmann::ordered_json;

struct Common {
  std::string config_path;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool with_seed = true) {
  cmd->add_option("--config", c.config_path, "experiment config (JSON)")->required();
  if (with_seed) cmd->add_option("--seed", c.seeds, "restrict to these seeds");
  cmd->add_option("--set", c.overrides, "override a config field, e.g. methods.0.lr=0.01");
}

harness::ExperimentConfig load(const Common& c) {
  std::ifstream in(c.config_path);
  if (!in) throw IoError("cannot read config " + c.config_path);
  std::ostringstream text;
  text << in.rdbuf();
  std::string doc = text.str();
  for (const auto& o : c.overrides) doc = harness::apply_override(doc, o);
  harness::ExperimentConfig cfg = harness::config_from_json(doc);
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  return cfg;
}

json report_json(const eval::EvalReport& r) {
  return {{"fa", r.fa},           {"ra", r.ra},         {"q_int8", r.q_int8}, {"q_int4", r.q_int4},
          {"ra_int4", r.ra_int4}, {"mia_auc", r.mia_auc}, {"kappa", r.kappa}, {"cert", r.cert}};
}

int failures(const std::vector<harness::RunRecord>& records) {
  int failed = 0;
  for (const auto& r : records) {
    if (!r.ok()) {
      std::cerr << "run failed: " << r.method << " seed " << r.seed << (r.variant.empty() ? "" : " " + r.variant)
                << ": " << r.error << "\n";
      ++failed;
    }
  }
  return failed;
}

void print_rows(const std::vector<harness::RunRecord>& records) {
  std::cout << harness::run_csv_header() << "\n";
  for (const auto& r : records) {
    if (r.ok()) std::cout << harness::run_csv_row(r, false) << "\n";
  }
}

ParamSet load_checkpoint(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path);
  return load_params(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantization-robust unlearning experiments on a toy fact-memorization model"};
  app.require_subcommand(1);

  Common pre_opts, unl_opts, eval_opts, atk_opts, sweep_opts;
  std::vector<std::string> methods;
  std::string checkpoint, attack_kind = "all", axis, report_dir;
  bool wall_time = false;

  auto* pre = app.add_subcommand("pretrain", "fit theta0 for each seed (cached by content hash)");
  add_common(pre, pre_opts);
  auto* unl = app.add_subcommand("unlearn", "run the configured methods and write run records");
  add_common(unl, unl_opts);
  unl->add_option("--method", methods, "restrict to these methods");
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint");
  add_common(ev, eval_opts, false);
  ev->add_option("--checkpoint", checkpoint, "parameter file")->required();
  auto* atk = app.add_subcommand("attack", "quantization, adapter/merged and fine-tuning attacks on a checkpoint");
  add_common(atk, atk_opts);
  atk->add_option("--checkpoint", checkpoint, "parameter file")->required();
  atk->add_option("--kind", attack_kind, "quant, merged, finetune or all")
      ->check(CLI::IsMember({"quant", "merged", "finetune", "all"}));
  auto* sw = app.add_subcommand("sweep", "alpha or lambda sweep, or the ablation suite");
  add_common(sw, sweep_opts);
  sw->add_option("--axis", axis, "alpha, lambda or ablation")->required();
  auto* rep = app.add_subcommand("report", "aggregate run records under a directory");
  rep->add_option("--dir", report_dir, "directory holding runs/")->required();
  rep->add_flag("--wall-time", wall_time, "include wall-clock seconds");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) {
      const auto cfg = load(pre_opts);
      const auto dataset = harness::make_dataset(cfg);
      for (std::uint64_t seed : cfg.seeds) {
        std::string path;
        const ParamSet theta0 = harness::pretrain_or_load(cfg, seed, &path);
        const eval::EvalReport r = eval::evaluate(theta0, cfg.model, dataset, cfg.eval_options());
        json out = {{"seed", seed}, {"checkpoint", path}, {"report", report_json(r)}};
        harness::atomic_write(harness::output_root(cfg) / ("pretrain_s" + std::to_string(seed) + ".json"),
                              out.dump(2) + "\n");
        std::cout << out.dump() << "\n";
      }
      return 0;
    }
    if (unl->parsed()) {
      auto cfg = load(unl_opts);
      if (!methods.empty()) {
        std::vector<unlearn::MethodConfig> kept;
        for (const auto& m : cfg.methods) {
          for (const auto& name : methods) {
            if (unlearn::parse_method(name) == m.method) kept.push_back(m);
          }
        }
        if (kept.empty()) throw ConfigError("--method matches no configured method");
        cfg.methods = kept;
      }
      const auto records = harness::run_experiment(cfg);
      print_rows(records);
      return failures(records) ? 1 : 0;
    }
    if (ev->parsed()) {
      const auto cfg = load(eval_opts);
      const ParamSet theta = load_checkpoint(checkpoint);
      const auto r = eval::evaluate(theta, cfg.model, harness::make_dataset(cfg), cfg.eval_options());
      std::cout << report_json(r).dump(2) << "\n";
      return 0;
    }
    if (atk->parsed()) {
      const auto cfg = load(atk_opts);
      const ParamSet theta = load_checkpoint(checkpoint);
      const auto dataset = harness::make_dataset(cfg);
      const auto forget = dataset.split_facts(data::Split::Forget);
      const auto retain = dataset.split_facts(data::Split::Retain);
      json out = json::array();
      auto emit = [&](const std::string& label, const attacks::AttackOutcome& o) {
        out.push_back({{"label", label}, {"fa_before", o.fa_before}, {"fa_after", o.fa_after},
                       {"ra_before", o.ra_before}, {"ra_after", o.ra_after}});
        if (!o.trajectory.empty()) std::cerr << attacks::trajectory_csv(o);
      };
      if (attack_kind == "quant" || attack_kind == "all") {
        emit("quant-int8", attacks::quant_attack(theta, cfg.model, cfg.int8, forget, retain));
        emit("quant-int4", attacks::quant_attack(theta, cfg.model, cfg.int4, forget, retain));
      }
      if ((attack_kind == "merged" || attack_kind == "all") && theta.has_adapters()) {
        const auto [a, m] = attacks::adapter_vs_merged(theta, cfg.model, cfg.int4, forget, retain);
        emit("adapters-only", a);
        emit("merged", m);
      }
      if (attack_kind == "finetune" || attack_kind == "all") {
        attacks::FinetuneConfig ft = cfg.attacks.finetune_config;
        ft.seed = cfg.seeds.front();
        emit("finetune", attacks::finetune_attack(theta, cfg.model, harness::unrelated_facts(cfg), forget, retain, ft));
      }
      std::cout << out.dump(2) << "\n";
      return 0;
    }
    if (sw->parsed()) {
      const auto cfg = load(sweep_opts);
      const auto records = axis == "ablation" ? harness::ablation_suite(cfg)
                                              : harness::sweep(cfg, harness::parse_sweep_axis(axis));
      print_rows(records);
      return failures(records) ? 1 : 0;
    }
    if (rep->parsed()) {
      const auto records = harness::write_report(report_dir, wall_time);
      std::cout << harness::aggregate_csv(records, wall_time);
      return failures(records) ? 1 : 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
