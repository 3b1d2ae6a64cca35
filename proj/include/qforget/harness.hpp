#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qforget/attacks.hpp"
#include "qforget/datagen.hpp"
#include "qforget/evalsuite.hpp"
#include "qforget/factmodel.hpp"
#include "qforget/quantsim.hpp"
#include "qforget/unlearn.hpp"

namespace qforget::harness {

inline constexpr int kSchemaVersion = 1;
/// Overrides ExperimentConfig::output_dir when set and non-empty.
inline constexpr const char* kOutputRootEnv = "QFORGET_OUTPUT_ROOT";

struct SweepGrid {
  std::vector<double> alpha{0.0, 1.0, 1.5, 2.0, 2.5, 3.0};
  std::vector<double> lambda{2.0, 4.0, 6.0};
  /// Step at which the warmup ablation records FA.
  std::size_t probe_step = 50;
  friend bool operator==(const SweepGrid&, const SweepGrid&) = default;
};

struct AttackPlan {
  bool quant = true;
  bool finetune = true;
  bool adapter_vs_merged = true;
  attacks::FinetuneConfig finetune_config{};
  friend bool operator==(const AttackPlan&, const AttackPlan&) = default;
};

struct ExperimentConfig {
  std::string name = "experiment";
  data::DatasetConfig dataset{};
  /// Corpus for the fine-tuning attack; must not share entities with the
  /// forget split.
  data::DatasetConfig unrelated{};
  model::ModelConfig model{};
  unlearn::PretrainConfig pretrain{};
  /// Seeds inside these are replaced by the run seed.
  std::vector<unlearn::MethodConfig> methods;
  quant::QuantSpec int8 = quant::QuantSpec::int8();
  quant::QuantSpec int4 = quant::QuantSpec::int4();
  std::vector<eval::Precision> precisions{eval::Precision::Full, eval::Precision::Int8, eval::Precision::Int4};
  double epsilon = 0.05;
  std::vector<std::uint64_t> seeds{42};
  SweepGrid sweep{};
  AttackPlan attacks{};
  std::string output_dir = "out";
  /// Put wall-clock seconds into report bodies. Off by default so that
  /// reports are byte-reproducible; timings always go to timing.log.
  bool record_wall_time = false;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  eval::EvalOptions eval_options() const;
};

/// Parses a config document. Unknown or mistyped fields raise ConfigError
/// naming the field path; missing fields keep their defaults.
ExperimentConfig config_from_json(const std::string& text);
/// Canonical document: every field, fixed key order, round-trips exactly.
std::string config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Sets one field of a config document: "methods.0.lr=0.01". The value is
/// parsed as JSON, falling back to a plain string.
std::string apply_override(const std::string& config_text, const std::string& assignment);

/// Hex SHA-256.
std::string sha256_hex(const std::string& bytes);
/// Content hash of the canonical config document.
std::string fingerprint(const ExperimentConfig& config);
/// Hash of everything one run depends on.
std::string run_fingerprint(const ExperimentConfig& config, const unlearn::MethodConfig& method, std::uint64_t seed);

/// The env override if set, else config.output_dir.
std::filesystem::path output_root(const ExperimentConfig& config);

/// Writes to a sibling temp file and renames over path.
void atomic_write(const std::filesystem::path& path, const std::string& content);

struct NamedOutcome {
  std::string label;  // "quant-int8", "quant-int4", "adapters-only", "merged", "finetune"
  attacks::AttackOutcome outcome;
};

struct RunRecord {
  std::string fingerprint;
  std::string method;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  double lambda = 0.0;
  std::string variant;  // sweep or ablation point, empty for plain runs
  eval::EvalReport report{};
  std::vector<NamedOutcome> attacks;
  std::optional<double> fa_at_probe;
  std::string theta0_path;
  std::string checkpoint_path;
  double wall_seconds = 0.0;
  std::string error;  // non-empty when the run failed

  bool ok() const { return error.empty(); }
};

/// Serialized record. Wall seconds appear only when with_wall_time.
std::string record_to_json(const RunRecord& record, bool with_wall_time);
RunRecord record_from_json(const std::string& text);

/// method,seed,alpha,lambda,fa,ra,q_int8,q_int4,ra_int4,mia_auc,kappa,cert,runtime_s
std::string run_csv_header();
std::string run_csv_row(const RunRecord& record, bool with_wall_time);

data::FactDataset make_dataset(const ExperimentConfig& config);
std::vector<data::Fact> unrelated_facts(const ExperimentConfig& config);

/// Pretrains theta0 for seed, or loads it from <root>/cache when a
/// checkpoint with the same content hash exists.
ParamSet pretrain_or_load(const ExperimentConfig& config, std::uint64_t seed, std::string* path_out = nullptr);

/// One unlearning run from theta0, evaluated and attacked per config.
/// Errors are captured in the record, not thrown.
RunRecord run_one(const ExperimentConfig& config, unlearn::MethodConfig method, std::uint64_t seed,
                  const ParamSet& theta0, const std::string& theta0_path, const data::FactDataset& dataset,
                  const std::string& variant = "");

/// Every (method, seed) run, persisted under <root>/runs, plus
/// report.csv / summary.json via write_report.
std::vector<RunRecord> run_experiment(const ExperimentConfig& config);

enum class SweepAxis { Alpha, Lambda };
SweepAxis parse_sweep_axis(const std::string& text);
/// Runs the first SAF method at every grid value for every seed and writes
/// <root>/sweep_<axis>/frontier.csv (seed means per value).
std::vector<RunRecord> sweep(const ExperimentConfig& config, SweepAxis axis);

/// Warmup on/off, STE scope adapters-only/all-trainable, and the lambda
/// grid, each on the first seed. One CSV per axis under <root>/ablation.
std::vector<RunRecord> ablation_suite(const ExperimentConfig& config);

/// One mean/std row per (method, alpha, lambda, variant) group, in first
/// appearance order.
std::string aggregate_csv(const std::vector<RunRecord>& records, bool with_wall_time);
std::string summary_json(const std::vector<RunRecord>& records, bool with_wall_time);
/// Reads every record under <dir>/runs and writes report.csv (per-seed
/// rows), aggregate.csv and summary.json into dir. Returns the records read, in file-name order.
std::vector<RunRecord> write_report(const std::filesystem::path& dir, bool with_wall_time);

}  // namespace qforget::harness
