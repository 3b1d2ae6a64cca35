#include <gtest/gtest.h>

#include <sstream>

#include "qforget/attacks.hpp"
#include "qforget/error.hpp"
#include "qforget/evalsuite.hpp"
#include "test_support.hpp"

namespace qforget {
namespace {

using attacks::FinetuneConfig;

struct Scenario {
  model::ModelConfig model = testing::tiny_model();
  data::FactDataset dataset = data::FactDataset::generate(testing::tiny_dataset());
  ParamSet theta = testing::with_random_adapters(model::init_model(model), 11);
  std::vector<data::Fact> forget = dataset.split_facts(data::Split::Forget);
  std::vector<data::Fact> retain = dataset.split_facts(data::Split::Retain);
  std::vector<data::Fact> unrelated;
  Scenario() {
    data::DatasetConfig c = testing::tiny_dataset();
    c.entity_offset = 12;
    c.n_entities = 4;
    c.forget_entities = 0;
    c.holdout_entities = 0;
    c.seed = 99;
    unrelated = data::FactDataset::generate(c).trained_facts();
  }
};

FinetuneConfig ft(std::size_t steps, double lr = 1e-2) {
  FinetuneConfig c;
  c.steps = steps;
  c.lr = lr;
  c.record_every = 5;
  return c;
}

TEST(QuantAttack, EmptyScopeIsIdentity) {
  const Scenario s;
  const auto o = attacks::quant_attack(s.theta, s.model, quant::QuantSpec::int4(quant::Scope::None), s.forget, s.retain);
  EXPECT_EQ(o.fa_after, o.fa_before);
  EXPECT_EQ(o.ra_after, o.ra_before);
  EXPECT_EQ(o.kind, attacks::AttackKind::Quant);
  ASSERT_TRUE(o.spec.has_value());
}

TEST(QuantAttack, DoesNotMutateInputAndRecordsRetain) {
  const Scenario s;
  const ParamSet copy = s.theta;
  const auto o = attacks::quant_attack(s.theta, s.model, quant::QuantSpec::int4(), s.forget, s.retain);
  EXPECT_EQ(s.theta, copy);
  EXPECT_EQ(o.fa_before, eval::accuracy(s.theta, s.model, s.forget));
  EXPECT_EQ(o.ra_after, eval::accuracy(quant::quantize(s.theta, quant::QuantSpec::int4()), s.model, s.retain));
}

TEST(FinetuneAttack, ZeroStepsRecordsOnlyTheStart) {
  const Scenario s;
  const auto o = attacks::finetune_attack(s.theta, s.model, s.unrelated, s.forget, s.retain, ft(0));
  ASSERT_EQ(o.trajectory.size(), 1u);
  EXPECT_EQ(o.trajectory[0].step, 0u);
  EXPECT_EQ(o.fa_after, o.fa_before);
}

TEST(FinetuneAttack, OverlapWithForgetIsRejected) {
  const Scenario s;
  EXPECT_THROW(attacks::finetune_attack(s.theta, s.model, s.forget, s.forget, s.retain, ft(5)), ConfigError);
}

TEST(FinetuneAttack, TrajectoryStepsAndReproducibility) {
  const Scenario s;
  const auto a = attacks::finetune_attack(s.theta, s.model, s.unrelated, s.forget, s.retain, ft(12));
  std::vector<std::size_t> steps;
  for (const auto& p : a.trajectory) steps.push_back(p.step);
  EXPECT_EQ(steps, (std::vector<std::size_t>{0, 5, 10, 12}));
  const auto b = attacks::finetune_attack(s.theta, s.model, s.unrelated, s.forget, s.retain, ft(12));
  EXPECT_EQ(attacks::trajectory_csv(a), attacks::trajectory_csv(b));
  EXPECT_EQ(a.fa_after, a.trajectory.back().fa);
}

TEST(FinetuneAttack, RecordEveryZeroIsAConfigError) {
  const Scenario s;
  auto c = ft(5);
  c.record_every = 0;
  EXPECT_THROW(attacks::finetune_attack(s.theta, s.model, s.unrelated, s.forget, s.retain, c), ConfigError);
}

TEST(AdapterVsMerged, ZeroAdaptersGiveIdenticalOutcomes) {
  const Scenario s;
  const ParamSet zero = model::init_model(s.model);  // B = 0, entity A = 0
  const auto [a, m] = attacks::adapter_vs_merged(zero, s.model, quant::QuantSpec::int4(), s.forget, s.retain);
  EXPECT_EQ(a.fa_before, m.fa_before);
  EXPECT_EQ(a.ra_before, m.ra_before);
  // Adapters-only quantization leaves the base alone, merged quantizes it,
  // so only the unquantized numbers must agree.
  EXPECT_EQ(a.fa_before, eval::accuracy(zero, s.model, s.forget));
}

TEST(AdapterVsMerged, ScopesAreForcedExceptTheNoneControl) {
  const Scenario s;
  const auto [a, m] = attacks::adapter_vs_merged(s.theta, s.model, quant::QuantSpec::int4(), s.forget, s.retain);
  ASSERT_TRUE(a.spec && m.spec);
  EXPECT_EQ(a.spec->scope, quant::Scope::AdaptersOnly);
  EXPECT_EQ(m.spec->scope, quant::Scope::MergedModel);
  const auto [ca, cm] = attacks::adapter_vs_merged(s.theta, s.model, quant::QuantSpec::int4(quant::Scope::None),
                                                   s.forget, s.retain);
  EXPECT_EQ(ca.fa_after, ca.fa_before);
  EXPECT_EQ(cm.fa_after, cm.fa_before);
  EXPECT_THROW(attacks::adapter_vs_merged(model::init_model(testing::tiny_model({})), testing::tiny_model({}),
                                          quant::QuantSpec::int4(), s.forget, s.retain),
               ConfigError);
}

TEST(FinetuneAttack, SeedChangesBatchOrder) {
  const Scenario s;
  auto c1 = ft(10, 5e-2), c2 = ft(10, 5e-2);
  c2.seed = 7;
  c1.train_scope = c2.train_scope = unlearn::TrainScope::All;
  c1.record_every = c2.record_every = 1;
  const auto a = attacks::finetune_attack(s.theta, s.model, s.unrelated, s.forget, s.retain, c1);
  const auto b = attacks::finetune_attack(s.theta, s.model, s.unrelated, s.forget, s.retain, c2);
  EXPECT_EQ(a.trajectory.size(), b.trajectory.size());
  // Same start, and in general a different path; the CSV captures both.
  EXPECT_EQ(a.trajectory[0].fa, b.trajectory[0].fa);
}

TEST(TrajectoryCsv, Format) {
  attacks::AttackOutcome o;
  o.trajectory = {{0, 0.5, 1.0}, {10, 0.25, 0.75}};
  std::istringstream in(attacks::trajectory_csv(o));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,fa,ra");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 2), "0,");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 3), "10,");
}

}  // namespace
}  // namespace qforget
