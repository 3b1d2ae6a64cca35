#include <gtest/gtest.h>

#include <cmath>

#include "qforget/error.hpp"
#include "qforget/unlearn.hpp"
#include "test_support.hpp"

namespace qforget {
namespace {

using unlearn::Method;
using unlearn::MethodConfig;

struct Fixture {
  model::ModelConfig model = testing::tiny_model();
  data::FactDataset dataset = data::FactDataset::generate(testing::tiny_dataset());
  ParamSet theta0;
  Fixture() {
    unlearn::PretrainConfig pc;
    pc.epochs = 30;
    pc.batch_size = 8;
    theta0 = unlearn::pretrain(model, dataset, pc);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

MethodConfig method(Method m, std::size_t steps = 20) {
  MethodConfig c;
  c.method = m;
  c.optimizer.lr = 1e-2;
  c.optimizer.total_steps = steps;
  c.warmup = steps / 2;
  return c;
}

ParamSet run(const MethodConfig& c) {
  const auto& f = fixture();
  return unlearn::run_method(c, f.theta0, f.model, f.dataset);
}

TEST(AlphaSchedule, WarmupThenRampThenCap) {
  EXPECT_EQ(unlearn::alpha_schedule(0, 100, 300, 3.0), 0.0);
  EXPECT_EQ(unlearn::alpha_schedule(100, 100, 300, 3.0), 0.0);
  EXPECT_DOUBLE_EQ(unlearn::alpha_schedule(150, 100, 300, 3.0), 1.5);
  EXPECT_DOUBLE_EQ(unlearn::alpha_schedule(200, 100, 300, 3.0), 3.0);
  EXPECT_DOUBLE_EQ(unlearn::alpha_schedule(300, 100, 300, 3.0), 3.0);
  EXPECT_EQ(unlearn::alpha_schedule(250, 100, 300, 0.0), 0.0);
}

TEST(DefaultLambda, RuleAndOverride) {
  EXPECT_EQ(unlearn::default_lambda(0.0), 1.0);
  EXPECT_EQ(unlearn::default_lambda(3.0), 4.0);
  auto c = method(Method::SAF);
  c.alpha_max = 2.0;
  EXPECT_EQ(c.effective_lambda(), 3.0);
  c.lambda = 6.0;
  EXPECT_EQ(c.effective_lambda(), 6.0);
  EXPECT_EQ(method(Method::GradDiff).effective_lambda(), 1.0);
}

TEST(Names, RoundTrip) {
  for (Method m : {Method::GA, Method::GradDiff, Method::NPO, Method::SCRUB, Method::SalUn, Method::TaskArith,
                   Method::SAF}) {
    EXPECT_EQ(unlearn::parse_method(unlearn::method_name(m)), m);
  }
  EXPECT_THROW(unlearn::parse_method("Retrain"), ConfigError);
  EXPECT_THROW(unlearn::parse_train_scope("base"), ConfigError);
}

TEST(Pretrain, ZeroEpochsIsTheInit) {
  const auto& f = fixture();
  unlearn::PretrainConfig pc;
  pc.epochs = 0;
  auto seeded = f.model;
  seeded.seed = pc.seed;
  EXPECT_EQ(unlearn::pretrain(f.model, f.dataset, pc), model::init_model(seeded));
}

TEST(Pretrain, DeterministicAndLowersLoss) {
  const auto& f = fixture();
  unlearn::PretrainConfig pc;
  pc.epochs = 30;
  pc.batch_size = 8;
  EXPECT_EQ(unlearn::pretrain(f.model, f.dataset, pc), f.theta0);
  const auto facts = f.dataset.trained_facts();
  auto seeded = f.model;
  seeded.seed = pc.seed;
  EXPECT_LT(model::mean_loss(f.theta0, f.model, facts), model::mean_loss(model::init_model(seeded), f.model, facts));
  // Adapters stay at their zero-delta init.
  const ParamSet init = model::init_model(seeded);
  for (const auto& [name, e] : f.theta0) {
    if (e.kind == ParamKind::AdapterA || e.kind == ParamKind::AdapterB) EXPECT_EQ(e.value, init.at(name).value);
  }
}

TEST(RunMethod, SafWithZeroAlphaIsGradDiffBitwise) {
  auto saf = method(Method::SAF);
  saf.alpha_max = 0.0;
  saf.lambda = 1.0;
  EXPECT_EQ(run(saf), run(method(Method::GradDiff)));
}

TEST(RunMethod, SafWithZeroAlphaAndLambdaIsGaBitwise) {
  auto saf = method(Method::SAF);
  saf.alpha_max = 0.0;
  saf.lambda = 0.0;
  EXPECT_EQ(run(saf), run(method(Method::GA)));
}

TEST(RunMethod, WarmupStepsMatchGradDiff) {
  // During warmup alpha is 0, so the first `warmup` steps match GradDiff
  // with the same lambda and schedule.
  auto saf = method(Method::SAF, 20);
  saf.warmup = 10;
  saf.lambda = 2.0;
  auto gd = method(Method::GradDiff, 20);
  gd.lambda = 2.0;
  const auto& f = fixture();
  ParamSet at_saf, at_gd;
  unlearn::run_method(saf, f.theta0, f.model, f.dataset, [&](std::size_t t, const ParamSet& p) {
    if (t == 10) at_saf = p;
  });
  unlearn::run_method(gd, f.theta0, f.model, f.dataset, [&](std::size_t t, const ParamSet& p) {
    if (t == 10) at_gd = p;
  });
  EXPECT_EQ(at_saf, at_gd);
}

TEST(RunMethod, SafDiffersFromGradDiffOnceAlphaIsOn) {
  auto saf = method(Method::SAF);
  saf.lambda = 1.0;
  EXPECT_NE(run(saf), run(method(Method::GradDiff)));
}

TEST(RunMethod, SalUnFullMaskIsGradDiff) {
  auto s = method(Method::SalUn);
  s.salun_fraction = 1.0;
  EXPECT_EQ(run(s), run(method(Method::GradDiff)));
}

TEST(RunMethod, SalUnMovesOnlyMaskedCoordinates) {
  const auto& f = fixture();
  auto s = method(Method::SalUn);
  s.optimizer.weight_decay = 0.0;
  s.salun_fraction = 0.25;
  ParamSet scoped = f.theta0;
  unlearn::apply_train_scope(scoped, s.train_scope);
  const auto mask = unlearn::saliency_mask(scoped, f.model, f.dataset.split_facts(data::Split::Forget), 0.25);
  const ParamSet out = run(s);
  for (const auto& [name, m] : mask) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i] == 0.0) ASSERT_EQ(out.at(name).value[i], f.theta0.at(name).value[i]) << name << "[" << i << "]";
    }
  }
}

TEST(RunMethod, TaskArithZeroEtaIsIdentity) {
  auto t = method(Method::TaskArith);
  t.taskarith_eta = 0.0;
  t.taskarith_ft_steps = 5;
  const ParamSet out = run(t);
  for (const auto& [name, e] : out) EXPECT_EQ(e.value, fixture().theta0.at(name).value) << name;
}

TEST(RunMethod, AdapterScopeLeavesBaseUntouched) {
  for (Method m : {Method::GA, Method::NPO, Method::SCRUB, Method::SAF}) {
    const ParamSet out = run(method(m));
    for (const auto& [name, e] : out) {
      if (e.kind == ParamKind::Base || e.kind == ParamKind::Embedding) {
        EXPECT_EQ(e.value, fixture().theta0.at(name).value) << unlearn::method_name(m) << " " << name;
      }
    }
  }
}

TEST(RunMethod, LinearScopeFreezesEmbeddings) {
  auto c = method(Method::GA);
  c.train_scope = unlearn::TrainScope::Linear;
  const ParamSet out = run(c);
  EXPECT_EQ(out.at(model::kAttributeEmbedding).value, fixture().theta0.at(model::kAttributeEmbedding).value);
  EXPECT_NE(out.at(model::weight_name("head")).value, fixture().theta0.at(model::weight_name("head")).value);
}

TEST(RunMethod, GaRaisesForgetLoss) {
  const auto& f = fixture();
  const auto forget = f.dataset.split_facts(data::Split::Forget);
  EXPECT_GT(model::mean_loss(run(method(Method::GA)), f.model, forget), model::mean_loss(f.theta0, f.model, forget));
}

TEST(RunMethod, Deterministic) {
  EXPECT_EQ(run(method(Method::NPO)), run(method(Method::NPO)));
  auto other = method(Method::NPO);
  other.seed = 7;
  EXPECT_NE(run(method(Method::NPO)), run(other));
}

TEST(MethodConfig, ValidationNamesTheKnob) {
  auto expect_knob = [](MethodConfig c, const std::string& knob) {
    try {
      c.validate();
      FAIL() << "expected ConfigError for " << knob;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(knob), std::string::npos) << e.what();
    }
  };
  auto c = method(Method::SAF);
  c.warmup = 20;
  expect_knob(c, "warmup");
  c = method(Method::SAF);
  c.ste_bits = 3;
  expect_knob(c, "ste_bits");
  c = method(Method::SalUn);
  c.salun_fraction = 0.0;
  expect_knob(c, "salun_fraction");
  c = method(Method::NPO);
  c.npo_beta = 0.0;
  expect_knob(c, "npo_beta");
  c = method(Method::GA);
  c.optimizer.total_steps = 0;
  expect_knob(c, "total_steps");
}

TEST(RunMethod, AdapterScopeWithoutAdaptersThrows) {
  const auto& f = fixture();
  const auto plain = testing::tiny_model({});
  EXPECT_THROW(unlearn::run_method(method(Method::GA), model::init_model(plain), plain, f.dataset), ConfigError);
}

TEST(RunMethod, DivergenceIsReportedWithTheStep) {
  const auto& f = fixture();
  auto c = method(Method::GA, 200);
  c.optimizer.lr = 1e6;
  c.optimizer.clip_norm = 0.0;
  c.optimizer.cosine = false;
  c.train_scope = unlearn::TrainScope::All;
  try {
    unlearn::run_method(c, f.theta0, f.model, f.dataset);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace qforget
