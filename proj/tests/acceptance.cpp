// Acceptance checks, one PASS/FAIL line per criterion. Every tolerance is
// a constant below; nothing is read from the environment except the work
// directory passed on the command line.
//
//   acceptance [--only N] [--work DIR]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "qforget/attacks.hpp"
#include "qforget/evalsuite.hpp"
#include "qforget/harness.hpp"
#include "qforget/quantsim.hpp"
#include "qforget/unlearn.hpp"
#include "quant_reference.hpp"
#include "test_support.hpp"

namespace {

using namespace qforget;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Pinned tolerances and thresholds.
constexpr std::size_t kCorpusSize = 1000;
constexpr std::size_t kMaxDim = 128;
constexpr double kCorpusSeconds = 10.0;
constexpr double kSteRelTol = 1e-6;
constexpr double kSteAbsTol = 1e-9;
constexpr double kSteNearZero = 1e-6;
constexpr double kFdStep = 1e-3;  // fourth-order stencil
constexpr std::size_t kFdCoordinates = 256;
constexpr double kBoundTol = 1e-9;
constexpr double kPretrainMin = 0.95;
constexpr double kGaMaxFa = 0.10;
constexpr double kGaMinRa = 0.60;
constexpr double kInt8Gap = 0.02;
constexpr double kInt4Recovery = 0.10;
constexpr double kRaShift = 0.05;
constexpr double kSafInt4StdMax = 0.05;
// Frontier: each step may rise by at most one forget fact per seed mean
// (1/600 at 200 facts x 3 seeds, rounded up), and the far end must sit
// clearly below the near end.
constexpr double kFrontierStepSlack = 0.005;
constexpr double kFrontierNetDrop = 0.01;
constexpr double kDemoMinutes = 15.0;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;
  void check(bool ok, const std::string& what) {
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
    pass = pass && ok;
  }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

fs::path g_work = fs::temp_directory_path() / "qforget_acceptance";

harness::ExperimentConfig demo_config() { return harness::load_config(QFORGET_DEMO_CONFIG); }

void set_root(const fs::path& root) { setenv(harness::kOutputRootEnv, root.c_str(), 1); }

// ---------------------------------------------------------------------------
// 1 and 2: the quantizer corpus.

std::vector<Tensor> corpus() {
  Rng rng(20240601);
  std::vector<Tensor> out;
  out.reserve(kCorpusSize);
  for (std::size_t i = 0; i < kCorpusSize; ++i) {
    const std::size_t r = 1 + rng.uniform_index(kMaxDim), c = 1 + rng.uniform_index(kMaxDim);
    const double scale = std::pow(10.0, rng.uniform(-3.0, 1.0));
    Tensor t = testing::random_matrix(rng, r, c, scale);
    if (i % 50 == 0) t.values()[0] = 0.0;
    if (i % 97 == 0) {
      for (std::size_t k = 0; k < c; ++k) t.at(0, k) = 0.0;  // an all-zero row
    }
    out.push_back(std::move(t));
  }
  return out;
}

Outcome c1() {
  Outcome o;
  const auto mats = corpus();
  const auto start = Clock::now();
  std::size_t mismatches = 0;
  for (const auto& w : mats) {
    if (quant::quantize_matrix(w, quant::QuantSpec::int4()) != testing::reference_per_row(w, 7)) ++mismatches;
    if (quant::quantize_matrix(w, quant::QuantSpec::int8()) != testing::reference_global(w, 127)) ++mismatches;
  }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  o.check(mismatches == 0, std::to_string(mismatches) + " of " + std::to_string(2 * mats.size()) +
                               " quantized matrices differ from the scalar reference");
  o.check(secs < kCorpusSeconds, "corpus time " + fmt(secs, 2) + " s < " + fmt(kCorpusSeconds, 0) + " s");
  return o;
}

Outcome c2() {
  Outcome o;
  std::size_t idem = 0, sym = 0, bound = 0;
  for (const auto& w : corpus()) {
    for (const auto& spec : {quant::QuantSpec::int4(), quant::QuantSpec::int8()}) {
      const Tensor q = quant::quantize_matrix(w, spec);
      if (quant::quantize_matrix(q, spec) != q) ++idem;
      Tensor neg = w;
      for (double& v : neg.values()) v = -v;
      Tensor qn = quant::quantize_matrix(neg, spec);
      for (double& v : qn.values()) v = -v;
      if (qn != q) ++sym;
    }
    const Tensor q4 = quant::quantize_matrix(w, quant::QuantSpec::int4());
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const double half = testing::half_step(w, r, 7);
      for (std::size_t c = 0; c < w.cols(); ++c) {
        if (std::abs(q4.at(r, c) - w.at(r, c)) > half) ++bound;
      }
    }
  }
  o.check(idem == 0, "idempotence violations: " + std::to_string(idem));
  o.check(sym == 0, "sign-symmetry violations: " + std::to_string(sym));
  o.check(bound == 0, "per-row half-step bound violations: " + std::to_string(bound));
  return o;
}

// ---------------------------------------------------------------------------
// 3 and 4: gradients on the demo-sized model.

struct Toy {
  model::ModelConfig model;
  ParamSet params;
  std::vector<data::Fact> forget;
};

Toy toy() {
  const auto cfg = demo_config();
  Toy t{cfg.model, testing::with_random_adapters(model::init_model(cfg.model), 3), {}};
  t.forget = harness::make_dataset(cfg).split_facts(data::Split::Forget);
  return t;
}

Outcome c3() {
  Outcome o;
  const Toy t = toy();
  const auto spec = quant::QuantSpec::int4(quant::Scope::AllTrainable);
  ad::Tape tape;
  const auto q = quant::ste_quantize(model::bind(tape, t.params), t.params, spec);
  const NamedTensors ste = tape.backward(model::mean_loss(q, t.model, t.forget));

  // Fourth-order central differences of L_f at the quantized point.
  const ParamSet at_q = quant::quantize(t.params, spec);
  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& [name, e] : at_q) {
    for (std::size_t i = 0; i < e.value.size(); ++i) coords.emplace_back(name, i);
  }
  Rng rng(31);
  rng.shuffle(std::span(coords));
  coords.resize(std::min(coords.size(), kFdCoordinates));
  double worst_rel = 0.0, worst_abs = 0.0;
  for (const auto& [name, i] : coords) {
    auto loss_at = [&](double offset) {
      ParamSet p = at_q;
      p.at(name).value[i] += offset;
      return model::mean_loss(p, t.model, t.forget);
    };
    const double h = kFdStep;
    const double fd = (8.0 * (loss_at(h) - loss_at(-h)) - (loss_at(2 * h) - loss_at(-2 * h))) / (12.0 * h);
    const double g = ste.at(name)[i];
    if (std::abs(g) >= kSteNearZero) {
      worst_rel = std::max(worst_rel, std::abs(g - fd) / std::abs(g));
    } else {
      worst_abs = std::max(worst_abs, std::abs(g - fd));
    }
  }
  o.check(worst_rel <= kSteRelTol, "max relative error " + sci(worst_rel) + " over " +
                                       std::to_string(coords.size()) + " coordinates");
  o.check(worst_abs <= kSteAbsTol, "max absolute error near zero " + sci(worst_abs));
  return o;
}

Outcome c4() {
  Outcome o;
  const Toy t = toy();
  ad::FiniteDiffOptions opts;
  opts.step = kFdStep;
  opts.rel_tolerance = kSteRelTol;
  opts.abs_tolerance = kSteAbsTol;
  opts.near_zero = kSteNearZero;
  opts.max_coordinates = kFdCoordinates;
  const auto r = ad::finite_diff_check(
      [&](ad::Tape&, const std::map<std::string, ad::Var>& v) { return model::mean_loss(v, t.model, t.forget); },
      t.params.values(), opts);
  o.check(r.passed, "max relative error " + sci(r.max_rel_error) + ", max absolute " +
                        sci(r.max_abs_error) + " over " + std::to_string(r.coordinates_checked) +
                        " coordinates (worst " + r.worst_coordinate + ")");
  return o;
}

// ---------------------------------------------------------------------------
// 5 to 9: exact logic.

Outcome c5() {
  Outcome o;
  o.check(unlearn::alpha_schedule(100, 100, 300, 3.0) == 0.0, "alpha(100) = 0");
  o.check(unlearn::alpha_schedule(150, 100, 300, 3.0) == 1.5, "alpha(150) = alpha_max / 2");
  o.check(unlearn::alpha_schedule(200, 100, 300, 3.0) == 3.0, "alpha(200) = alpha_max");
  o.check(unlearn::default_lambda(3.0) == 4.0, "lambda rule gives 4 at alpha_max = 3");
  return o;
}

Outcome c6() {
  Outcome o;
  const auto cfg = demo_config();
  const auto dataset = harness::make_dataset(cfg);
  const ParamSet theta0 = model::init_model(cfg.model);
  auto find = [&](unlearn::Method m) {
    for (const auto& mc : cfg.methods) {
      if (mc.method == m) return mc;
    }
    throw std::runtime_error("demo config lacks a method");
  };
  unlearn::MethodConfig saf = find(unlearn::Method::SAF);
  unlearn::MethodConfig gd = saf, ga = saf;
  saf.alpha_max = 0.0;
  saf.lambda = 1.0;
  gd.method = unlearn::Method::GradDiff;
  gd.lambda = 1.0;
  ga.method = unlearn::Method::GA;
  const ParamSet s1 = unlearn::run_method(saf, theta0, cfg.model, dataset);
  o.check(s1 == unlearn::run_method(gd, theta0, cfg.model, dataset), "SAF(alpha=0) equals GradDiff bitwise");
  saf.lambda = 0.0;
  o.check(unlearn::run_method(saf, theta0, cfg.model, dataset) == unlearn::run_method(ga, theta0, cfg.model, dataset),
          "SAF(alpha=0, lambda=0) equals GA bitwise");
  return o;
}

std::map<eval::Precision, double> triple(double fp, double i8, double i4) {
  return {{eval::Precision::Full, fp}, {eval::Precision::Int8, i8}, {eval::Precision::Int4, i4}};
}

Outcome c7() {
  Outcome o;
  o.check(eval::certificate(triple(0.040, 0.000, 0.044), 0.047), "{0.040, 0.000, 0.044} certified at 0.047");
  o.check(!eval::certificate(triple(0.011, 0.000, 0.051), 0.05), "{0.011, 0.000, 0.051} not certified at 0.05");
  o.check(eval::trilemma(0.008, 0.510, 0.151).failed == std::set<int>{3}, "(0.008, 0.510, 0.151) fails only (iii)");
  o.check(eval::trilemma(0.041, 0.045, 0.041).failed == std::set<int>{2}, "(0.041, 0.045, 0.041) fails only (ii)");
  return o;
}

double round3(double v) { return std::round(v * 1000.0) / 1000.0; }

Outcome c8() {
  Outcome o;
  auto replay = [&](const std::string& label, std::vector<double> v, double mean, double sd) {
    const auto s = eval::mean_std(v);
    o.check(round3(s.mean) == mean, label + " mean " + fmt(s.mean, 6) + " -> " + fmt(round3(s.mean), 3) +
                                        " (expected " + fmt(mean, 3) + ")");
    o.check(round3(s.std) == sd, label + " std " + fmt(s.std, 6) + " -> " + fmt(round3(s.std), 3) + " (expected " +
                                     fmt(sd, 3) + ")");
  };
  replay("SAF Q-INT4", {0.044, 0.042, 0.045}, 0.043, 0.002);
  replay("SalUn-uniform Q-INT4", {0.051, 0.147, 0.102}, 0.100, 0.049);
  return o;
}

class Quadratic final : public eval::Objective {
 public:
  explicit Quadratic(std::vector<double> c) : c_(std::move(c)) {}
  double value(const ParamSet& p) const override {
    double s = 0.0;
    const Tensor& w = p.at("w").value;
    for (std::size_t i = 0; i < c_.size(); ++i) s += 0.5 * c_[i] * w[i] * w[i];
    return s;
  }
  NamedTensors gradient(const ParamSet& p) const override {
    Tensor g = p.at("w").value;
    for (std::size_t i = 0; i < c_.size(); ++i) g[i] *= c_[i];
    return {{"w", g}};
  }

 private:
  std::vector<double> c_;
};

ParamSet vec(std::vector<double> v) {
  ParamSet p;
  const std::size_t n = v.size();
  p.add("w", Tensor({1, n}, std::move(v)));
  return p;
}

Outcome c9() {
  Outcome o;
  const Quadratic aniso({1.0, 3.0, 0.5, 2.0, 4.0, 0.25});
  const auto r = eval::recovery_bound_check(aniso, vec({0.7, -0.35, 0.1, 0.22, -0.61, 0.05}),
                                            quant::QuantSpec::int4(), 32, kBoundTol);
  o.check(r.bound_satisfied, "recovery bound |dL| " + sci(r.bound_lhs) + " <= " +
                                 sci(r.bound_rhs) + " + " + sci(kBoundTol));
  // L = theta^2 from 0 to v = (3, 4): kappa = 10, M = 25, rho = 5, L_hat = 2,
  // so the floor is 25/5 - 2*5 = -5 and the slack is 15.
  const Quadratic iso({2.0, 2.0});
  const auto p = eval::prop1_check(iso, vec({0.0, 0.0}), vec({3.0, 4.0}), 32);
  o.check(p.prop1_holds, "sharpness floor holds");
  o.check(p.prop1_rhs && std::abs((p.kappa - *p.prop1_rhs) - 15.0) <= kBoundTol,
          "slack " + std::to_string(p.prop1_rhs ? p.kappa - *p.prop1_rhs : 0.0) + " = 15");
  return o;
}

// ---------------------------------------------------------------------------
// 10 to 12: the frozen demo.

struct Arm {
  double fa = 0, ra = 0, q8 = 0, q4 = 0, ra4 = 0;
  double q4_std = 0;
  std::size_t certified = 0, n = 0;
  double ft_before = 0, ft_after = 0;
};

Arm arm(const std::vector<harness::RunRecord>& records, const std::string& method) {
  Arm a;
  std::vector<double> q4;
  for (const auto& r : records) {
    if (r.method != method || !r.variant.empty() || !r.ok()) continue;
    a.fa += r.report.fa;
    a.ra += r.report.ra;
    a.q8 += r.report.q_int8;
    a.q4 += r.report.q_int4;
    a.ra4 += r.report.ra_int4;
    q4.push_back(r.report.q_int4);
    a.certified += r.report.cert ? 1 : 0;
    for (const auto& n : r.attacks) {
      if (n.label == "finetune") {
        a.ft_before += n.outcome.fa_before;
        a.ft_after += n.outcome.fa_after;
      }
    }
    ++a.n;
  }
  if (a.n) {
    const double n = static_cast<double>(a.n);
    a.fa /= n, a.ra /= n, a.q8 /= n, a.q4 /= n, a.ra4 /= n, a.ft_before /= n, a.ft_after /= n;
    a.q4_std = eval::mean_std(q4).std;
  }
  return a;
}

fs::path demo_root() { return g_work / "demo"; }

// Runs the demo into the shared work directory, or reads the records a
// previous criterion left there.
std::vector<harness::RunRecord> demo_records(bool fresh, double* seconds = nullptr) {
  const fs::path root = demo_root();
  if (fresh) fs::remove_all(root);
  set_root(root);
  const auto cfg = demo_config();
  if (!fresh && fs::exists(root / "summary.json")) return harness::write_report(root, false);
  const auto start = Clock::now();
  auto records = harness::run_experiment(cfg);
  if (seconds) *seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return records;
}

Outcome c10() {
  Outcome o;
  double run_secs = 0.0;
  const auto records = demo_records(true, &run_secs);
  const auto cfg = demo_config();
  const auto dataset = harness::make_dataset(cfg);
  const auto forget = dataset.split_facts(data::Split::Forget);
  const auto retain = dataset.split_facts(data::Split::Retain);
  std::size_t failed = 0;
  for (const auto& r : records) failed += r.ok() ? 0 : 1;
  o.check(failed == 0, std::to_string(failed) + " failed runs");

  // (a) pretrained checkpoints.
  for (std::uint64_t seed : cfg.seeds) {
    const ParamSet theta0 = harness::pretrain_or_load(cfg, seed);
    const double fa = eval::accuracy(theta0, cfg.model, forget), ra = eval::accuracy(theta0, cfg.model, retain);
    o.check(fa >= kPretrainMin && ra >= kPretrainMin,
            "(a) seed " + std::to_string(seed) + " theta0 FA " + fmt(fa) + ", RA " + fmt(ra));
  }

  // (b) GA, seed means.
  const Arm ga = arm(records, "GA");
  o.check(ga.fa <= kGaMaxFa, "(b) GA FA " + fmt(ga.fa) + " <= " + fmt(kGaMaxFa, 2));
  o.check(ga.ra >= kGaMinRa, "(b) GA RA " + fmt(ga.ra) + " >= " + fmt(kGaMinRa, 2));
  o.check(std::abs(ga.q8 - ga.fa) <= kInt8Gap, "(b) GA |Q-INT8 - FA| = " + fmt(std::abs(ga.q8 - ga.fa)) +
                                                   " <= " + fmt(kInt8Gap, 2));
  o.check(ga.q4 >= ga.fa + kInt4Recovery,
          "(b) GA Q-INT4 " + fmt(ga.q4) + " >= FA + " + fmt(kInt4Recovery, 2) + " = " + fmt(ga.fa + kInt4Recovery));
  o.check(std::abs(ga.ra4 - ga.ra) <= kRaShift, "(b) GA |RA-INT4 - RA| = " + fmt(std::abs(ga.ra4 - ga.ra)) +
                                                    " <= " + fmt(kRaShift, 2));

  // (c) SAF certificate.
  const Arm saf = arm(records, "SAF");
  o.check(saf.n == cfg.seeds.size() && saf.certified == saf.n,
          "(c) SAF certified on " + std::to_string(saf.certified) + "/" + std::to_string(saf.n) + " seeds");
  o.check(saf.q4_std <= kSafInt4StdMax, "(c) SAF Q-INT4 std " + fmt(saf.q4_std) + " <= " + fmt(kSafInt4StdMax, 2));

  // (d) alpha frontier.
  const auto start = Clock::now();
  harness::sweep(cfg, harness::SweepAxis::Alpha);
  const double sweep_secs = std::chrono::duration<double>(Clock::now() - start).count();
  std::ifstream in(demo_root() / "sweep_alpha" / "frontier.csv");
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<double, double>> points;  // (alpha, q_int4)
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    points.emplace_back(std::stod(cells[0]), std::stod(cells[5]));
  }
  std::string curve;
  bool monotone = true;
  for (std::size_t i = 0; i < points.size(); ++i) {
    curve += (i ? ", " : "") + fmt(points[i].first, 1) + ":" + fmt(points[i].second);
    if (i > 0 && points[i].second > points[i - 1].second + kFrontierStepSlack) monotone = false;
  }
  const bool drops = points.size() >= 2 && points.back().second <= points.front().second - kFrontierNetDrop;
  o.check(monotone && drops, "(d) Q-INT4 by alpha_max {" + curve + "} non-increasing within " +
                                 fmt(kFrontierStepSlack, 3) + " and net drop >= " + fmt(kFrontierNetDrop, 2));

  const double minutes = (run_secs + sweep_secs) / 60.0;
  o.check(minutes <= kDemoMinutes, "demo plus sweep " + fmt(minutes, 2) + " min <= " + fmt(kDemoMinutes, 0));
  return o;
}

Outcome c11() {
  Outcome o;
  const auto records = demo_records(false);
  const Arm ga = arm(records, "GA"), saf = arm(records, "SAF");
  o.check(ga.ft_after > ga.ft_before,
          "GA FA after fine-tuning " + fmt(ga.ft_after) + " > before " + fmt(ga.ft_before));
  o.check(saf.ft_after <= ga.ft_after,
          "SAF FA after fine-tuning " + fmt(saf.ft_after) + " <= GA " + fmt(ga.ft_after));
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome c12() {
  Outcome o;
  std::map<std::string, std::string> first;
  for (const char* run : {"det_a", "det_b"}) {
    const fs::path root = g_work / run;
    fs::remove_all(root);
    set_root(root);
    harness::run_experiment(demo_config());
    for (const char* f : {"report.csv", "aggregate.csv", "summary.json"}) {
      const std::string body = slurp(root / f);
      if (first.count(f)) {
        o.check(body == first[f] && !body.empty(), std::string(f) + " byte-identical (" +
                                                       std::to_string(body.size()) + " bytes)");
      } else {
        first[f] = body;
      }
    }
  }
  return o;
}

const std::map<int, std::pair<std::string, std::function<Outcome()>>>& criteria() {
  static const std::map<int, std::pair<std::string, std::function<Outcome()>>> all{
      {1, {"quantizer matches the scalar reference", c1}},
      {2, {"quantizer laws", c2}},
      {3, {"straight-through gradient", c3}},
      {4, {"autodiff finite differences", c4}},
      {5, {"alpha schedule and lambda rule", c5}},
      {6, {"alpha = 0 degeneracy", c6}},
      {7, {"certificate and trilemma replay", c7}},
      {8, {"aggregation replay", c8}},
      {9, {"recovery bound and sharpness floor", c9}},
      {10, {"frozen demo", c10}},
      {11, {"fine-tuning recovery pattern", c11}},
      {12, {"determinism", c12}},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else if (a == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--only N] [--work DIR]\n";
      return 2;
    }
  }
  if (only != 0 && !criteria().count(only)) {
    std::cerr << "no criterion " << only << "\n";
    return 2;
  }
  int failures = 0;
  for (const auto& [id, entry] : criteria()) {
    if (only != 0 && id != only) continue;
    Outcome o;
    try {
      o = entry.second();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    for (const auto& n : o.notes) std::cout << "    " << n << "\n";
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << entry.first << std::endl;
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
