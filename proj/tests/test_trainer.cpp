#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "look/error.hpp"
#include "look/objectives.hpp"
#include "look/trainer.hpp"
#include "oracles.hpp"

using namespace look;

namespace {

const LabeledDataset& tiny_data() {
  static const LabeledDataset d = gen_synthetic(fixture::tiny_spec(), 3).data;
  return d;
}

Batch first_batch(const LabeledDataset& d, std::size_t n) {
  const auto tr = d.indices(Split::kTrain);
  const std::vector<std::size_t> rows(tr.begin(), tr.begin() + static_cast<std::ptrdiff_t>(n));
  return Batch{d.x.gather_rows(rows), d.labels_at(rows)};
}

std::vector<double> flat(const std::vector<const Matrix*>& ps) {
  std::vector<double> v;
  for (const Matrix* p : ps) v.insert(v.end(), p->values().begin(), p->values().end());
  return v;
}

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("SgdMomentum follows the momentum update with folded decay") {
  SgdMomentum opt(0.9, 0.1);
  Matrix w = Matrix::from_rows({{1.0, -2.0}});
  Matrix b = Matrix::from_rows({{0.5}});
  const Matrix gw = Matrix::from_rows({{0.2, 0.4}});
  const Matrix gb;
  opt.step({&w, &b}, {&gw, &gb}, 0.5);
  // v = g + wd w
  CHECK(w(0, 0) == doctest::Approx(1.0 - 0.5 * (0.2 + 0.1)));
  CHECK(w(0, 1) == doctest::Approx(-2.0 - 0.5 * (0.4 - 0.2)));
  CHECK(b(0, 0) == 0.5);
  const double v0 = 0.2 + 0.1 * 1.0;
  const double w1 = w(0, 0);
  opt.step({&w, &b}, {&gw, &gb}, 0.5);
  CHECK(w(0, 0) == doctest::Approx(w1 - 0.5 * (0.9 * v0 + 0.2 + 0.1 * w1)));
  SgdMomentum masked(0.0, 1.0);
  Matrix a = Matrix::from_rows({{1.0}});
  Matrix c = Matrix::from_rows({{1.0}});
  const Matrix zero = Matrix::from_rows({{0.0}});
  masked.step({&a, &c}, {&zero, &zero}, 0.1, {true, false});
  CHECK(a(0, 0) == doctest::Approx(0.9));
  CHECK(c(0, 0) == 1.0);
  CHECK_THROWS_AS(masked.step({&a, &c}, {&zero, &zero}, 0.1, {true}), ShapeError);
}

TEST_CASE("train_step with lr 0 leaves parameters unchanged and advances the queue") {
  const LabeledDataset& d = tiny_data();
  TrainConfig cfg = fixture::tiny_train();
  TrainContext ctx = make_context(d, cfg);
  prefill_from_train(ctx, d);
  ctx.cfg.schedule.lr_init = 0.0;
  const ModelState before = ctx.state;
  const std::uint64_t seq = ctx.queue->next_seq();
  train_step(ctx, first_batch(d, 16), 0);
  CHECK(flat(online_parameters(std::as_const(ctx.state))) == flat(online_parameters(before)));
  CHECK(ctx.queue->next_seq() == seq + 16);
  CHECK(ctx.state.step == before.step + 1);
}

TEST_CASE("train_step is deterministic") {
  const LabeledDataset& d = tiny_data();
  for (Objective o : {Objective::kLook, Objective::kCe, Objective::kSupCon}) {
    TrainConfig cfg = fixture::tiny_train(o);
    cfg.two_views = true;
    TrainContext a = make_context(d, cfg);
    TrainContext b = make_context(d, cfg);
    prefill_from_train(a, d);
    prefill_from_train(b, d);
    const StepMetrics ma = train_step(a, first_batch(d, 16), 0);
    const StepMetrics mb = train_step(b, first_batch(d, 16), 0);
    CHECK(ma.loss == mb.loss);
    CHECK(a.state == b.state);
  }
}

TEST_CASE("train_step loss equals the standalone loss on a hand-built queue") {
  std::mt19937_64 rng(4);
  TrainConfig cfg = fixture::tiny_train();
  cfg.batch_size = 1;
  cfg.queue_capacity = 8;
  cfg.schedule.k_start = 5;
  cfg.schedule.k_end = 5;
  cfg.schedule.tau_start = 0.5;
  cfg.schedule.tau_end = 0.5;
  TrainContext ctx(cfg, init_model(cfg.encoder, cfg.projector, cfg.predictor, 9));
  ctx.queue.emplace(8, 8);
  ctx.queue->push_batch(oracle::random_unit_rows(8, 8, rng), std::vector<Label>{0, 1, 2, 0, 1, 2, 0, 1});
  const Batch b{oracle::random_matrix(1, 8, rng), {1}};
  const Matrix p = forward_online(ctx.state, b.x).p_z();
  const NeighborSet n = topk(*ctx.queue, p.row(0), 5);
  const LookLossResult want = look_loss(p.row(0), 1, n, 0.5, cfg.clamp_epsilon);
  const StepMetrics got = train_step(ctx, b, 0);
  CHECK(got.loss == doctest::Approx(want.loss).epsilon(1e-14));
  CHECK(got.k == 5);
  CHECK(got.clamp_frac == (want.clamped ? 1.0 : 0.0));
}

TEST_CASE("supcon batch loss equals the standalone mean on a frozen snapshot") {
  const LabeledDataset& d = tiny_data();
  TrainConfig cfg = fixture::tiny_train(Objective::kSupCon);
  TrainContext ctx = make_context(d, cfg);
  prefill_from_train(ctx, d);
  const Batch b = first_batch(d, 16);
  const Matrix p = forward_online(ctx.state, b.x).p_z();
  const double tau = schedule_at(cfg.schedule, 0).tau;
  double sum = 0.0;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    const auto r = supcon_loss(p.row(i), b.y[i], *ctx.queue, tau);
    if (!r) continue;
    sum += r->loss;
    ++kept;
  }
  REQUIRE(kept > 0);
  const StepMetrics m = train_step(ctx, b, 0);
  CHECK(m.loss == doctest::Approx(sum / static_cast<double>(kept)).epsilon(1e-13));
}

TEST_CASE("train_step refuses an unfilled queue") {
  const LabeledDataset& d = tiny_data();
  TrainContext ctx = make_context(d, fixture::tiny_train());
  CHECK_THROWS_AS(train_step(ctx, first_batch(d, 16), 0), StateError);
}

TEST_CASE("queue never holds current-batch entries at loss time") {
  // Rebuild the loss-time state each step: every stored seq predates the batch.
  const LabeledDataset& d = tiny_data();
  TrainContext ctx = make_context(d, fixture::tiny_train());
  prefill_from_train(ctx, d);
  const auto tr = d.indices(Split::kTrain);
  for (std::size_t s = 0; s < 10; ++s) {
    const std::vector<std::size_t> rows(tr.begin() + static_cast<std::ptrdiff_t>(16 * s),
                                        tr.begin() + static_cast<std::ptrdiff_t>(16 * s + 16));
    const std::uint64_t first = ctx.queue->next_seq();
    CHECK_FALSE(ctx.queue->holds_seq_at_or_after(first));
    train_step(ctx, Batch{d.x.gather_rows(rows), d.labels_at(rows)}, 0);
    CHECK(ctx.queue->holds_seq_at_or_after(first));
  }
}

TEST_CASE("EMA drift stays within the discounted update bound") {
  // With d_t = theta_m - theta the step gives d_t = m (d_{t-1} - delta_t),
  // hence |d_T| <= m * sum_t |delta_t|.
  const LabeledDataset& d = tiny_data();
  TrainConfig cfg = fixture::tiny_train();
  cfg.ema_momentum = 0.9;
  TrainContext ctx = make_context(d, cfg);
  prefill_from_train(ctx, d);
  const auto tr = d.indices(Split::kTrain);
  double total = 0.0;
  std::vector<double> prev = flat(tracked_online_parameters(ctx.state));
  std::vector<double> gap(prev.size(), 0.0);
  for (std::size_t s = 0; s < 15; ++s) {
    const std::vector<std::size_t> rows(tr.begin() + static_cast<std::ptrdiff_t>(16 * s),
                                        tr.begin() + static_cast<std::ptrdiff_t>(16 * s + 16));
    train_step(ctx, Batch{d.x.gather_rows(rows), d.labels_at(rows)}, 0);
    const std::vector<double> now = flat(tracked_online_parameters(ctx.state));
    const std::vector<double> mom = flat(momentum_parameters(std::as_const(ctx.state)));
    total += dist(now, prev);
    for (std::size_t i = 0; i < gap.size(); ++i) gap[i] = 0.9 * (gap[i] - (now[i] - prev[i]));
    const std::vector<double> zero(gap.size(), 0.0);
    std::vector<double> actual(gap.size());
    for (std::size_t i = 0; i < gap.size(); ++i) actual[i] = mom[i] - now[i];
    CHECK(dist(actual, gap) < 1e-12);
    CHECK(dist(mom, now) <= 0.9 * total + 1e-12);
    prev = now;
  }
  CHECK(total > 0.0);
}

TEST_CASE("train_run with zero epochs returns the initial state") {
  const LabeledDataset& d = tiny_data();
  TrainConfig cfg = fixture::tiny_train(Objective::kLook, 0);
  const TrainResult r = train_run(d, cfg);
  CHECK(r.log.rows.empty());
  CHECK(r.state == init_model(cfg.encoder, cfg.projector, cfg.predictor, cfg.seed));
  std::ostringstream out;
  r.log.write_csv(out, false);
  CHECK(out.str() == "epoch,loss,clamp_frac,k,tau,lr,knn_acc,seconds\n");
}

TEST_CASE("train_run validates before doing work") {
  const LabeledDataset& d = tiny_data();
  TrainConfig cfg = fixture::tiny_train();
  cfg.queue_capacity = d.indices(Split::kTrain).size();
  CHECK_THROWS_AS(train_run(d, cfg), ConfigError);
  cfg = fixture::tiny_train();
  cfg.batch_size = 65;
  CHECK_THROWS_AS(train_run(d, cfg), ConfigError);
  cfg = fixture::tiny_train();
  cfg.encoder = MlpSpec{{7, 16, 16}};
  CHECK_THROWS_AS(train_run(d, cfg), ConfigError);
  cfg = fixture::tiny_train();
  cfg.schedule.total_epochs = 3;
  CHECK_THROWS_AS(train_run(d, cfg), ConfigError);
}

TEST_CASE("train_run logs one row per epoch and is deterministic") {
  const LabeledDataset& d = tiny_data();
  for (Objective o : {Objective::kLook, Objective::kCe, Objective::kSupCon}) {
    TrainConfig cfg = fixture::tiny_train(o, 3);
    cfg.monitor_every = 2;
    const TrainResult a = train_run(d, cfg);
    const TrainResult b = train_run(d, cfg);
    REQUIRE(a.log.rows.size() == 3);
    CHECK(a.log.rows[1].knn_acc.has_value());
    CHECK_FALSE(a.log.rows[0].knn_acc.has_value());
    CHECK(a.log.rows[2].knn_acc.has_value());
    CHECK(a.state == b.state);
    std::ostringstream la, lb;
    a.log.write_csv(la, false);
    b.log.write_csv(lb, false);
    CHECK(la.str() == lb.str());
    CHECK(a.queue.has_value() == (o != Objective::kCe));
  }
}

TEST_CASE("CE separates linearly separable two-class data within 50 epochs") {
  std::mt19937_64 rng(7);
  LabeledDataset d;
  const std::size_t n = 400;
  d.x = Matrix(n, 8);
  d.num_classes = 2;
  std::normal_distribution<double> g(0.0, 0.3);
  for (std::size_t i = 0; i < n; ++i) {
    const Label y = static_cast<Label>(i % 2);
    d.y.push_back(y);
    for (std::size_t c = 0; c < 8; ++c) d.x(i, c) = g(rng);
    d.x(i, 0) = y == 0 ? 1.0 + std::abs(g(rng)) : -1.0 - std::abs(g(rng));
  }
  assign_splits(d, 0.2, 0.3, 1);
  TrainConfig cfg = fixture::tiny_train(Objective::kCe, 50);
  const TrainResult r = train_run(d, cfg);
  const auto tr = d.indices(Split::kTrain);
  const OnlineForward f = forward_online(r.state, d.x.gather_rows(tr));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    auto row = f.logits().row(i);
    const auto pred = static_cast<Label>(std::max_element(row.begin(), row.end()) - row.begin());
    if (pred == d.y[tr[i]]) ++correct;
  }
  CHECK(correct == tr.size());
}

TEST_CASE("knn_predict matches the naive oracle including ties") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> coarse(-2, 2);
  for (int t = 0; t < 20; ++t) {
    // Coarse integer coordinates make equal similarities common.
    Matrix bank(100, 3);
    for (double& v : bank.values()) v = coarse(rng);
    for (std::size_t r = 0; r < 100; ++r) bank(r, 0) += 3.0;
    bank = normalize_rows(bank);
    std::vector<Label> y(100);
    for (auto& v : y) v = static_cast<Label>(rng() % 4);
    for (bool self : {false, true}) {
      const std::size_t k = 1 + static_cast<std::size_t>(t) * 5;
      CHECK(knn_predict(bank, y, bank, k, 0.1, 4, self) == oracle::naive_knn(bank, y, bank, k, 0.1, 4, self));
    }
  }
}

TEST_CASE("knn monitor examples") {
  std::mt19937_64 rng(9);
  // Three well separated clusters.
  Matrix bank(90, 4);
  std::vector<Label> y(90);
  std::normal_distribution<double> g(0.0, 0.05);
  for (std::size_t i = 0; i < 90; ++i) {
    y[i] = static_cast<Label>(i % 3);
    for (std::size_t c = 0; c < 4; ++c) bank(i, c) = (c == static_cast<std::size_t>(y[i]) ? 1.0 : 0.0) + g(rng);
  }
  bank = normalize_rows(bank);
  CHECK(knn_monitor(bank, y, bank, y, 10, 0.1, 3, true) == 1.0);
  const Matrix big = oracle::random_unit_rows(3000, 6, rng);
  std::vector<Label> yy(3000);
  for (auto& v : yy) v = static_cast<Label>(rng() % 4);
  const Matrix q = oracle::random_unit_rows(2000, 6, rng);
  std::vector<Label> qy(2000);
  for (auto& v : qy) v = static_cast<Label>(rng() % 4);
  const double acc = knn_monitor(big, yy, q, qy, 200, 0.1, 4);
  const double sd = std::sqrt(0.25 * 0.75 / 2000.0);
  CHECK(std::abs(acc - 0.25) < 3.0 * sd);
  CHECK_THROWS_AS(knn_monitor(Matrix(0, 6), std::vector<Label>{}, q, qy, 200, 0.1, 4), StateError);
}

TEST_CASE("parse_objective round trip") {
  for (Objective o : {Objective::kLook, Objective::kCe, Objective::kSupCon}) CHECK(parse_objective(to_string(o)) == o);
  CHECK_THROWS_AS(parse_objective("nca"), ConfigError);
}
