#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "csv.hpp"
#include "doctest.h"
#include "errors.hpp"
#include "helpers.hpp"
#include "synthgauss.hpp"

using namespace pbflow;

namespace {

// Independent O(n^2) enumeration of P(nonmatch > match) with ties as 1/2.
double auc_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  double num = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++cnt;
      if (scores[i] > scores[j])
        num += 1.0;
      else if (scores[i] == scores[j])
        num += 0.5;
    }
  }
  return num / static_cast<double>(cnt);
}

SynthConfig small_config() {
  SynthConfig cfg;
  cfg.dim = 16;
  cfg.n_centers = 4;
  cfg.tau = 0.5;
  cfg.n_train = 400;
  cfg.n_test = 400;
  return cfg;
}

}  // namespace

TEST_CASE("auc: frozen hand-enumerated examples") {
  std::vector<double> s{1, 2, 3, 4};
  CHECK(auc(s, std::vector<int>{0, 0, 1, 1}) == doctest::Approx(1.0).epsilon(1e-15));
  // Enumeration: nonmatch scores {1,4} vs match {2,3}; only 4>2 and 4>3 win.
  CHECK(auc(s, std::vector<int>{1, 0, 0, 1}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(auc_oracle(s, {1, 0, 0, 1}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(auc(s, std::vector<int>{1, 1, 0, 0}) == doctest::Approx(0.0).epsilon(1e-15));

  // All ties -> exactly 1/2.
  std::vector<double> flat{2, 2, 2, 2};
  CHECK(auc(flat, std::vector<int>{0, 1, 0, 1}) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("auc: matches enumeration oracle on random tied inputs") {
  Rng rng(401);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 3 + static_cast<std::size_t>(rng.uniform_int(0, 40));
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    // Small integer scores force frequent ties.
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(rng.uniform_int(0, 6));
      labels[i] = static_cast<int>(rng.uniform_int(0, 1));
    }
    labels[0] = 0;
    labels[1] = 1;
    const double got = auc(scores, labels);
    const double want = auc_oracle(scores, labels);
    CHECK(got == doctest::Approx(want).epsilon(1e-14));
  }
}

TEST_CASE("auc: null case near one half, monotone transform invariance") {
  Rng rng(77);
  const std::size_t n = 5000;
  std::vector<double> scores(n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = rng.uniform();
    labels[i] = static_cast<int>(i % 2);
  }
  const double a = auc(scores, labels);
  CHECK(a == doctest::Approx(0.5).epsilon(0.04));

  std::vector<double> squared(n);
  for (std::size_t i = 0; i < n; ++i) squared[i] = scores[i] * scores[i];
  CHECK(auc(squared, labels) == doctest::Approx(a).epsilon(1e-15));
}

TEST_CASE("auc: input validation") {
  std::vector<double> s{1, 2, 3};
  CHECK_THROWS_AS(auc(s, std::vector<int>{0, 0, 0}), DomainError);
  CHECK_THROWS_AS(auc(s, std::vector<int>{1, 1, 1}), DomainError);
  CHECK_THROWS_AS(auc(s, std::vector<int>{0, 1}), DimensionError);
  CHECK_THROWS_AS(auc(s, std::vector<int>{0, 2, 1}), DomainError);
  std::vector<double> bad{1.0, std::nan(""), 2.0};
  CHECK_THROWS_AS(auc(bad, std::vector<int>{0, 1, 0}), DomainError);
  CHECK_THROWS_AS(auc(std::vector<double>{}, std::vector<int>{}), DomainError);
}

TEST_CASE("synth sampling: balance, sharing, normalization, determinism") {
  SynthConfig cfg = small_config();
  Rng rng(11);
  Tensor centers = sample_centers(cfg, rng);
  REQUIRE(centers.dim(0) == 4);
  REQUIRE(centers.dim(1) == 16);
  for (double v : centers.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  PairBatch batch = sample_pairs_gaussian(cfg, centers, 200, rng);
  REQUIRE(batch.size() == 200);
  std::size_t matching = 0;
  for (int l : batch.labels) matching += (l == 0);
  CHECK(matching == 100);  // exactly half

  SUBCASE("zero-noise limit: matching pairs coincide, baseline separates") {
    SynthConfig tiny = cfg;
    tiny.tau = 1e-18;
    Rng r2(12);
    Tensor c2 = sample_centers(tiny, r2);
    PairBatch b2 = sample_pairs_gaussian(tiny, c2, 200, r2);
    std::vector<double> d = raw_pair_distances(b2);
    for (std::size_t i = 0; i < b2.size(); ++i) {
      if (b2.labels[i] == 0)
        CHECK(d[i] <= 1e-7);
      else
        CHECK(d[i] > 0.05);
    }
    CHECK(auc(d, b2.labels) == doctest::Approx(1.0).epsilon(1e-15));
  }

  SUBCASE("normalize gives unit norms") {
    SynthConfig norm_cfg = cfg;
    norm_cfg.normalize = true;
    Rng r3(13);
    Tensor c3 = sample_centers(norm_cfg, r3);
    PairBatch b3 = sample_pairs_gaussian(norm_cfg, c3, 100, r3);
    for (const Tensor* side : {&b3.left, &b3.right}) {
      for (std::size_t i = 0; i < 100; ++i) {
        double norm2 = 0.0;
        for (std::size_t k = 0; k < norm_cfg.dim; ++k) {
          double v = side->at(i, k);
          norm2 += v * v;
        }
        CHECK(std::abs(std::sqrt(norm2) - 1.0) <= 1e-12);
      }
    }
  }

  SUBCASE("same seed reproduces the batch bit for bit") {
    Rng ra(99), rb(99);
    Tensor ca = sample_centers(cfg, ra);
    Tensor cb = sample_centers(cfg, rb);
    PairBatch a = sample_pairs_gaussian(cfg, ca, 64, ra);
    PairBatch b = sample_pairs_gaussian(cfg, cb, 64, rb);
    auto av = a.left.values(), bv = b.left.values();
    CHECK(std::equal(av.begin(), av.end(), bv.begin(), bv.end()));
    auto ar = a.right.values(), br = b.right.values();
    CHECK(std::equal(ar.begin(), ar.end(), br.begin(), br.end()));
    CHECK(a.labels == b.labels);
  }

  SUBCASE("validation errors") {
    SynthConfig bad = cfg;
    bad.n_centers = 1;
    Rng r4(1);
    CHECK_THROWS_AS(sample_centers(bad, r4), DomainError);
    CHECK_THROWS_AS(sample_pairs_gaussian(cfg, centers, 63, rng), DomainError);
    SynthConfig bad_tau = cfg;
    bad_tau.tau = 0.0;
    CHECK_THROWS_AS(sample_centers(bad_tau, r4), DomainError);
    Tensor wrong({2, 16});
    CHECK_THROWS_AS(sample_pairs_gaussian(cfg, wrong, 10, rng), DimensionError);
  }
}

TEST_CASE("raw_pair_distances: hand values") {
  PairBatch b;
  b.left = Tensor({2, 2}, {0, 0, 1, 1});
  b.right = Tensor({2, 2}, {3, 4, 1, 1});
  b.labels = {1, 0};
  std::vector<double> d = raw_pair_distances(b);
  CHECK(d[0] == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(d[1] == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("synth training: easy configuration reaches separation") {
  SynthConfig cfg = small_config();
  cfg.tau = 1e-6;
  Rng rng(21);
  Tensor centers = sample_centers(cfg, rng);
  PairBatch train = sample_pairs_gaussian(cfg, centers, 400, rng);
  PairBatch test = sample_pairs_gaussian(cfg, centers, 400, rng);

  EncoderModel model = make_synth_encoder(cfg.dim, cfg.dim, 3);
  Rng init_rng(22);
  model.init_params(init_rng);
  SynthTrainOptions opt;
  opt.variant = LossVariant::Spring;
  opt.margin = 1.0;
  opt.epochs = 5;
  opt.batch = 40;
  Rng train_rng(23);
  SynthTrainResult tr = train_synth_encoder(model, train, opt, train_rng);
  REQUIRE(tr.ok);
  REQUIRE(tr.epoch_losses.size() == 5);
  for (double l : tr.epoch_losses) CHECK(std::isfinite(l));

  std::vector<double> d = siamese_test_distances(model, test);
  CHECK(auc(d, test.labels) > 0.95);
}

TEST_CASE("synth training: corrupted parameters are reported, not thrown") {
  SynthConfig cfg = small_config();
  Rng rng(31);
  Tensor centers = sample_centers(cfg, rng);
  PairBatch train = sample_pairs_gaussian(cfg, centers, 80, rng);

  EncoderModel model = make_synth_encoder(cfg.dim, cfg.dim, 3);
  Rng init_rng(32);
  model.init_params(init_rng);
  model.parameters()[0]->values()[0] = std::nan("");

  SynthTrainOptions opt;
  opt.epochs = 2;
  opt.batch = 20;
  Rng train_rng(33);
  SynthTrainResult tr = train_synth_encoder(model, train, opt, train_rng);
  CHECK_FALSE(tr.ok);
  CHECK(tr.message.find("non-finite") != std::string::npos);
}

TEST_CASE("run_experiment: smoke grid with reproducible report") {
  SynthRunOptions opt;
  opt.nc_values = {4};
  opt.tau_values = {0.5};
  opt.methods = {"baseline", "spring"};
  opt.repetitions = 2;
  opt.epochs = 3;
  opt.batch = 40;
  opt.margin = 3.0;
  opt.dim = 16;
  opt.n_train = 400;
  opt.n_test = 400;
  opt.seed = 5;

  AucReport report = run_experiment(opt);
  REQUIRE(report.cells.size() == 4);
  REQUIRE(report.summaries.size() == 2);
  for (const SynthCell& c : report.cells) {
    CHECK(c.ok);
    CHECK(c.auc_value >= 0.0);
    CHECK(c.auc_value <= 1.0);
    if (c.method == "baseline")
      CHECK(c.margin == 0.0);
    else
      CHECK(c.margin == 3.0);
  }
  const SynthSummary* base = find_summary(report, "baseline", 4, 0.5);
  REQUIRE(base != nullptr);
  CHECK(base->repetitions_ok == 2);
  CHECK(base->sd_auc >= 0.0);

  SUBCASE("bit-identical rerun, independent of thread count") {
    AucReport again = run_experiment(opt);
    SynthRunOptions threaded = opt;
    threaded.threads = 3;
    AucReport parallel = run_experiment(threaded);
    REQUIRE(again.cells.size() == report.cells.size());
    for (std::size_t i = 0; i < report.cells.size(); ++i) {
      for (const AucReport* other : {&again, &parallel}) {
        CHECK(other->cells[i].method == report.cells[i].method);
        CHECK(other->cells[i].auc_value == report.cells[i].auc_value);
        CHECK(other->cells[i].ok == report.cells[i].ok);
        CHECK(other->cells[i].repetition == report.cells[i].repetition);
      }
    }
  }

  SUBCASE("csv and svg reports") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "pbflow_synth_report";
    fs::create_directories(dir);
    const std::string cells_path = (dir / "cells.csv").string();
    const std::string summary_path = (dir / "summary.csv").string();
    const std::string svg_path = (dir / "auc_plot.svg").string();
    write_report_csv(report, cells_path, summary_path);
    write_report_svg(report, svg_path);

    std::ifstream cells(cells_path);
    std::string line;
    REQUIRE(std::getline(cells, line));
    CHECK(line == "method,n_centers,tau,normalize,repetition,margin,auc,status,message");
    std::size_t rows = 0;
    while (std::getline(cells, line)) ++rows;
    CHECK(rows == report.cells.size());

    std::ifstream summary(summary_path);
    REQUIRE(std::getline(summary, line));
    CHECK(line == "method,n_centers,tau,normalize,repetitions_ok,mean_auc,sd_auc");

    std::ifstream svg(svg_path);
    std::stringstream ss;
    ss << svg.rdbuf();
    const std::string body = ss.str();
    CHECK(body.rfind("<?xml", 0) == 0);
    CHECK(body.find("<svg") != std::string::npos);
    CHECK(body.find("baseline") != std::string::npos);
    CHECK(body.find("spring") != std::string::npos);

    fs::remove_all(dir);
  }

  SUBCASE("margin sweep selects a candidate and records it") {
    SynthRunOptions sweep = opt;
    sweep.margin = 0.0;
    sweep.margin_candidates = {1.0, 3.0};
    sweep.sweep_epochs = 1;
    sweep.repetitions = 1;
    AucReport swept = run_experiment(sweep);
    REQUIRE(swept.resolved_margins.size() == 1);
    CHECK(swept.resolved_margins[0].first == "spring");
    const double m = swept.resolved_margins[0].second;
    CHECK((m == 1.0 || m == 3.0));
    for (const SynthCell& c : swept.cells)
      if (c.method == "spring") CHECK(c.margin == m);
  }

  SUBCASE("option validation") {
    SynthRunOptions bad = opt;
    bad.methods = {"bogus"};
    CHECK_THROWS_AS(run_experiment(bad), DomainError);
    bad = opt;
    bad.batch = 5;
    CHECK_THROWS_AS(run_experiment(bad), DomainError);
    bad = opt;
    bad.repetitions = 0;
    CHECK_THROWS_AS(run_experiment(bad), DomainError);
  }
}

TEST_CASE("csv escaping follows quoting rules") {
  CHECK(csv_escape("plain") == "plain");
  CHECK(csv_escape("a,b") == "\"a,b\"");
  CHECK(csv_escape("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(csv_escape("line\nbreak") == "\"line\nbreak\"");
  std::ostringstream os;
  csv_row(os, {"a", "b,c", "d"});
  CHECK(os.str() == "a,\"b,c\",d\n");
}

TEST_CASE("synthgauss: full-scale single-cell timing" * doctest::skip(true)) {
  SynthConfig cfg;  // defaults: dim 256, n_c 10, tau 3
  Rng rng(1);
  Tensor centers = sample_centers(cfg, rng);
  PairBatch train = sample_pairs_gaussian(cfg, centers, cfg.n_train, rng);
  PairBatch test = sample_pairs_gaussian(cfg, centers, cfg.n_test, rng);

  EncoderModel model = make_synth_encoder();
  Rng init_rng(2);
  model.init_params(init_rng);
  SynthTrainOptions opt;
  opt.variant = LossVariant::SpringSd;
  opt.margin = 3.0;
  opt.epochs = 30;
  Rng train_rng(3);
  const auto t0 = std::chrono::steady_clock::now();
  SynthTrainResult tr = train_synth_encoder(model, train, opt, train_rng);
  const auto t1 = std::chrono::steady_clock::now();
  REQUIRE(tr.ok);
  std::vector<double> d = siamese_test_distances(model, test);
  const auto t2 = std::chrono::steady_clock::now();
  const double a = auc(d, test.labels);
  std::printf("train %.2fs eval %.2fs auc %.4f first-loss %.4f last-loss %.4f\n",
              std::chrono::duration<double>(t1 - t0).count(),
              std::chrono::duration<double>(t2 - t1).count(), a,
              tr.epoch_losses.front(), tr.epoch_losses.back());
  CHECK(a > 0.5);
}
