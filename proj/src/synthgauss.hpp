#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "net.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pbflow {

// Cluster benchmark: points are Gaussian perturbations of uniform centers in
// [0,1]^dim; a pair matches when both points share a center.
struct SynthConfig {
  std::size_t dim = 256;
  int n_centers = 10;
  double tau = 3.0;  // per-coordinate noise variance
  int n_train = 10000;
  int n_test = 10000;
  bool normalize = false;

  void validate() const;
};

// Centers for one repetition, [n_centers, dim].
Tensor sample_centers(const SynthConfig& cfg, Rng& rng);

// `count` pairs, first half matching (label 0), second half non-matching
// (label 1, ordered center pair i != j uniform). count must be even and >= 2.
PairBatch sample_pairs_gaussian(const SynthConfig& cfg, const Tensor& centers,
                                int count, Rng& rng);

// P(score[nonmatch] > score[match]) with ties counted 1/2 (Mann-Whitney).
// Labels: 0 matching, 1 non-matching. Throws DomainError if a class is empty.
double auc(std::span<const double> scores, std::span<const int> labels);

// ||left_i - right_i|| without any model (the no-training baseline).
std::vector<double> raw_pair_distances(const PairBatch& batch);

// Eval-mode siamese distances for every pair in the batch.
std::vector<double> siamese_test_distances(EncoderModel& model,
                                           const PairBatch& batch);

struct SynthTrainOptions {
  LossVariant variant = LossVariant::Spring;
  double margin = 1.0;
  double lambda = 0.8;
  int epochs = 30;
  int batch = 256;  // pairs per step, split half/half between labels
};

using SynthTrainResult = TrainResult;

// train_encoder with options mapped from SynthTrainOptions.
SynthTrainResult train_synth_encoder(EncoderModel& model, const PairBatch& train,
                                     const SynthTrainOptions& opt, Rng& rng);

struct SynthRunOptions {
  std::vector<int> nc_values{10};
  std::vector<double> tau_values{3.0};
  bool normalize = false;
  // Any of: baseline, spring, centrifuge, spring_sd, centrifuge_sd.
  std::vector<std::string> methods{"baseline", "spring", "centrifuge",
                                   "spring_sd", "centrifuge_sd"};
  int repetitions = 10;
  int epochs = 30;
  int batch = 256;
  double lambda = 0.8;
  // 0 selects per-method tuning: coarse sweep on a held-out fifth of the
  // first cell's repetition-0 training data.
  double margin = 0.0;
  std::vector<double> margin_candidates{1.0, 3.0, 10.0, 30.0};
  int sweep_epochs = 6;
  int threads = 1;  // <=0 uses hardware_concurrency
  std::uint64_t seed = 7;
  std::size_t dim = 256;
  int n_train = 10000;
  int n_test = 10000;

  void validate() const;
};

struct SynthCell {
  std::string method;
  int n_centers = 0;
  double tau = 0.0;
  bool normalize = false;
  int repetition = 0;
  double margin = 0.0;  // 0 for baseline
  double auc_value = 0.0;
  bool ok = false;
  std::string message;  // failure reason when !ok
};

struct SynthSummary {
  std::string method;
  int n_centers = 0;
  double tau = 0.0;
  bool normalize = false;
  int repetitions_ok = 0;
  double mean_auc = 0.0;
  double sd_auc = 0.0;
};

struct AucReport {
  SynthRunOptions options;
  std::vector<std::pair<std::string, double>> resolved_margins;
  std::vector<SynthCell> cells;        // method-major, then cell, then rep
  std::vector<SynthSummary> summaries; // same order minus repetition
};

// Full grid: every method x (n_centers, tau) cell x repetition. Data is keyed
// by (cell, repetition) only, so methods see identical samples. Divergence is
// recorded per cell; the run continues.
AucReport run_experiment(const SynthRunOptions& opt);

// Convenience for tests and summaries.
const SynthSummary* find_summary(const AucReport& report, const std::string& method,
                                 int n_centers, double tau);

void write_report_csv(const AucReport& report, const std::string& cells_path,
                      const std::string& summary_path);
void write_report_svg(const AucReport& report, const std::string& path);

}  // namespace pbflow
