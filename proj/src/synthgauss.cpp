#include "synthgauss.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <thread>

#include "csv.hpp"
#include "errors.hpp"
#include "losses.hpp"
#include "svg.hpp"

namespace pbflow {

void SynthConfig::validate() const {
  if (dim < 1) throw DomainError("synth: dim must be >= 1");
  if (n_centers < 2) throw DomainError("synth: need at least 2 centers");
  if (!(tau > 0.0) || !std::isfinite(tau))
    throw DomainError("synth: tau must be positive and finite");
  if (n_train < 2 || n_train % 2 != 0)
    throw DomainError("synth: n_train must be even and >= 2");
  if (n_test < 2 || n_test % 2 != 0)
    throw DomainError("synth: n_test must be even and >= 2");
}

Tensor sample_centers(const SynthConfig& cfg, Rng& rng) {
  cfg.validate();
  Tensor centers({static_cast<std::size_t>(cfg.n_centers), cfg.dim});
  for (double& v : centers.values()) v = rng.uniform();
  return centers;
}

namespace {

void fill_sample(const SynthConfig& cfg, const Tensor& centers, int center_idx,
                 Rng& rng, double* out) {
  const double sd = std::sqrt(cfg.tau);
  const double* c = centers.data() + static_cast<std::size_t>(center_idx) * cfg.dim;
  for (std::size_t k = 0; k < cfg.dim; ++k) out[k] = c[k] + rng.normal(0.0, sd);
  if (cfg.normalize) {
    double norm2 = 0.0;
    for (std::size_t k = 0; k < cfg.dim; ++k) norm2 += out[k] * out[k];
    const double norm = std::sqrt(norm2);
    if (norm > 0.0)
      for (std::size_t k = 0; k < cfg.dim; ++k) out[k] /= norm;
  }
}

}  // namespace

PairBatch sample_pairs_gaussian(const SynthConfig& cfg, const Tensor& centers,
                                int count, Rng& rng) {
  cfg.validate();
  if (centers.rank() != 2 || centers.dim(0) != static_cast<std::size_t>(cfg.n_centers) ||
      centers.dim(1) != cfg.dim)
    throw DimensionError("synth: centers shape does not match config");
  if (count < 2 || count % 2 != 0)
    throw DomainError("synth: pair count must be even and >= 2");

  const std::size_t n = static_cast<std::size_t>(count);
  PairBatch batch;
  batch.left = Tensor({n, cfg.dim});
  batch.right = Tensor({n, cfg.dim});
  batch.labels.assign(n, 0);

  const std::size_t half = n / 2;
  for (std::size_t p = 0; p < half; ++p) {
    const int i = static_cast<int>(rng.uniform_int(0, cfg.n_centers - 1));
    fill_sample(cfg, centers, i, rng, batch.left.data() + p * cfg.dim);
    fill_sample(cfg, centers, i, rng, batch.right.data() + p * cfg.dim);
  }
  for (std::size_t p = half; p < n; ++p) {
    const int i = static_cast<int>(rng.uniform_int(0, cfg.n_centers - 1));
    std::int64_t jj = rng.uniform_int(0, cfg.n_centers - 2);
    const int j = static_cast<int>(jj >= i ? jj + 1 : jj);
    fill_sample(cfg, centers, i, rng, batch.left.data() + p * cfg.dim);
    fill_sample(cfg, centers, j, rng, batch.right.data() + p * cfg.dim);
    batch.labels[p] = 1;
  }
  return batch;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw DimensionError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  if (n == 0) throw DomainError("auc: empty input");
  std::size_t n0 = 0, n1 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(scores[i])) throw DomainError("auc: non-finite score");
    if (labels[i] == 0)
      ++n0;
    else if (labels[i] == 1)
      ++n1;
    else
      throw DomainError("auc: labels must be 0 or 1");
  }
  if (n0 == 0 || n1 == 0) throw DomainError("auc: both classes must be present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });

  // Average ranks over tie groups, 1-based; rank-sum of the non-matching
  // class yields the Mann-Whitney U with ties counted 1/2.
  double rank_sum_1 = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum_1 += avg_rank;
    i = j + 1;
  }
  const double u1 = rank_sum_1 - 0.5 * static_cast<double>(n1) * static_cast<double>(n1 + 1);
  return u1 / (static_cast<double>(n0) * static_cast<double>(n1));
}

std::vector<double> raw_pair_distances(const PairBatch& batch) {
  if (batch.left.rank() != 2 || !batch.left.same_shape(batch.right))
    throw DimensionError("raw distances: left/right must be matching rank-2");
  const std::size_t n = batch.left.dim(0), d = batch.left.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    const double* l = batch.left.data() + i * d;
    const double* r = batch.right.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = l[k] - r[k];
      s += diff * diff;
    }
    out[i] = std::sqrt(s);
  }
  return out;
}

std::vector<double> siamese_test_distances(EncoderModel& model,
                                           const PairBatch& batch) {
  model.set_mode(Mode::Eval);
  DistanceBatch d = siamese_distance(model, batch);
  auto vals = d.distances.values();
  return std::vector<double>(vals.begin(), vals.end());
}

namespace {

Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& rows) {
  const std::size_t d = src.dim(1);
  Tensor out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.data() + rows[i] * d, d, out.data() + i * d);
  return out;
}

PairBatch gather_pairs(const PairBatch& src, const std::vector<std::size_t>& rows) {
  PairBatch out;
  out.left = gather_rows(src.left, rows);
  out.right = gather_rows(src.right, rows);
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) out.labels.push_back(src.labels[r]);
  return out;
}

void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
}

}  // namespace

SynthTrainResult train_synth_encoder(EncoderModel& model, const PairBatch& train,
                                     const SynthTrainOptions& opt, Rng& rng) {
  TrainOptions topt;
  topt.variant = opt.variant;
  topt.margin = opt.margin;
  topt.lambda = opt.lambda;
  topt.epochs = opt.epochs;
  topt.batch = opt.batch;
  return train_encoder(model, train, topt, rng);
}

void SynthRunOptions::validate() const {
  if (nc_values.empty() || tau_values.empty())
    throw DomainError("synth run: empty grid axis");
  for (int nc : nc_values)
    if (nc < 2) throw DomainError("synth run: n_centers must be >= 2");
  for (double t : tau_values)
    if (!(t > 0.0) || !std::isfinite(t))
      throw DomainError("synth run: tau must be positive and finite");
  if (methods.empty()) throw DomainError("synth run: no methods selected");
  for (const std::string& m : methods)
    if (m != "baseline") variant_from_name(m);  // throws on unknown
  if (repetitions < 1) throw DomainError("synth run: repetitions must be >= 1");
  if (epochs < 1 || sweep_epochs < 1)
    throw DomainError("synth run: epochs must be >= 1");
  if (batch < 4 || batch % 2 != 0)
    throw DomainError("synth run: batch must be even and >= 4");
  if (!(lambda > 0.0) || lambda > 1.0)
    throw DomainError("synth run: lambda must lie in (0, 1]");
  if (margin < 0.0 || !std::isfinite(margin))
    throw DomainError("synth run: margin must be >= 0 (0 = auto)");
  if (margin == 0.0 && margin_candidates.empty())
    throw DomainError("synth run: margin sweep needs candidates");
  for (double m : margin_candidates)
    if (!(m > 0.0) || !std::isfinite(m))
      throw DomainError("synth run: margin candidates must be positive");
  if (dim < 1) throw DomainError("synth run: dim must be >= 1");
  if (n_train < 4 || n_train % 2 != 0 || n_test < 4 || n_test % 2 != 0)
    throw DomainError("synth run: pair counts must be even and >= 4");
}

namespace {

struct CellKey {
  int nc;
  double tau;
};

struct Dataset {
  PairBatch train, test;
};

SynthConfig cell_config(const SynthRunOptions& opt, const CellKey& key) {
  SynthConfig cfg;
  cfg.dim = opt.dim;
  cfg.n_centers = key.nc;
  cfg.tau = key.tau;
  cfg.n_train = opt.n_train;
  cfg.n_test = opt.n_test;
  cfg.normalize = opt.normalize;
  return cfg;
}

// Data depends only on (seed, cell, repetition): every method scores the
// same samples, making cross-method comparisons paired.
Dataset make_dataset(const SynthRunOptions& opt, const CellKey& key,
                     std::size_t cell_idx, int rep) {
  SynthConfig cfg = cell_config(opt, key);
  Rng rng = Rng(opt.seed).substream("synth-data").substream(cell_idx).substream(
      static_cast<std::uint64_t>(rep));
  Tensor centers = sample_centers(cfg, rng);
  Dataset ds;
  ds.train = sample_pairs_gaussian(cfg, centers, cfg.n_train, rng);
  ds.test = sample_pairs_gaussian(cfg, centers, cfg.n_test, rng);
  return ds;
}

// First 80% of each label class for sweep training, the rest held out.
void split_for_sweep(const PairBatch& train, PairBatch& fit, PairBatch& held) {
  std::vector<std::size_t> match_idx, nonmatch_idx;
  for (std::size_t i = 0; i < train.size(); ++i)
    (train.labels[i] == 0 ? match_idx : nonmatch_idx).push_back(i);
  const std::size_t m_fit = match_idx.size() * 4 / 5;
  const std::size_t n_fit = nonmatch_idx.size() * 4 / 5;
  std::vector<std::size_t> fit_rows, held_rows;
  fit_rows.insert(fit_rows.end(), match_idx.begin(), match_idx.begin() + m_fit);
  fit_rows.insert(fit_rows.end(), nonmatch_idx.begin(), nonmatch_idx.begin() + n_fit);
  held_rows.insert(held_rows.end(), match_idx.begin() + m_fit, match_idx.end());
  held_rows.insert(held_rows.end(), nonmatch_idx.begin() + n_fit, nonmatch_idx.end());
  fit = gather_pairs(train, fit_rows);
  held = gather_pairs(train, held_rows);
}

double tune_margin(const SynthRunOptions& opt, const std::string& method,
                   std::size_t method_idx) {
  const CellKey key{opt.nc_values[0], opt.tau_values[0]};
  Dataset ds = make_dataset(opt, key, 0, 0);
  PairBatch fit, held;
  split_for_sweep(ds.train, fit, held);

  double best_margin = opt.margin_candidates[0];
  double best_auc = -1.0;
  for (std::size_t ci = 0; ci < opt.margin_candidates.size(); ++ci) {
    EncoderModel model = make_synth_encoder(opt.dim, opt.dim, 3);
    Rng init_rng = Rng(opt.seed).substream("sweep-init").substream(method_idx)
                       .substream(ci);
    model.init_params(init_rng);
    SynthTrainOptions topt;
    topt.variant = variant_from_name(method);
    topt.margin = opt.margin_candidates[ci];
    topt.lambda = opt.lambda;
    topt.epochs = opt.sweep_epochs;
    topt.batch = opt.batch;
    Rng train_rng = Rng(opt.seed).substream("sweep-train").substream(method_idx)
                        .substream(ci);
    SynthTrainResult tr = train_synth_encoder(model, fit, topt, train_rng);
    if (!tr.ok) continue;
    std::vector<double> d = siamese_test_distances(model, held);
    bool finite = true;
    for (double v : d)
      if (!std::isfinite(v)) finite = false;
    if (!finite) continue;
    const double a = auc(d, held.labels);
    if (a > best_auc) {  // ties keep the smaller candidate
      best_auc = a;
      best_margin = opt.margin_candidates[ci];
    }
  }
  return best_margin;
}

SynthCell run_cell(const SynthRunOptions& opt, const std::string& method,
                   std::size_t method_idx, const CellKey& key, std::size_t cell_idx,
                   int rep, double margin) {
  SynthCell cell;
  cell.method = method;
  cell.n_centers = key.nc;
  cell.tau = key.tau;
  cell.normalize = opt.normalize;
  cell.repetition = rep;
  cell.margin = method == "baseline" ? 0.0 : margin;

  Dataset ds = make_dataset(opt, key, cell_idx, rep);
  std::vector<double> distances;
  if (method == "baseline") {
    distances = raw_pair_distances(ds.test);
  } else {
    EncoderModel model = make_synth_encoder(opt.dim, opt.dim, 3);
    Rng init_rng = Rng(opt.seed).substream("train-init").substream(method_idx)
                       .substream(cell_idx).substream(static_cast<std::uint64_t>(rep));
    model.init_params(init_rng);
    SynthTrainOptions topt;
    topt.variant = variant_from_name(method);
    topt.margin = margin;
    topt.lambda = opt.lambda;
    topt.epochs = opt.epochs;
    topt.batch = opt.batch;
    Rng train_rng = Rng(opt.seed).substream("train-order").substream(method_idx)
                        .substream(cell_idx).substream(static_cast<std::uint64_t>(rep));
    SynthTrainResult tr = train_synth_encoder(model, ds.train, topt, train_rng);
    if (!tr.ok) {
      cell.message = tr.message;
      return cell;
    }
    distances = siamese_test_distances(model, ds.test);
    for (double v : distances) {
      if (!std::isfinite(v)) {
        cell.message = "non-finite test distances";
        return cell;
      }
    }
  }
  cell.auc_value = auc(distances, ds.test.labels);
  cell.ok = true;
  return cell;
}

}  // namespace

AucReport run_experiment(const SynthRunOptions& opt) {
  opt.validate();
  AucReport report;
  report.options = opt;

  std::vector<CellKey> keys;
  for (int nc : opt.nc_values)
    for (double tau : opt.tau_values) keys.push_back({nc, tau});

  // Margins resolved up front (serially) so every cell of a method agrees.
  std::vector<double> method_margin(opt.methods.size(), 0.0);
  for (std::size_t mi = 0; mi < opt.methods.size(); ++mi) {
    if (opt.methods[mi] == "baseline") continue;
    method_margin[mi] = opt.margin > 0.0 ? opt.margin
                                         : tune_margin(opt, opt.methods[mi], mi);
    report.resolved_margins.emplace_back(opt.methods[mi], method_margin[mi]);
  }

  const std::size_t reps = static_cast<std::size_t>(opt.repetitions);
  const std::size_t total = opt.methods.size() * keys.size() * reps;
  report.cells.resize(total);

  auto slot = [&](std::size_t mi, std::size_t ci, std::size_t r) {
    return (mi * keys.size() + ci) * reps + r;
  };
  auto run_job = [&](std::size_t job) {
    const std::size_t r = job % reps;
    const std::size_t ci = (job / reps) % keys.size();
    const std::size_t mi = job / (reps * keys.size());
    report.cells[slot(mi, ci, r)] =
        run_cell(opt, opt.methods[mi], mi, keys[ci], ci, static_cast<int>(r),
                 method_margin[mi]);
  };

  unsigned n_threads = opt.threads > 0 ? static_cast<unsigned>(opt.threads)
                                       : std::max(1u, std::thread::hardware_concurrency());
  n_threads = std::min<unsigned>(n_threads, static_cast<unsigned>(total));
  if (n_threads <= 1) {
    for (std::size_t job = 0; job < total; ++job) run_job(job);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (unsigned t = 0; t < n_threads; ++t) {
      pool.emplace_back([&]() {
        for (std::size_t job = next.fetch_add(1); job < total;
             job = next.fetch_add(1))
          run_job(job);
      });
    }
    for (auto& th : pool) th.join();
  }

  for (std::size_t mi = 0; mi < opt.methods.size(); ++mi) {
    for (std::size_t ci = 0; ci < keys.size(); ++ci) {
      SynthSummary s;
      s.method = opt.methods[mi];
      s.n_centers = keys[ci].nc;
      s.tau = keys[ci].tau;
      s.normalize = opt.normalize;
      std::vector<double> values;
      for (std::size_t r = 0; r < reps; ++r) {
        const SynthCell& c = report.cells[slot(mi, ci, r)];
        if (c.ok) values.push_back(c.auc_value);
      }
      s.repetitions_ok = static_cast<int>(values.size());
      if (!values.empty()) {
        auto [mean, sd] = mean_std(values);
        s.mean_auc = mean;
        s.sd_auc = sd;
      }
      report.summaries.push_back(s);
    }
  }
  return report;
}

const SynthSummary* find_summary(const AucReport& report, const std::string& method,
                                 int n_centers, double tau) {
  for (const SynthSummary& s : report.summaries)
    if (s.method == method && s.n_centers == n_centers && s.tau == tau) return &s;
  return nullptr;
}

void write_report_csv(const AucReport& report, const std::string& cells_path,
                      const std::string& summary_path) {
  std::ofstream cells(cells_path, std::ios::binary);
  if (!cells) throw IoError("synth report: cannot open " + cells_path);
  csv_row(cells, {"method", "n_centers", "tau", "normalize", "repetition",
                  "margin", "auc", "status", "message"});
  for (const SynthCell& c : report.cells) {
    csv_row(cells, {c.method, csv_num(c.n_centers), csv_num(c.tau),
                    c.normalize ? "1" : "0", csv_num(c.repetition),
                    csv_num(c.margin), c.ok ? csv_num(c.auc_value) : "",
                    c.ok ? "ok" : "failed", c.message});
  }
  if (!cells) throw IoError("synth report: write failed for " + cells_path);

  std::ofstream summary(summary_path, std::ios::binary);
  if (!summary) throw IoError("synth report: cannot open " + summary_path);
  csv_row(summary, {"method", "n_centers", "tau", "normalize", "repetitions_ok",
                    "mean_auc", "sd_auc"});
  for (const SynthSummary& s : report.summaries) {
    csv_row(summary, {s.method, csv_num(s.n_centers), csv_num(s.tau),
                      s.normalize ? "1" : "0", csv_num(s.repetitions_ok),
                      s.repetitions_ok ? csv_num(s.mean_auc) : "",
                      s.repetitions_ok ? csv_num(s.sd_auc) : ""});
  }
  if (!summary) throw IoError("synth report: write failed for " + summary_path);
}

void write_report_svg(const AucReport& report, const std::string& path) {
  const bool over_nc = report.options.nc_values.size() >= report.options.tau_values.size();
  const double fixed_tau = report.options.tau_values[0];
  const int fixed_nc = report.options.nc_values[0];

  PlotSpec spec;
  spec.title = report.options.normalize ? "Mean AUC, normalized samples"
                                        : "Mean AUC, raw samples";
  spec.x_label = over_nc ? "number of centers" : "noise variance";
  spec.y_label = "mean AUC (whiskers = SD)";
  for (const std::string& method : report.options.methods) {
    PlotSeries series;
    series.name = method;
    if (over_nc) {
      for (int nc : report.options.nc_values) {
        const SynthSummary* s = find_summary(report, method, nc, fixed_tau);
        if (s && s->repetitions_ok > 0)
          series.points.push_back({static_cast<double>(nc), s->mean_auc, s->sd_auc});
      }
    } else {
      for (double tau : report.options.tau_values) {
        const SynthSummary* s = find_summary(report, method, fixed_nc, tau);
        if (s && s->repetitions_ok > 0)
          series.points.push_back({tau, s->mean_auc, s->sd_auc});
      }
    }
    spec.series.push_back(std::move(series));
  }
  write_line_plot(path, spec);
}

}  // namespace pbflow
