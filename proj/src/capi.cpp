#include "pbflow.h"

#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "csv.hpp"
#include "errors.hpp"
#include "flow_io.hpp"
#include "image.hpp"
#include "losses.hpp"
#include "net.hpp"
#include "pipeline.hpp"
#include "synthgauss.hpp"

namespace {

thread_local std::string g_last_error;

template <typename F>
pbf_status guarded(F&& fn) {
  try {
    fn();
    g_last_error.clear();
    return PBF_OK;
  } catch (const pbflow::DimensionError& e) {
    g_last_error = e.what();
    return PBF_ERR_DIMENSION;
  } catch (const pbflow::DomainError& e) {
    g_last_error = e.what();
    return PBF_ERR_DOMAIN;
  } catch (const pbflow::DegenerateBatchError& e) {
    g_last_error = e.what();
    return PBF_ERR_DEGENERATE_BATCH;
  } catch (const pbflow::StateError& e) {
    g_last_error = e.what();
    return PBF_ERR_STATE;
  } catch (const pbflow::SamplingError& e) {
    g_last_error = e.what();
    return PBF_ERR_SAMPLING;
  } catch (const pbflow::InterpolationError& e) {
    g_last_error = e.what();
    return PBF_ERR_INTERPOLATION;
  } catch (const pbflow::PipelineError& e) {
    g_last_error = e.what();
    return PBF_ERR_PIPELINE;
  } catch (const pbflow::IoError& e) {
    g_last_error = e.what();
    return PBF_ERR_IO;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PBF_ERR_RUNTIME;
  } catch (...) {
    g_last_error = "unknown error";
    return PBF_ERR_RUNTIME;
  }
}

pbf_status invalid(const char* message) {
  g_last_error = message;
  return PBF_ERR_INVALID_ARGUMENT;
}

pbflow::LossVariant to_variant(pbf_loss_variant v) {
  switch (v) {
    case PBF_LOSS_SPRING:
      return pbflow::LossVariant::Spring;
    case PBF_LOSS_CENTRIFUGE:
      return pbflow::LossVariant::Centrifuge;
    case PBF_LOSS_SPRING_SD:
      return pbflow::LossVariant::SpringSd;
    case PBF_LOSS_CENTRIFUGE_SD:
      return pbflow::LossVariant::CentrifugeSd;
  }
  throw pbflow::DomainError("unknown loss variant code");
}

pbflow::DistanceBatch to_batch(const double* distances, const int* labels,
                               size_t count) {
  pbflow::DistanceBatch batch;
  batch.distances =
      pbflow::Tensor({count}, std::vector<double>(distances, distances + count));
  batch.labels.assign(labels, labels + count);
  return batch;
}

}  // namespace

struct pbf_image {
  pbflow::Tensor pixels;  // [H, W]
};

struct pbf_flow {
  pbflow::FlowData data;
};

struct pbf_model {
  pbflow::EncoderModel model;
};

extern "C" {

const char* pbf_version(void) {
#ifdef PBFLOW_VERSION_STRING
  return PBFLOW_VERSION_STRING;
#else
  return "0.0.0";
#endif
}

const char* pbf_last_error(void) { return g_last_error.c_str(); }

pbf_status pbf_pair_loss(pbf_loss_variant variant, int label, double distance,
                         double margin, double* out) {
  if (!out) return invalid("pbf_pair_loss: out is null");
  return guarded([&] {
    *out = pbflow::pair_loss(to_variant(variant), label, distance, margin);
  });
}

pbf_status pbf_batch_loss(pbf_loss_variant variant, double margin, double lambda,
                          const double* distances, const int* labels,
                          size_t count, double* out) {
  if (!out || !distances || !labels)
    return invalid("pbf_batch_loss: null pointer argument");
  return guarded([&] {
    pbflow::LossConfig cfg{to_variant(variant), margin,
                           lambda > 0.0 ? lambda : 0.8};
    *out = pbflow::batch_loss(cfg, to_batch(distances, labels, count));
  });
}

pbf_status pbf_batch_loss_grad(pbf_loss_variant variant, double margin,
                               double lambda, const double* distances,
                               const int* labels, size_t count,
                               double* grad_out) {
  if (!grad_out || !distances || !labels)
    return invalid("pbf_batch_loss_grad: null pointer argument");
  return guarded([&] {
    pbflow::LossConfig cfg{to_variant(variant), margin,
                           lambda > 0.0 ? lambda : 0.8};
    pbflow::Tensor g =
        pbflow::batch_loss_grad(cfg, to_batch(distances, labels, count));
    std::memcpy(grad_out, g.data(), count * sizeof(double));
  });
}

pbf_status pbf_auc(const double* scores, const int* labels, size_t count,
                   double* out) {
  if (!out || !scores || !labels) return invalid("pbf_auc: null pointer argument");
  return guarded([&] {
    *out = pbflow::auc({scores, count}, {labels, count});
  });
}

/* ---------------------------------------------------------------- images */

pbf_status pbf_image_create(int width, int height, const double* pixels,
                            pbf_image** out) {
  if (!out || !pixels) return invalid("pbf_image_create: null pointer argument");
  *out = nullptr;
  return guarded([&] {
    if (width < 1 || height < 1)
      throw pbflow::DimensionError("image: width and height must be >= 1");
    const size_t n = static_cast<size_t>(width) * static_cast<size_t>(height);
    pbflow::Tensor t({static_cast<size_t>(height), static_cast<size_t>(width)},
                     std::vector<double>(pixels, pixels + n));
    *out = new pbf_image{std::move(t)};
  });
}

pbf_status pbf_image_read_pgm(const char* path, pbf_image** out) {
  if (!out || !path) return invalid("pbf_image_read_pgm: null pointer argument");
  *out = nullptr;
  return guarded([&] { *out = new pbf_image{pbflow::read_pgm(path)}; });
}

pbf_status pbf_image_write_pgm(const pbf_image* img, const char* path) {
  if (!img || !path) return invalid("pbf_image_write_pgm: null pointer argument");
  return guarded([&] { pbflow::write_pgm(img->pixels, path); });
}

int pbf_image_width(const pbf_image* img) {
  return img ? static_cast<int>(img->pixels.dim(1)) : 0;
}

int pbf_image_height(const pbf_image* img) {
  return img ? static_cast<int>(img->pixels.dim(0)) : 0;
}

void pbf_image_free(pbf_image* img) { delete img; }

/* ----------------------------------------------------------- flow fields */

pbf_status pbf_flow_create(int width, int height, const float* u, const float* v,
                           const uint8_t* valid, pbf_flow** out) {
  if (!out || !u || !v || !valid)
    return invalid("pbf_flow_create: null pointer argument");
  *out = nullptr;
  return guarded([&] {
    pbflow::FlowData data(width, height);
    const size_t n = data.u.size();
    data.u.assign(u, u + n);
    data.v.assign(v, v + n);
    data.valid.assign(valid, valid + n);
    data.validate();
    *out = new pbf_flow{std::move(data)};
  });
}

pbf_status pbf_flow_read(const char* path, pbf_flow** out) {
  if (!out || !path) return invalid("pbf_flow_read: null pointer argument");
  *out = nullptr;
  return guarded([&] { *out = new pbf_flow{pbflow::read_flow(path)}; });
}

pbf_status pbf_flow_write(const pbf_flow* flow, const char* path) {
  if (!flow || !path) return invalid("pbf_flow_write: null pointer argument");
  return guarded([&] { pbflow::write_flow(path, flow->data); });
}

int pbf_flow_width(const pbf_flow* flow) { return flow ? flow->data.width : 0; }

int pbf_flow_height(const pbf_flow* flow) { return flow ? flow->data.height : 0; }

pbf_status pbf_flow_get(const pbf_flow* flow, int x, int y, float* u, float* v,
                        uint8_t* valid) {
  if (!flow) return invalid("pbf_flow_get: flow is null");
  return guarded([&] {
    if (x < 0 || x >= flow->data.width || y < 0 || y >= flow->data.height)
      throw pbflow::DomainError("pbf_flow_get: pixel out of bounds");
    const size_t i = flow->data.idx(x, y);
    if (u) *u = flow->data.u[i];
    if (v) *v = flow->data.v[i];
    if (valid) *valid = flow->data.valid[i];
  });
}

void pbf_flow_free(pbf_flow* flow) { delete flow; }

/* ---------------------------------------------------------------- models */

pbf_status pbf_model_load(const char* path, pbf_model** out) {
  if (!out || !path) return invalid("pbf_model_load: null pointer argument");
  *out = nullptr;
  return guarded([&] { *out = new pbf_model{pbflow::load_model(path)}; });
}

pbf_status pbf_model_save(const pbf_model* model, const char* path) {
  if (!model || !path) return invalid("pbf_model_save: null pointer argument");
  return guarded([&] { pbflow::save_model(model->model, path); });
}

int pbf_model_patch_size(const pbf_model* model) {
  if (!model) return 0;
  try {
    return pbflow::required_patch_size(model->model);
  } catch (...) {
    return 0;
  }
}

void pbf_model_free(pbf_model* model) { delete model; }

/* -------------------------------------------- synthetic cluster benchmark */

pbf_status pbf_synth_run(const pbf_synth_opts* opts, const char* out_dir,
                         int* any_cell_failed) {
  if (!opts || !out_dir) return invalid("pbf_synth_run: null pointer argument");
  if (!opts->nc_values || opts->nc_count == 0)
    return invalid("pbf_synth_run: nc_values is required");
  if (!opts->tau_values || opts->tau_count == 0)
    return invalid("pbf_synth_run: tau_values is required");
  return guarded([&] {
    pbflow::SynthRunOptions ropt;
    ropt.nc_values.assign(opts->nc_values, opts->nc_values + opts->nc_count);
    ropt.tau_values.assign(opts->tau_values, opts->tau_values + opts->tau_count);
    ropt.normalize = opts->normalize != 0;
    if (opts->methods) {
      ropt.methods.clear();
      std::istringstream ms(opts->methods);
      std::string method;
      while (std::getline(ms, method, ','))
        if (!method.empty()) ropt.methods.push_back(method);
    }
    if (opts->repetitions > 0) ropt.repetitions = opts->repetitions;
    if (opts->epochs > 0) ropt.epochs = opts->epochs;
    if (opts->batch > 0) ropt.batch = opts->batch;
    if (opts->lambda > 0.0) ropt.lambda = opts->lambda;
    if (opts->margin > 0.0) ropt.margin = opts->margin;
    ropt.threads = opts->threads;
    ropt.seed = opts->seed;

    const pbflow::AucReport report = pbflow::run_experiment(ropt);
    const std::string dir(out_dir);
    pbflow::write_report_csv(report, dir + "/cells.csv", dir + "/summary.csv");
    if (opts->write_svg) pbflow::write_report_svg(report, dir + "/auc_plot.svg");

    if (any_cell_failed) {
      *any_cell_failed = 0;
      for (const pbflow::SynthCell& cell : report.cells)
        if (!cell.ok) *any_cell_failed = 1;
    }
  });
}

/* -------------------------------------------------------------- training */

pbf_status pbf_train_run(const pbf_train_opts* opts, const char* out_checkpoint,
                         const char* log_csv) {
  if (!opts || !out_checkpoint)
    return invalid("pbf_train_run: null pointer argument");
  if (!opts->data_file) return invalid("pbf_train_run: data_file is required");
  if (!(opts->margin > 0.0)) return invalid("pbf_train_run: margin must be > 0");
  const int patch = opts->patch > 0 ? opts->patch : 9;
  if (patch % 2 == 0) return invalid("pbf_train_run: patch must be odd");

  bool diverged = false;
  std::string divergence;
  const pbf_status status = guarded([&] {
    const int epochs = opts->epochs > 0 ? opts->epochs : 20;
    const int batch = opts->batch > 0 ? opts->batch : 256;
    const int pair_count = opts->pairs_per_epoch > 0 ? opts->pairs_per_epoch : 2048;
    const double lambda = opts->lambda > 0.0 ? opts->lambda : 0.8;

    // One whitespace-separated triple per line: first second flow.
    std::ifstream list(opts->data_file);
    if (!list)
      throw pbflow::IoError(std::string("train: cannot open data file ") +
                            opts->data_file);
    struct Triple {
      pbflow::Tensor first, second;
      pbflow::FlowField gt;
    };
    std::vector<Triple> triples;
    std::string line;
    while (std::getline(list, line)) {
      std::istringstream ls(line);
      std::string a, b, f;
      if (!(ls >> a >> b >> f)) {
        if (a.empty()) continue;  // blank line
        throw pbflow::IoError("train: malformed data file line: " + line);
      }
      Triple t;
      t.first = pbflow::normalize_image(pbflow::read_pgm(a));
      t.second = pbflow::normalize_image(pbflow::read_pgm(b));
      t.gt = pbflow::to_flow_field(pbflow::read_flow(f));
      triples.push_back(std::move(t));
    }
    if (triples.empty()) throw pbflow::IoError("train: data file lists no pairs");

    // Sampling budget split evenly across pairs, kept even per pair.
    pbflow::Rng root(opts->seed);
    pbflow::Rng data_rng = root.substream("data");
    const int per_pair = std::max(
        2, (pair_count / static_cast<int>(triples.size())) / 2 * 2);
    pbflow::PairBatch train;
    for (size_t i = 0; i < triples.size(); ++i) {
      pbflow::Rng pair_rng = data_rng.substream(i);
      pbflow::PairBatch part =
          pbflow::sample_pairs(triples[i].first, triples[i].second, triples[i].gt,
                               patch, per_pair, pair_rng);
      if (train.labels.empty()) {
        train = std::move(part);
      } else {
        const size_t n0 = train.labels.size(), n1 = part.labels.size();
        const size_t stride = train.left.size() / n0;
        std::vector<size_t> shape = train.left.shape();
        shape[0] = n0 + n1;
        pbflow::Tensor left(shape), right(shape);
        std::copy_n(train.left.data(), n0 * stride, left.data());
        std::copy_n(part.left.data(), n1 * stride, left.data() + n0 * stride);
        std::copy_n(train.right.data(), n0 * stride, right.data());
        std::copy_n(part.right.data(), n1 * stride, right.data() + n0 * stride);
        train.left = std::move(left);
        train.right = std::move(right);
        train.labels.insert(train.labels.end(), part.labels.begin(),
                            part.labels.end());
      }
    }

    pbflow::EncoderModel model = pbflow::make_patch_encoder(
        static_cast<size_t>(patch));
    pbflow::Rng init_rng = root.substream("init");
    model.init_params(init_rng);

    pbflow::TrainOptions topt;
    topt.variant = to_variant(opts->variant);
    topt.margin = opts->margin;
    topt.lambda = lambda;
    topt.epochs = epochs;
    topt.batch = batch;
    topt.on_epoch = [&](int, double) {
      pbflow::save_model(model, out_checkpoint);
    };
    pbflow::Rng train_rng = root.substream("train");
    const pbflow::TrainResult result =
        pbflow::train_encoder(model, train, topt, train_rng);

    if (log_csv) {
      std::ofstream log(log_csv, std::ios::trunc);
      if (!log)
        throw pbflow::IoError(std::string("train: cannot open log ") + log_csv);
      pbflow::csv_row(log, {"epoch", "mean_loss"});
      for (size_t e = 0; e < result.epoch_losses.size(); ++e)
        pbflow::csv_row(log, {pbflow::csv_num(e), pbflow::csv_num(result.epoch_losses[e])});
    }
    if (!result.ok) {
      diverged = true;
      divergence = result.message;
    }
  });
  if (status != PBF_OK) return status;
  if (diverged) {
    g_last_error = "train: " + divergence;
    return PBF_ERR_RUNTIME;
  }
  return PBF_OK;
}

/* ------------------------------------------------------ end-to-end flow */

pbf_status pbf_flow_run(pbf_model* model, const pbf_image* first,
                        const pbf_image* second, const pbf_flow* gt,
                        const pbf_flow_opts* opts, pbf_flow** sparse_out,
                        pbf_flow** dense_out, pbf_flow_stats* stats) {
  if (!model || !first || !second || !opts)
    return invalid("pbf_flow_run: null pointer argument");
  if (sparse_out) *sparse_out = nullptr;
  if (dense_out) *dense_out = nullptr;
  return guarded([&] {
    pbflow::PipelineConfig cfg;
    cfg.match.iterations = opts->iterations > 0 ? opts->iterations : 2;
    cfg.match.search_radius = opts->search_radius > 0 ? opts->search_radius : 32;
    cfg.match.cc_area_threshold = opts->cc_area >= 0 ? opts->cc_area : 50;
    cfg.match.border_margin = opts->border >= 0 ? opts->border : 8;
    cfg.match.seed = opts->seed;
    cfg.downsample = opts->downsample > 0 ? opts->downsample : 1;
    cfg.knn = opts->knn > 0 ? opts->knn : 25;
    cfg.kappa = opts->kappa >= 0.0 ? opts->kappa : 100.0;
    cfg.bad_threshold = opts->bad_threshold > 0.0 ? opts->bad_threshold : 3.0;
    cfg.accuracy_radius =
        opts->accuracy_radius > 0.0 ? opts->accuracy_radius : 10.0;

    pbflow::FlowField gt_field;
    if (gt) gt_field = pbflow::to_flow_field(gt->data);

    const pbflow::FlowResult res =
        pbflow::run_flow(model->model, first->pixels, second->pixels, cfg,
                         gt ? &gt_field : nullptr);

    if (sparse_out) *sparse_out = new pbf_flow{pbflow::to_flow_data(res.sparse)};
    if (dense_out) *dense_out = new pbf_flow{pbflow::to_flow_data(res.dense)};
    if (stats) {
      const double nan = std::nan("");
      stats->has_metrics = res.has_dense_metrics ? 1 : 0;
      stats->dense_epe = res.has_dense_metrics ? res.dense_metrics.epe : nan;
      stats->dense_bad_rate =
          res.has_dense_metrics ? res.dense_metrics.bad_rate : nan;
      stats->dense_accuracy =
          res.has_dense_metrics ? res.dense_metrics.accuracy : nan;
      stats->sparse_epe = res.has_sparse_metrics ? res.sparse_metrics.epe : nan;
      stats->sparse_bad_rate =
          res.has_sparse_metrics ? res.sparse_metrics.bad_rate : nan;
      stats->sparse_accuracy =
          res.has_sparse_metrics ? res.sparse_metrics.accuracy : nan;
      stats->raw_matches = res.matched;
      stats->surviving_matches = res.after_border;
      stats->seeds_used = res.after_downsample;
    }
  });
}

pbf_status pbf_flow_stats_csv(const pbf_flow_stats* stats, const char* path) {
  if (!stats || !path) return invalid("pbf_flow_stats_csv: null pointer argument");
  return guarded([&] {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw pbflow::IoError(std::string("stats: cannot open ") + path);
    auto field = [](double v) {
      return std::isnan(v) ? std::string() : pbflow::csv_num(v);
    };
    pbflow::csv_row(out, {"scope", "epe", "bad_rate", "accuracy", "raw_matches",
                          "surviving_matches", "seeds_used"});
    pbflow::csv_row(out, {"dense", field(stats->dense_epe),
                          field(stats->dense_bad_rate),
                          field(stats->dense_accuracy),
                          pbflow::csv_num(stats->raw_matches),
                          pbflow::csv_num(stats->surviving_matches),
                          pbflow::csv_num(stats->seeds_used)});
    pbflow::csv_row(out, {"sparse", field(stats->sparse_epe),
                          field(stats->sparse_bad_rate),
                          field(stats->sparse_accuracy),
                          pbflow::csv_num(stats->raw_matches),
                          pbflow::csv_num(stats->surviving_matches),
                          pbflow::csv_num(stats->seeds_used)});
    if (!out) throw pbflow::IoError(std::string("stats: write failed for ") + path);
  });
}

}  // extern "C"
