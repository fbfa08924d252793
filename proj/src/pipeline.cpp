#include "pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>
#include <utility>

#include "errors.hpp"
#include "interp.hpp"

namespace pbflow {

namespace {

// Runs f on a worker thread and g on this one; rethrows the first failure.
template <typename F, typename G>
void run_pair(F&& f, G&& g) {
  std::exception_ptr ef, eg;
  std::thread worker([&] {
    try {
      f();
    } catch (...) {
      ef = std::current_exception();
    }
  });
  try {
    g();
  } catch (...) {
    eg = std::current_exception();
  }
  worker.join();
  if (ef) std::rethrow_exception(ef);
  if (eg) std::rethrow_exception(eg);
}

}  // namespace

Tensor normalize_image(const Tensor& image) {
  if (image.rank() != 2)
    throw DimensionError("normalize image: image must be rank-2 [H, W]");
  const auto vals = image.values();
  if (vals.empty()) throw DimensionError("normalize image: empty image");

  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(vals.size());
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  var /= static_cast<double>(vals.size());
  const double sd = std::sqrt(var);

  Tensor out(image.shape());
  if (sd < 1e-12) return out;  // constant image: all zeros
  for (std::size_t i = 0; i < vals.size(); ++i)
    out.data()[i] = (vals[i] - mean) / sd;
  return out;
}

DescriptorField encode_field(EncoderModel& model, const Tensor& image, int patch) {
  if (image.rank() != 2)
    throw DimensionError("encode field: image must be rank-2 [H, W]");
  if (patch < 1) throw DomainError("encode field: patch size must be positive");
  const int h = static_cast<int>(image.dim(0));
  const int w = static_cast<int>(image.dim(1));
  const int iw = w - patch + 1, ih = h - patch + 1;
  if (iw < 1 || ih < 1)
    throw DimensionError("encode field: image smaller than the patch");

  if (model.mode() != Mode::Eval) model.set_mode(Mode::Eval);
  const bool conv_input =
      model.layer_count() > 0 && dynamic_cast<const Conv2D*>(&model.layer(0));
  const std::size_t p = static_cast<std::size_t>(patch);
  const std::size_t dim = descriptor_dim(model, patch);

  DescriptorField field;
  field.width = iw;
  field.height = ih;
  field.dim = dim;
  field.data = Tensor({static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), dim});

  const int lo = (patch - 1) / 2;
  const std::size_t total = static_cast<std::size_t>(iw) * ih;
  const std::size_t chunk = 256;
  for (std::size_t start = 0; start < total; start += chunk) {
    const std::size_t n = std::min(chunk, total - start);
    Tensor batch = conv_input ? Tensor({n, 1, p, p}) : Tensor({n, p * p});
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t pixel = start + s;
      const int cx = static_cast<int>(pixel % iw) + lo;
      const int cy = static_cast<int>(pixel / iw) + lo;
      double* out = batch.data() + s * p * p;
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          out[py * p + px] = image.at(static_cast<std::size_t>(cy - lo) + py,
                                      static_cast<std::size_t>(cx - lo) + px);
    }
    const Tensor desc = model.forward(batch);
    std::copy(desc.data(), desc.data() + n * dim, field.data.data() + start * dim);
  }
  return field;
}

TrainResult train_patch_encoder(EncoderModel& model, const Tensor& img_a,
                                const Tensor& img_b, const FlowField& gt,
                                const PatchTrainOptions& opt) {
  if (opt.pair_count < 4 || opt.pair_count % 2 != 0)
    throw DomainError("patch train: pair count must be even and >= 4");

  const Tensor norm_a = normalize_image(img_a);
  const Tensor norm_b = normalize_image(img_b);

  Rng root(opt.seed);
  Rng data_rng = root.substream("data");
  const PairBatch train =
      sample_pairs(norm_a, norm_b, gt, opt.patch, opt.pair_count, data_rng,
                   opt.sampler);

  Rng init_rng = root.substream("init");
  model.init_params(init_rng);

  TrainOptions topt;
  topt.variant = opt.variant;
  topt.margin = opt.margin;
  topt.lambda = opt.lambda;
  topt.epochs = opt.epochs;
  topt.batch = opt.batch;
  topt.on_epoch = opt.on_epoch;
  Rng train_rng = root.substream("train");
  return train_encoder(model, train, topt, train_rng);
}

void PipelineConfig::validate() const {
  match.validate();
  if (patch < 0) throw DomainError("pipeline config: patch must be >= 0");
  if (knn < 1) throw DomainError("pipeline config: knn must be >= 1");
  if (!std::isfinite(kappa) || kappa < 0.0)
    throw DomainError("pipeline config: kappa must be finite and >= 0");
  if (downsample != 1 && downsample != 2 && downsample != 4)
    throw DomainError("pipeline config: downsample factor must be 1, 2, or 4");
  if (!std::isfinite(bad_threshold) || bad_threshold <= 0.0)
    throw DomainError("pipeline config: bad threshold must be positive");
  if (!std::isfinite(accuracy_radius) || accuracy_radius <= 0.0)
    throw DomainError("pipeline config: accuracy radius must be positive");
}

namespace {

template <typename PredAt>
FlowMetrics metrics_over(const FlowField& gt, double bad_threshold,
                         double accuracy_radius, PredAt&& pred_at) {
  FlowMetrics m;
  double err_sum = 0.0;
  std::size_t bad = 0, good = 0;
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      const std::size_t i = gt.idx(x, y);
      if (!gt.valid[i]) continue;
      double pu, pv;
      if (!pred_at(x, y, pu, pv)) continue;
      const double err = std::hypot(pu - gt.u[i], pv - gt.v[i]);
      err_sum += err;
      if (err > bad_threshold) ++bad;
      if (err < accuracy_radius) ++good;
      ++m.evaluated;
    }
  if (m.evaluated == 0)
    throw DomainError("flow metrics: no pixels with valid ground truth");
  m.epe = err_sum / static_cast<double>(m.evaluated);
  m.bad_rate = static_cast<double>(bad) / static_cast<double>(m.evaluated);
  m.accuracy = static_cast<double>(good) / static_cast<double>(m.evaluated);
  return m;
}

}  // namespace

FlowMetrics flow_metrics(const DenseFlow& pred, const FlowField& gt,
                         double bad_threshold, double accuracy_radius) {
  if (pred.width != gt.width || pred.height != gt.height)
    throw DimensionError("flow metrics: prediction and ground truth sizes differ");
  return metrics_over(gt, bad_threshold, accuracy_radius,
                      [&](int x, int y, double& pu, double& pv) {
                        const std::size_t i = pred.idx(x, y);
                        pu = pred.u[i];
                        pv = pred.v[i];
                        return true;
                      });
}

FlowMetrics flow_metrics_sparse(const FlowField& pred, const FlowField& gt,
                                double bad_threshold, double accuracy_radius) {
  if (pred.width != gt.width || pred.height != gt.height)
    throw DimensionError("flow metrics: prediction and ground truth sizes differ");
  return metrics_over(gt, bad_threshold, accuracy_radius,
                      [&](int x, int y, double& pu, double& pv) {
                        const std::size_t i = pred.idx(x, y);
                        if (!pred.valid[i]) return false;
                        pu = static_cast<double>(pred.u[i]);
                        pv = static_cast<double>(pred.v[i]);
                        return true;
                      });
}

namespace {

// Re-plants an interior-grid flow into image coordinates: interior pixel
// (x, y) sits at image pixel (x + lo, y + lo); offsets carry over as is.
FlowField to_image_coords(const FlowField& interior, int w, int h, int lo) {
  FlowField out(w, h);
  for (int y = 0; y < interior.height; ++y)
    for (int x = 0; x < interior.width; ++x) {
      const std::size_t src = interior.idx(x, y);
      const std::size_t dst = out.idx(x + lo, y + lo);
      out.valid[dst] = interior.valid[src];
      out.u[dst] = interior.u[src];
      out.v[dst] = interior.v[src];
    }
  return out;
}

}  // namespace

FlowResult run_flow(EncoderModel& model, const Tensor& img_a, const Tensor& img_b,
                    const PipelineConfig& cfg, const FlowField* gt) {
  cfg.validate();
  if (img_a.rank() != 2 || img_b.rank() != 2)
    throw DimensionError("run flow: images must be rank-2 [H, W]");
  if (img_a.dim(0) != img_b.dim(0) || img_a.dim(1) != img_b.dim(1))
    throw DimensionError("run flow: images must have the same size");

  int patch = cfg.patch;
  if (patch == 0) patch = required_patch_size(model);
  if (patch < 1)
    throw DomainError(
        "run flow: encoder patch size could not be inferred; set cfg.patch");

  const int w = static_cast<int>(img_a.dim(1));
  const int h = static_cast<int>(img_a.dim(0));
  const int lo = (patch - 1) / 2;

  const Tensor norm_a = normalize_image(img_a);
  const Tensor norm_b = normalize_image(img_b);

  model.set_mode(Mode::Eval);  // before spawning: concurrent forwards read-only
  DescriptorField field_a, field_b;
  run_pair([&] { field_a = encode_field(model, norm_a, patch); },
           [&] { field_b = encode_field(model, norm_b, patch); });

  Rng rng(cfg.match.seed);
  Rng rng_fwd = rng.substream("patchmatch-fwd");
  Rng rng_bwd = rng.substream("patchmatch-bwd");
  FlowField fwd, bwd;
  run_pair([&] { fwd = patchmatch(field_a, field_b, cfg.match, rng_fwd); },
           [&] { bwd = patchmatch(field_b, field_a, cfg.match, rng_bwd); });

  FlowResult result;
  const FlowField fwd_img = to_image_coords(fwd, w, h, lo);
  const FlowField bwd_img = to_image_coords(bwd, w, h, lo);
  result.matched = fwd_img.valid_count();

  auto stage_counts = [&] {
    return " (matched=" + std::to_string(result.matched) +
           ", bidirectional=" + std::to_string(result.after_bidirectional) +
           ", components=" + std::to_string(result.after_components) +
           ", border=" + std::to_string(result.after_border) +
           ", downsample=" + std::to_string(result.after_downsample) + ")";
  };

  FlowField seeds = bidirectional_filter(fwd_img, bwd_img);
  result.after_bidirectional = seeds.valid_count();
  if (result.after_bidirectional == 0)
    throw PipelineError("bidirectional_filter", "no surviving seeds" + stage_counts());

  seeds = connected_component_filter(seeds, cfg.match.cc_area_threshold);
  result.after_components = seeds.valid_count();
  if (result.after_components == 0)
    throw PipelineError("connected_component_filter",
                        "no surviving seeds" + stage_counts());

  seeds = border_filter(seeds, cfg.match.border_margin);
  result.after_border = seeds.valid_count();
  if (result.after_border == 0)
    throw PipelineError("border_filter", "no surviving seeds" + stage_counts());

  seeds = downsample_seeds(seeds, cfg.downsample);
  result.after_downsample = seeds.valid_count();
  if (result.after_downsample == 0)
    throw PipelineError("downsample_seeds", "no surviving seeds" + stage_counts());

  const EdgeCostMap costs = edge_cost(norm_a);
  result.sparse = std::move(seeds);
  result.dense = densify(result.sparse, costs, cfg.knn, cfg.kappa);

  if (gt != nullptr) {
    result.dense_metrics =
        flow_metrics(result.dense, *gt, cfg.bad_threshold, cfg.accuracy_radius);
    result.has_dense_metrics = true;
    try {
      result.sparse_metrics = flow_metrics_sparse(result.sparse, *gt,
                                                  cfg.bad_threshold,
                                                  cfg.accuracy_radius);
      result.has_sparse_metrics = true;
    } catch (const DomainError&) {
      // No surviving seed overlaps a GT-valid pixel: dense metrics stand.
    }
  }
  return result;
}

FlowResult run_flow(const Tensor& img_a, const Tensor& img_b,
                    const PipelineConfig& cfg, const FlowField* gt) {
  EncoderModel model = load_model(cfg.model_path);
  return run_flow(model, img_a, img_b, cfg, gt);
}

}  // namespace pbflow
