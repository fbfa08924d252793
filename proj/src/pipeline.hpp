#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include "flow_field.hpp"
#include "matcher.hpp"
#include "net.hpp"
#include "tensor.hpp"

namespace pbflow {

// Per-image standardization: subtract the image's own mean, divide by its
// own SD. Constant images (SD below 1e-12) map to all zeros.
Tensor normalize_image(const Tensor& image);

// Per-pixel descriptors of centered patches, computed with the encoder in
// Eval mode. Only pixels whose whole patch lies inside the image carry a
// descriptor: the returned field spans the interior grid of size
// (W - patch + 1) x (H - patch + 1), whose origin sits at image pixel
// ((patch-1)/2, (patch-1)/2). Throws DimensionError when the image is
// smaller than the patch.
//
// Concurrency: safe to call from several threads on one model as long as
// the model is already in Eval mode (forward is then read-only).
DescriptorField encode_field(EncoderModel& model, const Tensor& image, int patch);

struct PatchTrainOptions {
  LossVariant variant = LossVariant::SpringSd;
  double margin = 10.0;
  double lambda = 0.8;
  int epochs = 20;
  int batch = 64;         // pairs per step, split half/half between labels
  int patch = 9;
  int pair_count = 1024;  // sampled once up front, iterated every epoch
  std::uint64_t seed = 7;
  SamplerOptions sampler;
  std::function<void(int, double)> on_epoch;  // forwarded to train_encoder
};

// Fresh training run of a patch encoder on pairs sampled from one image
// pair with ground-truth flow. Both images are standardized first (the
// same preprocessing run_flow applies), then opt.pair_count pairs are
// drawn once and trained over with train_encoder. Initialises the model's
// parameters. Randomness derives from opt.seed via the named sub-streams
// "data", "init", and "train".
TrainResult train_patch_encoder(EncoderModel& model, const Tensor& img_a,
                                const Tensor& img_b, const FlowField& gt,
                                const PatchTrainOptions& opt);

struct PipelineConfig {
  std::string model_path;  // checkpoint for the path-loading overload
  MatchConfig match;       // iterations, search radius, filters, seed
  int patch = 0;           // 0 infers the size from the encoder
  int knn = 25;            // neighbors per pixel in densification
  double kappa = 100.0;    // edge cost weight in geodesic distances
  int downsample = 1;      // seed decimation factor, one of {1, 2, 4}
  double bad_threshold = 3.0;
  double accuracy_radius = 10.0;

  void validate() const;
};

// Error statistics over ground-truth-valid pixels.
struct FlowMetrics {
  double epe = 0.0;        // mean endpoint error
  double bad_rate = 0.0;   // fraction with error > bad_threshold
  double accuracy = 0.0;   // fraction with error < accuracy_radius
  std::size_t evaluated = 0;
};

// Dense prediction scored at every ground-truth-valid pixel.
FlowMetrics flow_metrics(const DenseFlow& pred, const FlowField& gt,
                         double bad_threshold = 3.0, double accuracy_radius = 10.0);
// Sparse prediction scored only where both prediction and ground truth
// are valid. Both variants throw DomainError when no pixel qualifies.
FlowMetrics flow_metrics_sparse(const FlowField& pred, const FlowField& gt,
                                double bad_threshold = 3.0,
                                double accuracy_radius = 10.0);

struct FlowResult {
  FlowField sparse;  // surviving seeds in image coordinates
  DenseFlow dense;

  // Surviving-seed counts per stage, for diagnostics and CSV reporting.
  std::size_t matched = 0, after_bidirectional = 0, after_components = 0,
              after_border = 0, after_downsample = 0;

  // Metrics are filled only when ground truth was supplied. The dense and
  // sparse scores use different denominators (all GT-valid pixels vs the
  // surviving subset) and are reported separately.
  bool has_dense_metrics = false, has_sparse_metrics = false;
  FlowMetrics dense_metrics, sparse_metrics;
};

// Full correspondence pipeline on a same-size image pair: normalize,
// encode both images, match in both directions, apply the bidirectional,
// component-area, and border filters, decimate seeds, then densify over
// the first image's edge cost map. The two encodes and the two match
// directions each run concurrently. A stage that leaves zero valid seeds
// throws PipelineError naming the stage and the per-stage counts.
FlowResult run_flow(EncoderModel& model, const Tensor& img_a, const Tensor& img_b,
                    const PipelineConfig& cfg, const FlowField* gt = nullptr);
// Loads the encoder from cfg.model_path first.
FlowResult run_flow(const Tensor& img_a, const Tensor& img_b,
                    const PipelineConfig& cfg, const FlowField* gt = nullptr);

}  // namespace pbflow
