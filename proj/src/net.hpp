#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "flow_field.hpp"
#include "losses.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pbflow {

enum class Mode { Train, Eval };

// Activations a layer saves during forward for its exact backward pass.
struct LayerContext {
  bool filled = false;
  std::vector<Tensor> saved;
  std::vector<std::size_t> ints;
};

// One stage of the encoder. Batch tensors are [n, ...per-sample shape].
// backward() accumulates parameter gradients (callers reset via the
// model's zero_grad) and returns the input gradient when requested.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual const char* kind() const = 0;
  virtual Tensor forward(const Tensor& x, Mode mode, LayerContext* ctx) = 0;
  virtual Tensor backward(const LayerContext& ctx, const Tensor& grad_out,
                          bool need_input_grad) = 0;
  virtual std::vector<Tensor*> parameters() { return {}; }
  virtual std::vector<Tensor*> gradients() { return {}; }
  // Per-sample shape transformation; throws DimensionError when shapes
  // do not compose.
  virtual std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const = 0;
  virtual void init(Rng& rng) { (void)rng; }
};

class Dense final : public Layer {
 public:
  Dense(std::size_t in_dim, std::size_t out_dim);
  const char* kind() const override { return "dense"; }
  Tensor forward(const Tensor& x, Mode mode, LayerContext* ctx) override;
  Tensor backward(const LayerContext& ctx, const Tensor& grad_out,
                  bool need_input_grad) override;
  std::vector<Tensor*> parameters() override { return {&weight, &bias}; }
  std::vector<Tensor*> gradients() override { return {&dweight, &dbias}; }
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override;
  void init(Rng& rng) override;

  std::size_t in_dim, out_dim;
  Tensor weight, bias;      // weight [out, in], bias [out]
  Tensor dweight, dbias;
};

class Conv2D final : public Layer {
 public:
  Conv2D(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t stride = 1);
  const char* kind() const override { return "conv2d"; }
  Tensor forward(const Tensor& x, Mode mode, LayerContext* ctx) override;
  Tensor backward(const LayerContext& ctx, const Tensor& grad_out,
                  bool need_input_grad) override;
  std::vector<Tensor*> parameters() override { return {&weight, &bias}; }
  std::vector<Tensor*> gradients() override { return {&dweight, &dbias}; }
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override;
  void init(Rng& rng) override;

  std::size_t in_ch, out_ch, k, stride;
  Tensor weight, bias;      // weight [out_ch, in_ch, k, k]
  Tensor dweight, dbias;
};

// Max pooling with clipped windows: the last window may extend past the
// input edge and is truncated, so out = ceil((in - k) / stride) + 1 and
// inputs smaller than k still produce one output.
class MaxPool final : public Layer {
 public:
  MaxPool(std::size_t k, std::size_t stride);
  const char* kind() const override { return "maxpool"; }
  Tensor forward(const Tensor& x, Mode mode, LayerContext* ctx) override;
  Tensor backward(const LayerContext& ctx, const Tensor& grad_out,
                  bool need_input_grad) override;
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override;

  std::size_t k, stride;
  static std::size_t out_extent(std::size_t in, std::size_t k, std::size_t stride);
};

class LeakyReLU final : public Layer {
 public:
  explicit LeakyReLU(double alpha = 0.1) : alpha(alpha) {}
  const char* kind() const override { return "leaky_relu"; }
  Tensor forward(const Tensor& x, Mode mode, LayerContext* ctx) override;
  Tensor backward(const LayerContext& ctx, const Tensor& grad_out,
                  bool need_input_grad) override;
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override {
    return in;
  }

  double alpha;
};

// Batch normalization with independent statistics per activation position:
// every coordinate of the per-sample activation volume is normalized over
// the batch axis on its own, instead of pooling over a whole channel.
class BatchNormFineGrained final : public Layer {
 public:
  explicit BatchNormFineGrained(std::vector<std::size_t> activation_shape,
                                double eps = 1e-5, double momentum = 0.1);
  const char* kind() const override { return "batchnorm_fine"; }
  Tensor forward(const Tensor& x, Mode mode, LayerContext* ctx) override;
  Tensor backward(const LayerContext& ctx, const Tensor& grad_out,
                  bool need_input_grad) override;
  std::vector<Tensor*> parameters() override { return {&gamma, &beta}; }
  std::vector<Tensor*> gradients() override { return {&dgamma, &dbeta}; }
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override;

  std::vector<std::size_t> activation_shape;
  double eps, momentum;
  Tensor gamma, beta, running_mean, running_var;
  Tensor dgamma, dbeta;
};

// Conventional batch normalization: one statistic per channel, pooled over
// batch and spatial axes. Accepts [n, C] or [n, C, H, W].
class BatchNormConventional final : public Layer {
 public:
  explicit BatchNormConventional(std::size_t channels, double eps = 1e-5,
                                 double momentum = 0.1);
  const char* kind() const override { return "batchnorm_conv"; }
  Tensor forward(const Tensor& x, Mode mode, LayerContext* ctx) override;
  Tensor backward(const LayerContext& ctx, const Tensor& grad_out,
                  bool need_input_grad) override;
  std::vector<Tensor*> parameters() override { return {&gamma, &beta}; }
  std::vector<Tensor*> gradients() override { return {&dgamma, &dbeta}; }
  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& in) const override;

  std::size_t channels;
  double eps, momentum;
  Tensor gamma, beta, running_mean, running_var;
  Tensor dgamma, dbeta;
};

struct ForwardCache {
  Mode mode = Mode::Eval;
  std::vector<LayerContext> layers;
};

// Ordered layer stack encoding a batch of inputs into descriptors.
class EncoderModel {
 public:
  EncoderModel() = default;
  EncoderModel(EncoderModel&&) = default;
  EncoderModel& operator=(EncoderModel&&) = default;

  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  std::size_t layer_count() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }

  void set_mode(Mode m) { mode_ = m; }
  Mode mode() const { return mode_; }

  void init_params(Rng& rng);
  void zero_grad();
  std::vector<Tensor*> parameters();
  std::vector<Tensor*> gradients();

  Tensor forward(const Tensor& x, ForwardCache* cache = nullptr);
  // Gradient of a scalar loss through the stack. Parameter gradients
  // accumulate; the return value is the input gradient when
  // want_input_grad is set (empty tensor otherwise).
  Tensor backward(const ForwardCache& cache, const Tensor& grad_descriptors,
                  bool want_input_grad = false);

  std::vector<std::size_t> output_shape(
      const std::vector<std::size_t>& per_sample_input) const;

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
  Mode mode_ = Mode::Train;
};

// Paired inputs with match labels (0 matching, 1 non-matching).
struct PairBatch {
  Tensor left, right;
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

struct SiameseCache {
  ForwardCache left, right;
  Tensor desc_left, desc_right;           // flattened [n, D]
  std::vector<std::size_t> out_shape;     // raw encoder output shape
};

// One shared parameter set encodes both sides; D[i] = ||f(l_i) - f(r_i)||2.
DistanceBatch siamese_distance(EncoderModel& model, const PairBatch& batch,
                               SiameseCache* cache = nullptr);

// Backprop d(loss)/d(distance) through both encoder passes; parameter
// gradients accumulate across the two passes. At distance exactly 0 the
// gradient is defined as the zero vector.
void siamese_backward(EncoderModel& model, const SiameseCache& cache,
                      const Tensor& grad_distances);

// Accumulates squared gradient and squared update averages per parameter;
// steps parameters in place.
class AdaDelta {
 public:
  explicit AdaDelta(double rho = 0.95, double eps = 1e-6);
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor*>& grads);
  double rho() const { return rho_; }
  double eps() const { return eps_; }

 private:
  double rho_, eps_;
  std::vector<Tensor> eg2_, edx2_;
  bool initialised_ = false;
};

struct TrainOptions {
  LossVariant variant = LossVariant::Spring;
  double margin = 1.0;
  double lambda = 0.8;
  int epochs = 30;
  int batch = 256;  // pairs per step, split half/half between labels
  // Called after each completed epoch with (epoch index, mean loss);
  // lets callers checkpoint as they go.
  std::function<void(int, double)> on_epoch;
};

struct TrainResult {
  bool ok = true;
  std::string message;
  std::vector<double> epoch_losses;
};

// AdaDelta training over shuffled class-stratified batches. The model must
// already be initialised. A non-finite loss or distance stops training and
// reports failure instead of throwing; parameters keep their last state
// from before the failing step.
TrainResult train_encoder(EncoderModel& model, const PairBatch& train,
                          const TrainOptions& opt, Rng& rng);

// Canned architectures.
EncoderModel make_synth_encoder(std::size_t in_dim = 256, std::size_t hidden = 256,
                                std::size_t depth = 3);
EncoderModel make_patch_encoder(std::size_t patch = 9, std::size_t c1 = 8,
                                std::size_t c2 = 16, std::size_t descriptor = 32);
// Full-size stack mapping a 51x51 patch to a 512-D descriptor.
EncoderModel make_reference_encoder();

// Smallest square patch the encoder maps to a spatially 1x1 descriptor;
// 0 when no size up to 256 does (e.g. dense-only stacks).
int required_patch_size(const EncoderModel& model);
// Flat descriptor length for a given patch size.
std::size_t descriptor_dim(const EncoderModel& model, int patch);

// Checkpoint I/O. Layout: magic "PBNET1", layer descriptor table, then
// row-major little-endian 64-bit float parameter blobs in layer order.
void save_model(const EncoderModel& model, const std::string& path);
EncoderModel load_model(const std::string& path);

struct SamplerOptions {
  int min_shift = 1, max_shift = 8;  // non-matching offset magnitudes
  bool augment = true;               // random flips and 90-degree rotations
};

// Draws n/2 matching and n/2 non-matching patch pairs from an image pair
// with ground-truth flow. Matching pairs follow the flow exactly;
// non-matching pairs add independent per-axis shifts of +-{min..max}.
// Augmentation applies the same transform to both members of a pair.
// Output tensors are [n, 1, patch, patch].
PairBatch sample_pairs(const Tensor& first, const Tensor& second,
                       const FlowField& gt, int patch, int count, Rng& rng,
                       const SamplerOptions& opt = {});

}  // namespace pbflow
