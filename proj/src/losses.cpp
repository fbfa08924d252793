#include "losses.hpp"

#include <cmath>
#include <string>

#include "errors.hpp"

namespace pbflow {

bool has_sd_term(LossVariant v) {
  return v == LossVariant::SpringSd || v == LossVariant::CentrifugeSd;
}

LossVariant core_variant(LossVariant v) {
  switch (v) {
    case LossVariant::SpringSd:
      return LossVariant::Spring;
    case LossVariant::CentrifugeSd:
      return LossVariant::Centrifuge;
    default:
      return v;
  }
}

const char* variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::Spring:
      return "spring";
    case LossVariant::Centrifuge:
      return "centrifuge";
    case LossVariant::SpringSd:
      return "spring_sd";
    case LossVariant::CentrifugeSd:
      return "centrifuge_sd";
  }
  return "?";
}

LossVariant variant_from_name(std::string_view name) {
  if (name == "spring") return LossVariant::Spring;
  if (name == "centrifuge") return LossVariant::Centrifuge;
  if (name == "spring_sd") return LossVariant::SpringSd;
  if (name == "centrifuge_sd") return LossVariant::CentrifugeSd;
  throw DomainError("unknown loss variant: " + std::string(name));
}

void LossConfig::validate() const {
  if (!(margin > 0.0) || !std::isfinite(margin))
    throw DomainError("loss config: margin must be positive and finite");
  if (!(lambda > 0.0) || !(lambda <= 1.0))
    throw DomainError("loss config: lambda must lie in (0, 1]");
}

void DistanceBatch::validate() const {
  if (distances.rank() != 1)
    throw DimensionError("distance batch: distances must be rank-1");
  if (distances.size() != labels.size())
    throw DimensionError("distance batch: distances and labels differ in length");
  if (labels.empty()) throw DomainError("distance batch: empty batch");
  for (double d : distances.values()) {
    if (!(d >= 0.0) || !std::isfinite(d))
      throw DomainError("distance batch: distances must be non-negative and finite");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw DomainError("distance batch: labels must be 0 or 1");
  }
}

double pair_loss(LossVariant variant, int label, double distance, double margin) {
  if (has_sd_term(variant))
    throw DomainError("pair_loss: expects a core variant (no SD term)");
  if (!(distance >= 0.0)) throw DomainError("pair_loss: negative distance");
  if (!(margin > 0.0)) throw DomainError("pair_loss: margin must be positive");
  if (label != 0 && label != 1) throw DomainError("pair_loss: label must be 0 or 1");
  if (label == 0) return 0.5 * distance * distance;
  if (variant == LossVariant::Spring) {
    const double gap = margin - distance;
    return gap > 0.0 ? 0.5 * gap * gap : 0.0;
  }
  const double gap = margin * margin - distance * distance;
  return gap > 0.0 ? 0.5 * gap : 0.0;
}

namespace {

// d(pair_loss)/dD for a core variant; subgradient 0 at the hinge D = m.
double pair_grad(LossVariant core, int label, double d, double m) {
  if (label == 0) return d;
  if (d >= m) return 0.0;
  return core == LossVariant::Spring ? -(m - d) : -d;
}

struct ClassStats {
  std::size_t n[2] = {0, 0};
  double mean[2] = {0.0, 0.0};
  double sd[2] = {0.0, 0.0};
};

ClassStats per_class_stats(const DistanceBatch& batch) {
  ClassStats s;
  double sum[2] = {0.0, 0.0};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int y = batch.labels[i];
    ++s.n[y];
    sum[y] += batch.distances[i];
  }
  if (s.n[0] < 2 || s.n[1] < 2)
    throw DegenerateBatchError(
        "batch loss: SD variants need at least 2 samples of each label");
  for (int y : {0, 1}) s.mean[y] = sum[y] / static_cast<double>(s.n[y]);
  double ss[2] = {0.0, 0.0};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int y = batch.labels[i];
    const double d = batch.distances[i] - s.mean[y];
    ss[y] += d * d;
  }
  for (int y : {0, 1}) s.sd[y] = std::sqrt(ss[y] / static_cast<double>(s.n[y]));
  return s;
}

}  // namespace

double batch_loss(const LossConfig& cfg, const DistanceBatch& batch) {
  cfg.validate();
  batch.validate();
  const LossVariant core = core_variant(cfg.variant);
  const std::size_t n = batch.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    sum += pair_loss(core, batch.labels[i], batch.distances[i], cfg.margin);
  const double mean = sum / static_cast<double>(n);
  if (!has_sd_term(cfg.variant)) return mean;
  const ClassStats s = per_class_stats(batch);
  return cfg.lambda * mean + (1.0 - cfg.lambda) * (s.sd[0] + s.sd[1]);
}

Tensor batch_loss_grad(const LossConfig& cfg, const DistanceBatch& batch) {
  cfg.validate();
  batch.validate();
  const LossVariant core = core_variant(cfg.variant);
  const bool sd = has_sd_term(cfg.variant);
  const std::size_t n = batch.size();
  const double pair_w = (sd ? cfg.lambda : 1.0) / static_cast<double>(n);
  Tensor grad({n});
  for (std::size_t i = 0; i < n; ++i)
    grad[i] = pair_w * pair_grad(core, batch.labels[i], batch.distances[i], cfg.margin);
  if (sd) {
    const ClassStats s = per_class_stats(batch);
    const double sd_w = 1.0 - cfg.lambda;
    for (std::size_t i = 0; i < n; ++i) {
      const int y = batch.labels[i];
      if (s.sd[y] < kSigmaFloor) continue;  // subgradient 0 at the SD minimum
      grad[i] += sd_w * (batch.distances[i] - s.mean[y]) /
                 (static_cast<double>(s.n[y]) * s.sd[y]);
    }
  }
  return grad;
}

std::pair<double, Tensor> batch_loss_with_grad(const LossConfig& cfg,
                                               const DistanceBatch& batch) {
  return {batch_loss(cfg, batch), batch_loss_grad(cfg, batch)};
}

}  // namespace pbflow
