#pragma once

#include <string_view>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace pbflow {

// Contrastive loss families. Label convention: Y=0 matching, Y=1 non-matching.
//
//   spring:     (1-Y) * 1/2 D^2 + Y * 1/2 max(0, m - D)^2
//   centrifuge: (1-Y) * 1/2 D^2 + Y * 1/2 max(0, m^2 - D^2)
//
// The *_sd variants add a batch term that rewards spread: with per-label
// population SDs s0 (matching) and s1 (non-matching),
//
//   L = lambda * mean(pair losses) + (1 - lambda) * (s0 + s1)
enum class LossVariant { Spring, Centrifuge, SpringSd, CentrifugeSd };

bool has_sd_term(LossVariant v);
// Strips the SD augmentation: SpringSd -> Spring, CentrifugeSd -> Centrifuge.
LossVariant core_variant(LossVariant v);
const char* variant_name(LossVariant v);
LossVariant variant_from_name(std::string_view name);

// Below this, a per-label SD is treated as zero and its gradient dropped.
inline constexpr double kSigmaFloor = 1e-12;

struct LossConfig {
  LossVariant variant = LossVariant::CentrifugeSd;
  double margin = 1.0;   // m > 0, in distance units
  double lambda = 0.8;   // pair-loss weight in (0, 1]; unused without SD term
  void validate() const;
};

// Pairwise descriptor distances with match labels.
struct DistanceBatch {
  Tensor distances;         // rank-1, non-negative
  std::vector<int> labels;  // 0 = matching, 1 = non-matching
  std::size_t size() const { return labels.size(); }
  void validate() const;
};

// Loss contribution of a single pair; variant must be a core (non-SD) one.
double pair_loss(LossVariant variant, int label, double distance, double margin);

double batch_loss(const LossConfig& cfg, const DistanceBatch& batch);

// d(batch loss)/d(distance_i); rank-1, same length as the batch.
// At the hinge D = m the subgradient 0 is used. A per-label SD below
// kSigmaFloor contributes no gradient.
Tensor batch_loss_grad(const LossConfig& cfg, const DistanceBatch& batch);

// Forward value and gradient in one pass (the training path).
std::pair<double, Tensor> batch_loss_with_grad(const LossConfig& cfg,
                                               const DistanceBatch& batch);

}  // namespace pbflow
