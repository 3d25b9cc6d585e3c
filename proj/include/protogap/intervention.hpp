#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "protogap/checkpoint.hpp"

namespace protogap {

/// Slot `target` executes layer `source`'s weights.
struct Replace {
  std::size_t target;
  std::size_t source;
};

/// Slots i and j exchange weights; each layer still runs once.
struct Interchange {
  std::size_t i;
  std::size_t j;
};

/// Removes the listed slots (original indices) from the executed stack.
struct Delete {
  std::vector<std::size_t> layers;
};

/// Both slots execute the elementwise mean of layers i and j.
struct AverageMerge {
  std::size_t i;
  std::size_t j;
};

/// Every listed slot executes layer `source`'s weights (one weight set).
struct Share {
  std::size_t source;
  std::vector<std::size_t> positions;
};

/// Head `head` of slot `target` takes its Q/K/V/O slices (and QK-norm
/// gains) from layer `source`.
struct HeadReplace {
  std::size_t target;
  std::size_t source;
  std::size_t head;
};

/// Rotary angles forced to zero everywhere.
struct RopeOff {};

using Intervention = std::variant<Replace, Interchange, Delete, AverageMerge, Share, HeadReplace, RopeOff>;

std::string to_string(const Intervention& iv);

/// Textual form used by the CLI:
///   replace:3<-5   interchange:3,5   delete:1,2   average:4,5
///   share:4@4,5    head:3<-5#2       rope-off
Intervention parse_intervention(const std::string& text);

/// One executed block of a plan.
struct BlockSlot {
  std::size_t position = 0;                 // original slot index
  const LayerWeights* weights = nullptr;
  std::vector<const LayerWeights*> head_sources;  // empty, or one entry per head
};

/// Weight routing resolved from a list of interventions. The checkpoint is
/// only read; merged weights live in `owned`.
struct ExecutionPlan {
  std::vector<BlockSlot> slots;
  bool rope_enabled = true;
  std::vector<std::shared_ptr<const LayerWeights>> owned;

  /// First slot index where this plan can differ from the unmodified
  /// model; equals slots.size() when the executed prefix is untouched.
  std::size_t first_divergence(const Checkpoint& ck) const;
};

/// Interventions apply in order as overlays on the identity routing.
/// Routing interventions always refer to the ORIGINAL layer weights, so
/// Replace{i<-i} restores slot i. Delete indices are original slot
/// indices, resolved after routing; a deleted slot that is also a routing
/// target is a conflict.
ExecutionPlan build_plan(const Checkpoint& ck, std::span<const Intervention> interventions);

}  // namespace protogap
