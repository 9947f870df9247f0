#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vmar/tensor.hpp"

namespace vmar {

// Masked positions (within one frame, sorted ascending) for a training step:
// ratio r ~ U[ratio_min, ratio_max], count = max(1, round(r * N)), chosen
// uniformly without replacement.
std::vector<std::size_t> sample_train_mask(std::size_t tokens_per_frame, double ratio_min,
                                           double ratio_max, Rng& rng);

enum class Visibility : std::uint8_t { Visible, Masked };

// One factor of the next-frame factorization: frames before the target are
// fully visible, frames after it fully masked, and the target frame is split
// into visible and masked (loss) positions. Frames are 0-based here.
class NextFrameMaskPlan {
 public:
  std::size_t frame_count() const { return frame_count_; }
  std::size_t target() const { return target_; }
  std::size_t tokens_per_frame() const { return tokens_per_frame_; }
  const std::vector<std::size_t>& loss_positions() const { return masked_; }

  Visibility visibility(std::size_t frame, std::size_t pos) const;
  // Per-token masked flags over frames [0, frames), raster order.
  std::vector<std::uint8_t> masked_flags(std::size_t frames) const;
  std::size_t visible_count() const;

 private:
  friend NextFrameMaskPlan build_next_frame_plan(std::size_t, std::size_t, std::size_t,
                                                 std::span<const std::size_t>);
  std::size_t frame_count_ = 0;
  std::size_t target_ = 0;
  std::size_t tokens_per_frame_ = 0;
  std::vector<std::size_t> masked_;
  std::vector<std::uint8_t> in_mask_;
};

// Throws ArgumentError for an empty mask, a target outside [0, frame_count),
// or positions outside the frame.
NextFrameMaskPlan build_next_frame_plan(std::size_t frame_count, std::size_t target,
                                        std::size_t tokens_per_frame,
                                        std::span<const std::size_t> masked);

// Per-step token budgets for one frame.
struct UnmaskSchedule {
  std::size_t tokens = 0;
  std::size_t steps = 0;
  std::vector<std::size_t> counts;
};

// masked_after(s) = floor(N cos(pi/2 (s+1)/S)); counts are its decrements, then
// zero-count steps borrow one token from the largest later count.
UnmaskSchedule cosine_unmask_counts(std::size_t tokens, std::size_t steps);

enum class TokenOrder : std::uint8_t {
  RandomPerFrame,  // one permutation per frame, consumed step by step
  RandomPerStep,   // redraw the order of the still-masked set every step
};

// Within-frame generation order. With RandomPerFrame the steps partition the
// frame deterministically given the RNG.
class FrameOrder {
 public:
  FrameOrder(std::size_t tokens_per_frame, Rng rng, TokenOrder mode = TokenOrder::RandomPerFrame);

  std::size_t remaining() const { return remaining_.size(); }
  // Positions for the next step; throws ArgumentError if count > remaining().
  std::vector<std::size_t> select_tokens_for_step(std::size_t count);

 private:
  Rng rng_;
  TokenOrder mode_;
  std::vector<std::size_t> remaining_;  // in generation order
};

}  // namespace vmar
