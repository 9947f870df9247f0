#include "vmar/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "vmar/errors.hpp"

namespace vmar {

std::vector<std::size_t> sample_train_mask(std::size_t tokens_per_frame, double ratio_min,
                                           double ratio_max, Rng& rng) {
  if (tokens_per_frame == 0) throw ArgumentError("tokens_per_frame must be positive");
  if (!(ratio_min >= 0 && ratio_min <= ratio_max && ratio_max <= 1))
    throw ArgumentError("mask ratio range must satisfy 0 <= min <= max <= 1");
  const double r = rng.uniform(ratio_min, ratio_max);
  const auto n = static_cast<double>(tokens_per_frame);
  const std::size_t count =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(r * n)), 1, tokens_per_frame);
  std::vector<std::size_t> perm(tokens_per_frame);
  std::iota(perm.begin(), perm.end(), 0);
  // Partial Fisher-Yates: the first `count` entries are a uniform sample.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(tokens_per_frame - i);
    std::swap(perm[i], perm[j]);
  }
  perm.resize(count);
  std::sort(perm.begin(), perm.end());
  return perm;
}

Visibility NextFrameMaskPlan::visibility(std::size_t frame, std::size_t pos) const {
  if (frame >= frame_count_ || pos >= tokens_per_frame_) throw IndexError("plan index out of range");
  if (frame < target_) return Visibility::Visible;
  if (frame > target_) return Visibility::Masked;
  return in_mask_[pos] ? Visibility::Masked : Visibility::Visible;
}

std::vector<std::uint8_t> NextFrameMaskPlan::masked_flags(std::size_t frames) const {
  if (frames > frame_count_) throw ArgumentError("masked_flags: more frames than the plan");
  std::vector<std::uint8_t> flags(frames * tokens_per_frame_, 0);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t p = 0; p < tokens_per_frame_; ++p)
      flags[f * tokens_per_frame_ + p] = visibility(f, p) == Visibility::Masked;
  return flags;
}

std::size_t NextFrameMaskPlan::visible_count() const {
  return target_ * tokens_per_frame_ + (tokens_per_frame_ - masked_.size());
}

NextFrameMaskPlan build_next_frame_plan(std::size_t frame_count, std::size_t target,
                                        std::size_t tokens_per_frame,
                                        std::span<const std::size_t> masked) {
  if (masked.empty()) throw ArgumentError("next-frame plan needs at least one masked token");
  if (target >= frame_count) throw ArgumentError("target frame outside the clip");
  NextFrameMaskPlan plan;
  plan.frame_count_ = frame_count;
  plan.target_ = target;
  plan.tokens_per_frame_ = tokens_per_frame;
  plan.in_mask_.assign(tokens_per_frame, 0);
  for (std::size_t p : masked) {
    if (p >= tokens_per_frame) throw ArgumentError("masked position outside the target frame");
    if (plan.in_mask_[p]) throw ArgumentError("duplicate masked position");
    plan.in_mask_[p] = 1;
  }
  plan.masked_.assign(masked.begin(), masked.end());
  std::sort(plan.masked_.begin(), plan.masked_.end());
  return plan;
}

UnmaskSchedule cosine_unmask_counts(std::size_t tokens, std::size_t steps) {
  if (steps == 0 || steps > tokens) {
    std::ostringstream os;
    os << "cosine schedule needs 1 <= steps <= tokens (got steps=" << steps
       << ", tokens=" << tokens << ")";
    throw ArgumentError(os.str());
  }
  const auto n = static_cast<double>(tokens);
  const auto s_total = static_cast<double>(steps);
  std::vector<std::size_t> counts(steps);
  std::size_t prev = tokens;
  for (std::size_t s = 0; s < steps; ++s) {
    std::size_t after = 0;
    if (s + 1 < steps) {
      const double c = std::cos(std::numbers::pi / 2.0 * static_cast<double>(s + 1) / s_total);
      after = std::min<std::size_t>(static_cast<std::size_t>(std::floor(n * c)), prev);
    }
    counts[s] = prev - after;
    prev = after;
  }
  for (std::size_t s = 0; s < steps; ++s) {
    if (counts[s] > 0) continue;
    auto later = std::max_element(counts.begin() + s + 1, counts.end());
    if (later == counts.end() || *later < 2) later = std::max_element(counts.begin(), counts.end());
    --*later;
    counts[s] = 1;
  }
  return {tokens, steps, std::move(counts)};
}

FrameOrder::FrameOrder(std::size_t tokens_per_frame, Rng rng, TokenOrder mode)
    : rng_(std::move(rng)), mode_(mode), remaining_(tokens_per_frame) {
  std::iota(remaining_.begin(), remaining_.end(), 0);
  std::shuffle(remaining_.begin(), remaining_.end(), rng_.engine());
}

std::vector<std::size_t> FrameOrder::select_tokens_for_step(std::size_t count) {
  if (count > remaining_.size()) throw ArgumentError("step requests more tokens than remain masked");
  if (mode_ == TokenOrder::RandomPerStep)
    std::shuffle(remaining_.begin(), remaining_.end(), rng_.engine());
  std::vector<std::size_t> chosen(remaining_.begin(), remaining_.begin() + count);
  remaining_.erase(remaining_.begin(), remaining_.begin() + count);
  return chosen;
}

}  // namespace vmar
