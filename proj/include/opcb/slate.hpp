#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "opcb/errors.hpp"
#include "opcb/policy.hpp"
#include "opcb/table.hpp"

namespace opcb {

/// Generalized slate space: slot l chooses 0 (the empty choice) or one of |A_l| actions (1..|A_l|).
/// Slates are coded in mixed radix with slot 0 least significant.
class SlateSpace {
 public:
  explicit SlateSpace(std::vector<int> slot_sizes) : slot_sizes_{std::move(slot_sizes)} {
    if (slot_sizes_.empty()) throw SizeError("a slate needs at least one slot");
    std::uint64_t total = 1;
    for (int s : slot_sizes_) {
      if (s < 1) throw SizeError("each slot needs at least one action");
      total *= static_cast<std::uint64_t>(s + 1);
      if (total > (std::uint64_t{1} << 24)) throw SizeError("slate space too large to enumerate");
    }
    count_ = static_cast<std::uint32_t>(total);
  }

  int num_slots() const noexcept { return static_cast<int>(slot_sizes_.size()); }
  int slot_size(int l) const { return slot_sizes_.at(static_cast<std::size_t>(l)); }
  /// Choices in slot l including the empty one.
  int slot_choices(int l) const { return slot_size(l) + 1; }
  std::uint32_t slate_count() const noexcept { return count_; }

  std::vector<int> decode(std::uint32_t index) const {
    if (index >= count_) throw DimensionError("slate index " + std::to_string(index) + " out of range");
    std::vector<int> out(slot_sizes_.size());
    for (std::size_t l = 0; l < slot_sizes_.size(); ++l) {
      const auto radix = static_cast<std::uint32_t>(slot_sizes_[l] + 1);
      out[l] = static_cast<int>(index % radix);
      index /= radix;
    }
    return out;
  }

  std::uint32_t encode(const std::vector<int>& choices) const {
    if (choices.size() != slot_sizes_.size()) throw DimensionError("slate has the wrong number of slots");
    std::uint32_t index = 0;
    for (std::size_t l = choices.size(); l-- > 0;) {
      if (choices[l] < 0 || choices[l] > slot_sizes_[l]) {
        throw DimensionError("slot " + std::to_string(l) + " action " + std::to_string(choices[l]) + " outside A_l");
      }
      index = index * static_cast<std::uint32_t>(slot_sizes_[l] + 1) + static_cast<std::uint32_t>(choices[l]);
    }
    return index;
  }

  int slot_choice(std::uint32_t index, int l) const {
    for (int k = 0; k < l; ++k) index /= static_cast<std::uint32_t>(slot_sizes_[static_cast<std::size_t>(k)] + 1);
    return static_cast<int>(index % static_cast<std::uint32_t>(slot_size(l) + 1));
  }

  /// Grouping of slates by the choice in slot l (the single-main-slot projection).
  Grouping slot_grouping(int l) const {
    Grouping g;
    g.group_of.resize(count_);
    for (std::uint32_t s = 0; s < count_; ++s) g.group_of[s] = static_cast<std::uint32_t>(slot_choice(s, l));
    g.num_groups = static_cast<std::uint32_t>(slot_choices(l));
    return g;
  }

  friend bool operator==(const SlateSpace&, const SlateSpace&) = default;

 private:
  std::vector<int> slot_sizes_;
  std::uint32_t count_ = 1;
};

/// Factorizable slate policy pi(s|x) = prod_l pi_l(s_l|x); each factor is a (context x choices) table.
class FactorizedSlatePolicy {
 public:
  FactorizedSlatePolicy(SlateSpace space, std::vector<TabularPolicy> slots)
      : space_{std::move(space)}, slots_{std::move(slots)} {
    if (static_cast<int>(slots_.size()) != space_.num_slots()) throw DimensionError("one factor per slot required");
    for (int l = 0; l < space_.num_slots(); ++l) {
      const auto& f = slots_[static_cast<std::size_t>(l)];
      if (f.num_actions() != static_cast<std::size_t>(space_.slot_choices(l))) {
        throw DimensionError("slot factor " + std::to_string(l) + " has the wrong number of choices");
      }
      if (f.num_contexts() != slots_.front().num_contexts()) throw DimensionError("slot factors disagree on contexts");
    }
  }

  const SlateSpace& space() const noexcept { return space_; }
  std::size_t num_contexts() const noexcept { return slots_.front().num_contexts(); }
  const TabularPolicy& slot(int l) const { return slots_.at(static_cast<std::size_t>(l)); }

  /// Per-slot marginal pi(s_l = choice | x).
  double slot_prob(std::size_t x, int l, int choice) const {
    return slot(l).prob(x, static_cast<std::uint32_t>(choice));
  }

  TabularPolicy joint() const {
    Table t(num_contexts(), space_.slate_count());
    for (std::size_t x = 0; x < num_contexts(); ++x) {
      for (std::uint32_t s = 0; s < space_.slate_count(); ++s) {
        const auto c = space_.decode(s);
        double p = 1.0;
        for (int l = 0; l < space_.num_slots(); ++l) p *= slot_prob(x, l, c[static_cast<std::size_t>(l)]);
        t(x, s) = p;
      }
    }
    return TabularPolicy{std::move(t)};
  }

 private:
  SlateSpace space_;
  std::vector<TabularPolicy> slots_;
};

}  // namespace opcb
