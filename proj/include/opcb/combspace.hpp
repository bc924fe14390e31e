#pragma once

#include <bit>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "opcb/errors.hpp"

namespace opcb {

inline constexpr int kMaxActions = 20;

/// One element of the subset space: bit l set iff action a_{l+1} is included.
struct SubsetAction {
  std::uint32_t bits = 0;

  constexpr bool contains(int action) const noexcept { return (bits >> action) & 1U; }
  constexpr int size() const noexcept { return std::popcount(bits); }

  friend constexpr auto operator<=>(SubsetAction, SubsetAction) = default;
};

/// The factored space M = {∅,a_1} x ... x {∅,a_L}, of 2^L subsets.
class FactoredSpace {
 public:
  explicit FactoredSpace(int num_actions) : num_actions_{num_actions} {
    if (num_actions < 1 || num_actions > kMaxActions) {
      throw SizeError("number of actions must be in [1, " + std::to_string(kMaxActions) + "], got " +
                      std::to_string(num_actions));
    }
  }

  int num_actions() const noexcept { return num_actions_; }
  std::uint32_t subset_count() const noexcept { return std::uint32_t{1} << num_actions_; }
  std::uint32_t full_mask() const noexcept { return subset_count() - 1; }
  bool contains(SubsetAction m) const noexcept { return m.bits < subset_count(); }

  friend bool operator==(const FactoredSpace&, const FactoredSpace&) = default;

 private:
  int num_actions_;
};

/// Projection phi(m) = m AND main_mask onto the designated main actions.
class MainActionSelector {
 public:
  MainActionSelector(FactoredSpace space, std::uint32_t main_mask) : space_{space}, mask_{main_mask} {
    if (main_mask >= space.subset_count()) {
      throw DimensionError("main mask " + std::to_string(main_mask) + " exceeds a space of " +
                           std::to_string(space.num_actions()) + " actions");
    }
  }

  static MainActionSelector full(FactoredSpace space) { return {space, space.full_mask()}; }
  static MainActionSelector none(FactoredSpace space) { return {space, 0}; }

  const FactoredSpace& space() const noexcept { return space_; }
  std::uint32_t mask() const noexcept { return mask_; }
  /// K, the number of main actions.
  int size() const noexcept { return std::popcount(mask_); }
  std::uint32_t group_count() const noexcept { return std::uint32_t{1} << size(); }

  SubsetAction operator()(SubsetAction m) const noexcept { return {m.bits & mask_}; }

  /// Compact index in [0, 2^K) of the group phi(m) belongs to (bits of phi(m) packed).
  std::uint32_t group_index(SubsetAction m) const noexcept {
    std::uint32_t out = 0;
    int k = 0;
    for (std::uint32_t rest = mask_; rest != 0; rest &= rest - 1, ++k) {
      const std::uint32_t low = rest & (~rest + 1);
      if (m.bits & low) out |= std::uint32_t{1} << k;
    }
    return out;
  }

  friend bool operator==(const MainActionSelector&, const MainActionSelector&) = default;

 private:
  FactoredSpace space_;
  std::uint32_t mask_;
};

/// All 2^L subsets in ascending bitmask order.
inline std::vector<SubsetAction> enumerate_subsets(const FactoredSpace& space) {
  std::vector<SubsetAction> out;
  out.reserve(space.subset_count());
  for (std::uint32_t b = 0; b < space.subset_count(); ++b) out.push_back({b});
  return out;
}

inline SubsetAction project_main(SubsetAction m, const MainActionSelector& phi) {
  if (!phi.space().contains(m)) {
    throw DimensionError("subset " + std::to_string(m.bits) + " is not in a space of " +
                         std::to_string(phi.space().num_actions()) + " actions");
  }
  return phi(m);
}

/// Members {m : phi(m) = phi_value}, ascending. Group size is 2^(L-K).
inline std::vector<SubsetAction> group_members(SubsetAction phi_value, const MainActionSelector& phi,
                                               const FactoredSpace& space) {
  if (!(phi.space() == space)) throw DimensionError("selector and space disagree on the number of actions");
  if (!space.contains(phi_value) || (phi_value.bits & ~phi.mask()) != 0) {
    throw InvalidGroupError("value " + std::to_string(phi_value.bits) + " is not in the image of the selector");
  }
  // Enumerate submasks of the complement, then add the fixed main bits.
  const std::uint32_t free = space.full_mask() & ~phi.mask();
  std::vector<SubsetAction> out;
  out.reserve(std::size_t{1} << std::popcount(free));
  std::uint32_t sub = 0;
  do {
    out.push_back({sub | phi_value.bits});
    sub = (sub - free) & free;
  } while (sub != 0);
  return out;
}

/// Zero-padded binary string, leftmost character = action a_1.
inline std::string to_bit_string(SubsetAction m, int num_actions) {
  std::string s(static_cast<std::size_t>(num_actions), '0');
  for (int l = 0; l < num_actions; ++l) {
    if (m.contains(l)) s[static_cast<std::size_t>(l)] = '1';
  }
  return s;
}

inline SubsetAction parse_bit_string(std::string_view s) {
  if (s.empty() || s.size() > static_cast<std::size_t>(kMaxActions)) {
    throw SizeError("subset string must have 1.." + std::to_string(kMaxActions) + " characters");
  }
  SubsetAction m;
  for (std::size_t l = 0; l < s.size(); ++l) {
    if (s[l] == '1') {
      m.bits |= std::uint32_t{1} << l;
    } else if (s[l] != '0') {
      throw IoError("invalid character in subset string '" + std::string(s) + "'");
    }
  }
  return m;
}

}  // namespace opcb
