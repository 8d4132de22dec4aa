#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace partcraft {

/// One discovered part cluster: slot 0 is the background style, slots 1..M
/// are object parts. Variants are 1-based; kAbsent marks an unobserved slot.
struct PartCode {
  static constexpr int kAbsent = -1;

  int slot = 0;
  int variant = kAbsent;

  bool absent() const { return variant == kAbsent; }
  bool operator==(const PartCode&) const = default;
};

/// One code per slot 0..M, in slot order.
struct PartComposition {
  std::vector<PartCode> codes;

  int slot_count() const { return static_cast<int>(codes.size()); }
  int present_count() const;
  std::vector<int> present_slots() const;

  /// Throws InputError unless there are exactly M+1 codes with slots 0..M and
  /// variants in [1, K] or absent.
  void validate(int parts, int variants) const;

  bool operator==(const PartComposition&) const = default;
};

PartComposition make_composition(const std::vector<int>& variants);

/// "0:12,1:87,2:-" form; unlisted slots are absent.
PartComposition parse_composition(const std::string& text, int parts);
std::string format_composition(const PartComposition& composition);

/// Per-slot binary masks over an H x W grid, slot 0 = background.
struct PartMaskSet {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<bool> present;

  PartMaskSet() = default;
  PartMaskSet(int slots, int h, int w)
      : grid_h(h), grid_w(w), masks(slots, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)),
        present(slots, false) {}

  int slot_count() const { return static_cast<int>(masks.size()); }
  int cells() const { return grid_h * grid_w; }
  std::uint8_t at(int slot, int row, int col) const { return masks[slot][static_cast<std::size_t>(row) * grid_w + col]; }

  bool operator==(const PartMaskSet&) const = default;
};

/// Mirrors every mask left-right; used in lockstep with image flips.
PartMaskSet flip_horizontal(const PartMaskSet& masks);

}  // namespace partcraft
