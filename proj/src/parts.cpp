#include "partcraft/parts.hpp"

#include "partcraft/error.hpp"

#include <charconv>
#include <sstream>

namespace partcraft {

int PartComposition::present_count() const {
  int n = 0;
  for (const auto& c : codes) n += c.absent() ? 0 : 1;
  return n;
}

std::vector<int> PartComposition::present_slots() const {
  std::vector<int> out;
  for (const auto& c : codes)
    if (!c.absent()) out.push_back(c.slot);
  return out;
}

void PartComposition::validate(int parts, int variants) const {
  if (static_cast<int>(codes.size()) != parts + 1) {
    throw InputError("composition has " + std::to_string(codes.size()) + " codes, expected " + std::to_string(parts + 1));
  }
  for (int slot = 0; slot <= parts; ++slot) {
    const PartCode& c = codes[slot];
    if (c.slot != slot) throw InputError("composition slots must run 0..M in order");
    if (!c.absent() && (c.variant < 1 || c.variant > variants)) {
      throw InputError("variant " + std::to_string(c.variant) + " out of range for slot " + std::to_string(slot));
    }
  }
}

PartComposition make_composition(const std::vector<int>& variants) {
  PartComposition out;
  for (std::size_t i = 0; i < variants.size(); ++i) out.codes.push_back({static_cast<int>(i), variants[i]});
  return out;
}

PartComposition parse_composition(const std::string& text, int parts) {
  PartComposition out;
  for (int s = 0; s <= parts; ++s) out.codes.push_back({s, PartCode::kAbsent});
  std::vector<bool> seen(static_cast<std::size_t>(parts) + 1, false);
  std::stringstream ss(text);
  std::string item;
  auto to_int = [&](std::string_view sv, const std::string& context) {
    int v = 0;
    auto [ptr, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), v);
    if (ec != std::errc() || ptr != sv.data() + sv.size()) throw InputError("bad composition entry '" + context + "'");
    return v;
  };
  while (std::getline(ss, item, ',')) {
    auto start = item.find_first_not_of(" \t");
    auto end = item.find_last_not_of(" \t");
    if (start == std::string::npos) continue;
    item = item.substr(start, end - start + 1);
    auto colon = item.find(':');
    if (colon == std::string::npos) throw InputError("composition entry '" + item + "' lacks ':'");
    const int slot = to_int(std::string_view(item).substr(0, colon), item);
    if (slot < 0 || slot > parts) throw InputError("slot " + std::to_string(slot) + " out of range");
    if (seen[slot]) throw InputError("slot " + std::to_string(slot) + " listed twice");
    seen[slot] = true;
    std::string_view rest = std::string_view(item).substr(colon + 1);
    if (rest == "-" || rest == "absent") continue;
    out.codes[slot].variant = to_int(rest, item);
  }
  return out;
}

std::string format_composition(const PartComposition& composition) {
  std::string out;
  for (const auto& c : composition.codes) {
    if (!out.empty()) out += ',';
    out += std::to_string(c.slot) + ':' + (c.absent() ? std::string("-") : std::to_string(c.variant));
  }
  return out;
}

PartMaskSet flip_horizontal(const PartMaskSet& masks) {
  PartMaskSet out = masks;
  for (int s = 0; s < masks.slot_count(); ++s) {
    for (int r = 0; r < masks.grid_h; ++r) {
      for (int c = 0; c < masks.grid_w; ++c) {
        out.masks[s][static_cast<std::size_t>(r) * masks.grid_w + c] = masks.at(s, r, masks.grid_w - 1 - c);
      }
    }
  }
  return out;
}

}  // namespace partcraft
