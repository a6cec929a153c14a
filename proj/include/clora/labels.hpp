#pragma once

#include <cstdint>
#include <vector>

namespace clora {

// Pixels carrying this value take part in no loss and no metric.
constexpr uint8_t kIgnoreLabel = 255;

// Dense H x W map of class ids (0 = background, 255 = ignore).
struct LabelMap {
  size_t height = 0;
  size_t width = 0;
  std::vector<uint8_t> ids;

  static LabelMap filled(size_t h, size_t w, uint8_t value) {
    LabelMap m;
    m.height = h;
    m.width = w;
    m.ids.assign(h * w, value);
    return m;
  }

  uint8_t at(size_t y, size_t x) const { return ids[y * width + x]; }
  uint8_t& at_mut(size_t y, size_t x) { return ids[y * width + x]; }
  size_t size() const { return ids.size(); }
};

}  // namespace clora
