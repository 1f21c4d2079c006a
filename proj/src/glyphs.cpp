#include <algorithm>
#include <array>
#include <cstdint>

#include "milforge/data.hpp"
#include "milforge/rng.hpp"

namespace milforge {

namespace {

// 5x7 digit glyphs, one string per row, '#' = on.
constexpr std::array<std::array<const char*, 7>, 10> kGlyphs = {{
    {" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "},  // 0
    {"  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "},  // 1
    {" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"},  // 2
    {"#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "},  // 3
    {"   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "},  // 4
    {"#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "},  // 5
    {"  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "},  // 6
    {"#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "},  // 7
    {" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "},  // 8
    {" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "},  // 9
}};

}  // namespace

// Renders each glyph into a 28x28 frame with per-sample stroke scale, shear,
// translation, erosion, intensity, clutter blobs and noise. The variation is
// deliberately heavy: instance classes must be learnable but not linearly
// trivial, or bag-level training saturates immediately and the
// instance-learnability dynamics disappear.
std::pair<IdxImages, IdxLabels> make_digit_corpus(std::size_t count, std::uint64_t seed) {
  IdxImages images;
  images.count = static_cast<std::uint32_t>(count);
  images.rows = 28;
  images.cols = 28;
  images.pixels.assign(count * 28 * 28, 0);
  IdxLabels labels;
  labels.count = static_cast<std::uint32_t>(count);
  labels.labels.resize(count);

  Rng rng(Rng::mix(seed, 0xd191));
  for (std::size_t i = 0; i < count; ++i) {
    const int digit = int(rng.below(10));
    labels.labels[i] = static_cast<std::uint8_t>(digit);

    const int scale = 3;
    const int gw = 5 * scale, gh = 7 * scale;
    const int dx = int(rng.uniform_int(-4, 4));
    const int dy = int(rng.uniform_int(-3, 3));
    const double shear = rng.uniform(-0.10, 0.10);
    const double intensity = rng.uniform(0.7, 1.0);
    const double erosion = rng.uniform(0.0, 0.05);
    std::uint8_t* img = images.pixels.data() + i * 28 * 28;

    const int x0 = (28 - gw) / 2 + dx;
    const int y0 = (28 - gh) / 2 + dy;
    const auto& glyph = kGlyphs[std::size_t(digit)];
    for (int gy = 0; gy < 7; ++gy) {
      for (int gx = 0; gx < 5; ++gx) {
        if (glyph[std::size_t(gy)][gx] != '#') continue;
        for (int sy = 0; sy < scale; ++sy) {
          for (int sx = 0; sx < scale; ++sx) {
            if (rng.uniform() < erosion) continue;
            const int yy = y0 + gy * scale + sy;
            const int row_shift = int(std::lround(shear * double(yy - 14)));
            const int xx = x0 + gx * scale + sx + row_shift;
            if (yy < 0 || yy >= 28 || xx < 0 || xx >= 28) continue;
            img[yy * 28 + xx] = static_cast<std::uint8_t>(255.0 * intensity);
          }
        }
      }
    }

    // Clutter: a few dim blobs elsewhere in the frame.
    const int blobs = int(rng.below(2));
    for (int b = 0; b < blobs; ++b) {
      const int bw = 2 + int(rng.below(4));
      const int bh = 2 + int(rng.below(4));
      const int bx = int(rng.below(28 - std::uint64_t(bw)));
      const int by = int(rng.below(28 - std::uint64_t(bh)));
      const double bint = rng.uniform(0.15, 0.35);
      for (int yy = by; yy < by + bh; ++yy)
        for (int xx = bx; xx < bx + bw; ++xx) {
          const int v = int(img[yy * 28 + xx]) + int(255.0 * bint);
          img[yy * 28 + xx] = static_cast<std::uint8_t>(std::min(v, 255));
        }
    }

    for (int p = 0; p < 28 * 28; ++p) {
      const int noisy = int(img[p]) + int(rng.uniform(0.0, 45.0));
      img[p] = static_cast<std::uint8_t>(std::min(noisy, 255));
    }
  }
  return {std::move(images), std::move(labels)};
}

}  // namespace milforge
