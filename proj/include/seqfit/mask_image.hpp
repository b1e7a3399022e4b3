#ifndef SEQFIT_MASK_IMAGE_HPP
#define SEQFIT_MASK_IMAGE_HPP

#include <cstdint>
#include <filesystem>
#include <vector>

namespace seqfit {

// Binary instance mask. data is row-major, 0 = background, 255 = foreground.
struct MaskImage {
  int w = 0, h = 0;
  std::vector<uint8_t> data;
  int instance_id = 0;
  double median_depth = 0.0;

  static MaskImage zeros(int w, int h) {
    MaskImage m;
    m.w = w;
    m.h = h;
    m.data.assign(static_cast<size_t>(w) * h, 0);
    return m;
  }
  bool at(int u, int v) const { return data[static_cast<size_t>(v) * w + u] != 0; }
  void set(int u, int v) { data[static_cast<size_t>(v) * w + u] = 255; }
  size_t count() const {
    size_t n = 0;
    for (uint8_t p : data) n += (p != 0);
    return n;
  }
};

// P5 binary PGM, maxval 255.
void write_pgm(const std::filesystem::path& path, const MaskImage& mask);
MaskImage read_pgm(const std::filesystem::path& path);

}  // namespace seqfit

#endif
