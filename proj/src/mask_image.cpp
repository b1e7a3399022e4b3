#include "seqfit/mask_image.hpp"

#include <fstream>
#include <string>

#include "seqfit/errors.hpp"

namespace seqfit {

void write_pgm(const std::filesystem::path& path, const MaskImage& mask) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "P5\n" << mask.w << " " << mask.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(mask.data.data()),
            static_cast<std::streamsize>(mask.data.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

MaskImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) {
    throw ParseError("pgm: unsupported header in " + path.string());
  }
  in.get();  // single whitespace byte after maxval
  MaskImage m = MaskImage::zeros(w, h);
  in.read(reinterpret_cast<char*>(m.data.data()),
          static_cast<std::streamsize>(m.data.size()));
  if (static_cast<size_t>(in.gcount()) != m.data.size()) {
    throw ParseError("pgm: truncated payload in " + path.string());
  }
  return m;
}

}  // namespace seqfit
