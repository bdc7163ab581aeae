#include "spi/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

#include "spi/error.hpp"

namespace spi {

Image Image::channel(int c) const {
  Image out(height, width, 1);
  auto src = plane(c);
  std::copy(src.begin(), src.end(), out.pixels.begin());
  return out;
}

bool Image::in_unit_range() const {
  return std::all_of(pixels.begin(), pixels.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
}

Image replicate_rgb(const Image& gray) {
  require(gray.channels == 1, ErrorCode::shape_mismatch, "replicate_rgb expects a grayscale image");
  Image out(gray.height, gray.width, 3);
  for (int c = 0; c < 3; ++c) std::copy(gray.pixels.begin(), gray.pixels.end(), out.plane(c).begin());
  return out;
}

Image clamp_unit(Image img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
  return img;
}

namespace {

// Reads the next whitespace-separated header token, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

int parse_positive(const std::string& tok, const std::filesystem::path& path) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used == tok.size() && v > 0) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorCode::io, "malformed netpbm header in " + path.string());
}

}  // namespace

Raster8 read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open image " + path.string());

  const std::string magic = next_token(in);
  Raster8 r;
  bool ascii = false;
  if (magic == "P5" || magic == "P2") {
    r.channels = 1;
    ascii = magic == "P2";
  } else if (magic == "P6" || magic == "P3") {
    r.channels = 3;
    ascii = magic == "P3";
  } else {
    fail(ErrorCode::io, "unsupported image format in " + path.string() + " (expected PGM/PPM)");
  }
  r.width = parse_positive(next_token(in), path);
  r.height = parse_positive(next_token(in), path);
  const int maxval = parse_positive(next_token(in), path);
  require(maxval < 65536, ErrorCode::io, "bad maxval in " + path.string());

  const std::size_t count = static_cast<std::size_t>(r.width) * r.height * r.channels;
  r.samples.resize(count);
  auto rescale = [maxval](unsigned v) {
    if (maxval == 255) return static_cast<std::uint8_t>(std::min(v, 255u));
    return static_cast<std::uint8_t>(std::lround(255.0 * std::min<unsigned>(v, maxval) / maxval));
  };

  if (ascii) {
    for (std::size_t i = 0; i < count; ++i) {
      const std::string tok = next_token(in);
      require(!tok.empty(), ErrorCode::io, "truncated image " + path.string());
      r.samples[i] = rescale(static_cast<unsigned>(std::stoul(tok)));
    }
  } else if (maxval < 256) {
    in.read(reinterpret_cast<char*>(r.samples.data()), static_cast<std::streamsize>(count));
    require(static_cast<std::size_t>(in.gcount()) == count, ErrorCode::io, "truncated image " + path.string());
    if (maxval != 255)
      for (auto& s : r.samples) s = rescale(s);
  } else {
    std::vector<unsigned char> buf(count * 2);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    require(static_cast<std::size_t>(in.gcount()) == buf.size(), ErrorCode::io, "truncated image " + path.string());
    for (std::size_t i = 0; i < count; ++i) r.samples[i] = rescale((buf[2 * i] << 8u) | buf[2 * i + 1]);
  }
  return r;
}

void write_netpbm(const std::filesystem::path& path, const Raster8& raster) {
  require(raster.channels == 1 || raster.channels == 3, ErrorCode::invalid_argument,
          "netpbm output supports 1 or 3 channels");
  require(raster.samples.size() == static_cast<std::size_t>(raster.width) * raster.height * raster.channels,
          ErrorCode::shape_mismatch, "raster sample count does not match its shape");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write image " + path.string());
  out << (raster.channels == 1 ? "P5" : "P6") << '\n' << raster.width << ' ' << raster.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(raster.samples.data()), static_cast<std::streamsize>(raster.samples.size()));
  require(static_cast<bool>(out), ErrorCode::io, "failed writing " + path.string());
}

Raster8 to_raster(const Image& img) {
  Raster8 r{img.height, img.width, img.channels, {}};
  r.samples.resize(img.size());
  const std::size_t plane = img.plane_size();
  for (int c = 0; c < img.channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      const double v = std::clamp(img.pixels[c * plane + p], 0.0, 1.0);
      r.samples[p * img.channels + c] = static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
    }
  return r;
}

Image from_raster(const Raster8& r) {
  Image img(r.height, r.width, r.channels);
  const std::size_t plane = img.plane_size();
  for (int c = 0; c < r.channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) img.pixels[c * plane + p] = r.samples[p * r.channels + c] / 255.0;
  return img;
}

}  // namespace spi
