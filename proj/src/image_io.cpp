#include "pnmf/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include <png.h>

#include "pnmf/error.hpp"

namespace pnmf {
namespace fs = std::filesystem;

namespace {

// Skips whitespace and '#' comments, then reads one unsigned decimal token.
std::size_t pgm_token(const std::string& buf, std::size_t& pos) {
  for (;;) {
    while (pos < buf.size() && std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    if (pos < buf.size() && buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= buf.size() || !std::isdigit(static_cast<unsigned char>(buf[pos]))) {
    fail(ErrorCode::FormatError, "malformed PGM header");
  }
  std::size_t v = 0;
  while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) {
    v = v * 10 + static_cast<std::size_t>(buf[pos] - '0');
    ++pos;
  }
  return v;
}

GrayImage read_pgm(const std::string& buf, const fs::path& path) {
  const bool binary = buf[1] == '5';
  std::size_t pos = 2;
  GrayImage img;
  img.width = pgm_token(buf, pos);
  img.height = pgm_token(buf, pos);
  const std::size_t maxval = pgm_token(buf, pos);
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535) {
    fail(ErrorCode::FormatError, path.string() + ": bad PGM dimensions");
  }
  const std::size_t n = img.width * img.height;
  img.pixels.resize(n);
  const float scale = 1.0f / static_cast<float>(maxval);
  if (binary) {
    ++pos;  // single whitespace after maxval
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    if (buf.size() < pos + n * bytes_per) fail(ErrorCode::FormatError, path.string() + ": truncated PGM");
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t v;
      if (bytes_per == 1) {
        v = static_cast<unsigned char>(buf[pos + i]);
      } else {
        v = (static_cast<std::size_t>(static_cast<unsigned char>(buf[pos + 2 * i])) << 8) |
            static_cast<unsigned char>(buf[pos + 2 * i + 1]);
      }
      img.pixels[i] = std::min(1.0f, static_cast<float>(v) * scale);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      img.pixels[i] = std::min(1.0f, static_cast<float>(pgm_token(buf, pos)) * scale);
    }
  }
  return img;
}

GrayImage read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    fail(ErrorCode::FormatError, path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> raw(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, raw.data(), 0, nullptr)) {
    png_image_free(&image);
    fail(ErrorCode::FormatError, path.string() + ": " + image.message);
  }
  std::vector<float> rgb(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) rgb[i] = static_cast<float>(raw[i]) / 255.0f;
  return rgb_to_gray(image.width, image.height, rgb);
}

}  // namespace

GrayImage rgb_to_gray(std::size_t width, std::size_t height, const std::vector<float>& rgb) {
  if (rgb.size() != width * height * 3) fail(ErrorCode::ShapeError, "rgb buffer size mismatch");
  GrayImage img{width, height, std::vector<float>(width * height)};
  for (std::size_t i = 0; i < width * height; ++i) {
    const double y = 0.299 * rgb[3 * i] + 0.587 * rgb[3 * i + 1] + 0.114 * rgb[3 * i + 2];
    img.pixels[i] = static_cast<float>(std::clamp(y, 0.0, 1.0));
  }
  return img;
}

GrayImage read_image(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::string head(8, '\0');
  in.read(head.data(), 8);
  head.resize(static_cast<std::size_t>(in.gcount()));
  if (head.size() >= 2 && head[0] == 'P' && (head[1] == '2' || head[1] == '5')) {
    in.seekg(0);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return read_pgm(buf, path);
  }
  if (head.size() == 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(head.data()), 0, 8) == 0) {
    in.close();
    return read_png(path);
  }
  fail(ErrorCode::FormatError, path.string() + ": unsupported image format");
}

GrayImage resize_bilinear(const GrayImage& src, std::size_t out_width, std::size_t out_height) {
  if (src.width == 0 || src.height == 0 || out_width == 0 || out_height == 0) {
    fail(ErrorCode::ShapeError, "resize_bilinear: empty image");
  }
  GrayImage dst{out_width, out_height, std::vector<float>(out_width * out_height)};
  const double sx = static_cast<double>(src.width) / static_cast<double>(out_width);
  const double sy = static_cast<double>(src.height) / static_cast<double>(out_height);
  const double max_x = static_cast<double>(src.width - 1);
  const double max_y = static_cast<double>(src.height - 1);
  for (std::size_t oy = 0; oy < out_height; ++oy) {
    const double fy = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < out_width; ++ox) {
      const double fx = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = (1.0 - wx) * src.at(y0, x0) + wx * src.at(y0, x1);
      const double bottom = (1.0 - wx) * src.at(y1, x0) + wx * src.at(y1, x1);
      dst.pixels[oy * out_width + ox] = static_cast<float>((1.0 - wy) * top + wy * bottom);
    }
  }
  return dst;
}

void write_pgm(const GrayImage& img, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::string row(img.pixels.size(), '\0');
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const float v = std::clamp(img.pixels[i], 0.0f, 1.0f);
    row[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  out.write(row.data(), static_cast<std::streamsize>(row.size()));
  if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

}  // namespace pnmf
