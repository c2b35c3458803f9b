#include "slidevec/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <string>

#include "slidevec/error.hpp"

namespace slidevec {

namespace fs = std::filesystem;

RgbImage crop(const RgbImage& src, int x, int y, int w, int h) {
  if (x < 0 || y < 0 || x + w > src.width || y + h > src.height)
    throw Error(ErrorCode::invalid_argument, "crop window outside raster");
  RgbImage out(w, h);
  for (int r = 0; r < h; ++r)
    std::memcpy(out.at(0, r), src.at(x, y + r), static_cast<std::size_t>(w) * 3);
  return out;
}

RgbImage load_raster(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".png") return load_png(path);
  if (ext == ".ppm") return load_ppm(path);
  throw Error(ErrorCode::invalid_argument, "unsupported raster format: " + path.string());
}

RgbImage load_png(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw Error(ErrorCode::io, "cannot read PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  RgbImage out(static_cast<int>(image.width), static_cast<int>(image.height));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::io, "cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

}  // namespace

RgbImage load_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  if (ppm_token(in) != "P6") throw Error(ErrorCode::bad_magic, "not a binary PPM: " + path.string());
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(ppm_token(in));
    h = std::stoi(ppm_token(in));
    maxval = std::stoi(ppm_token(in));
  } catch (const std::exception&) {
    throw Error(ErrorCode::io, "malformed PPM header: " + path.string());
  }
  if (w <= 0 || h <= 0 || maxval != 255)
    throw Error(ErrorCode::unsupported, "PPM must be 8-bit with positive size: " + path.string());
  RgbImage out(w, h);
  in.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(out.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(out.pixels.size()))
    throw Error(ErrorCode::truncated, "PPM pixel data truncated: " + path.string());
  return out;
}

namespace {

void write_png(const fs::path& path, int w, int h, png_uint_32 format, const void* data) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  const fs::path tmp = path.string() + ".tmp";
  if (!png_image_write_to_file(&image, tmp.c_str(), 0, data, 0, nullptr))
    throw Error(ErrorCode::io, "cannot write PNG " + path.string() + ": " + image.message);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::io, "cannot rename into " + path.string() + ": " + ec.message());
}

}  // namespace

void save_png(const fs::path& path, const RgbImage& image) {
  write_png(path, image.width, image.height, PNG_FORMAT_RGB, image.pixels.data());
}

void save_png(const fs::path& path, const GrayImage& image) {
  write_png(path, image.width, image.height, PNG_FORMAT_GRAY, image.pixels.data());
}

void save_ppm(const fs::path& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw Error(ErrorCode::io, "short write " + path.string());
}

}  // namespace slidevec
