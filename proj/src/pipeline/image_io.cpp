#include "bfr/errors.hpp"
#include "bfr/pipeline.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace bfr {

namespace fs = std::filesystem;

std::uint8_t to_u8(float v) {
  const float level = std::round((std::clamp(v, -1.f, 1.f) + 1.f) * 127.5f);
  return static_cast<std::uint8_t>(std::clamp(level, 0.f, 255.f));
}

namespace {

Tensor<float> from_interleaved(const std::uint8_t* rgb, Index h, Index w) {
  Tensor<float>::Array v(3 * h * w);
  for (Index i = 0; i < h * w; ++i)
    for (Index c = 0; c < 3; ++c) v[c * h * w + i] = from_u8(rgb[3 * i + c]);
  return Tensor<float>({3, h, w}, std::move(v));
}

std::vector<std::uint8_t> to_interleaved(const Tensor<float>& pixels) {
  if (pixels.ndim() != 3 || pixels.dim(0) != 3) {
    throw DimensionError("expected [3,h,w] pixels, got " + to_string(pixels.shape()));
  }
  const Index h = pixels.dim(1), w = pixels.dim(2);
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(3 * h * w));
  for (Index i = 0; i < h * w; ++i)
    for (Index c = 0; c < 3; ++c) rgb[static_cast<std::size_t>(3 * i + c)] = to_u8(pixels.values()[c * h * w + i]);
  return rgb;
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot write " + path.string());
}

const std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
}

// Walks the chunk list so that structural damage is reported with its
// position; returns the offset of the first IDAT chunk.
std::size_t check_png_chunks(const std::vector<std::uint8_t>& bytes) {
  std::size_t off = 8, first_idat = 0;
  while (true) {
    if (off + 8 > bytes.size()) throw ParseError("truncated PNG chunk header", off);
    const std::uint32_t len = read_be32(&bytes[off]);
    const std::string type(reinterpret_cast<const char*>(&bytes[off + 4]), 4);
    if (off + 12 + std::size_t(len) > bytes.size()) throw ParseError("truncated PNG chunk " + type, off);
    const uLong crc = crc32(crc32(0L, Z_NULL, 0), &bytes[off + 4], len + 4);
    if (crc != read_be32(&bytes[off + 8 + len])) throw ParseError("CRC mismatch in PNG chunk " + type, off);
    if (type == "IDAT" && first_idat == 0) first_idat = off;
    if (type == "IEND") return first_idat;
    off += 12 + len;
  }
}

}  // namespace

Tensor<float> decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ParseError("not a binary PPM (P6)", 0);
  pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto next_number = [&](const char* what) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw ParseError(std::string("expected ") + what, pos);
    long value = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos++] - '0');
      if (value > 1 << 20) throw ParseError(std::string(what) + " too large", pos);
    }
    return value;
  };
  const long w = next_number("width");
  const long h = next_number("height");
  skip_space();
  const std::size_t maxval_at = pos;
  const long maxval = next_number("maxval");
  if (maxval != 255) throw ParseError("only maxval 255 is supported", maxval_at);
  if (w == 0 || h == 0) throw ParseError("empty image", maxval_at);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw ParseError("expected whitespace after maxval", pos);
  ++pos;
  const std::size_t need = static_cast<std::size_t>(3 * w * h);
  if (bytes.size() - pos < need) throw ParseError("truncated pixel data", bytes.size());
  return from_interleaved(bytes.data() + pos, h, w);
}

std::vector<std::uint8_t> encode_ppm(const Tensor<float>& pixels) {
  auto rgb = to_interleaved(pixels);
  const std::string header =
      "P6\n" + std::to_string(pixels.dim(2)) + " " + std::to_string(pixels.dim(1)) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), rgb.begin(), rgb.end());
  return out;
}

Tensor<float> decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSignature, 8) != 0) {
    throw ParseError("missing PNG signature", 0);
  }
  const std::size_t idat = check_png_chunks(bytes);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw ParseError(std::string("PNG header: ") + image.message, 8);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ParseError("PNG data: " + msg, idat);
  }
  return from_interleaved(rgb.data(), image.height, image.width);
}

std::vector<std::uint8_t> encode_png(const Tensor<float>& pixels) {
  auto rgb = to_interleaved(pixels);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(pixels.dim(2));
  image.height = static_cast<png_uint_32>(pixels.dim(1));
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, rgb.data(), 0, nullptr)) {
    throw Error(std::string("PNG encode: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, rgb.data(), 0, nullptr)) {
    throw Error(std::string("PNG encode: ") + image.message);
  }
  out.resize(size);
  return out;
}

ImageRecord load_image(const fs::path& path) {
  const auto bytes = read_file(path);
  const bool png = bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSignature, 8) == 0;
  ImageRecord record;
  record.id = path.stem().string();
  record.hq = png ? decode_png(bytes) : decode_ppm(bytes);
  const Index h = record.hq.dim(1), w = record.hq.dim(2);
  if (h != w) throw ValidationError(path.string() + ": image is " + std::to_string(w) + "x" + std::to_string(h) + ", not square");
  if ((h & (h - 1)) != 0) throw ValidationError(path.string() + ": extent " + std::to_string(h) + " is not a power of two");
  return record;
}

void save_image(const Tensor<float>& pixels, const fs::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".ppm") {
    write_file(path, encode_ppm(pixels));
  } else if (ext == ".png") {
    write_file(path, encode_png(pixels));
  } else {
    throw ConfigError("unsupported image extension '" + ext + "' (use .png or .ppm)");
  }
}

void save_image(const ImageRecord& record, const fs::path& path) { save_image(record.hq, path); }

}  // namespace bfr
