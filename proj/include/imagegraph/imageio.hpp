#pragma once

// Raster input/output and colour conversion.
//
// Decoding goes through libpng / libjpeg for PNG and JPEG and a small parser
// for binary PGM/PPM. Grayscale sources are expanded to three identical
// channels so the rest of the pipeline only ever sees RGB.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "imagegraph/error.hpp"

namespace imagegraph {

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // row-major RGB triples

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 0) : width(w), height(h) {
    if (w < 1 || h < 1) throw ArgumentError("RgbImage: dimensions must be >= 1");
    data.assign(static_cast<std::size_t>(w) * h * 3, fill);
  }
  RgbImage(int w, int h, std::vector<std::uint8_t> pixels) : width(w), height(h), data(std::move(pixels)) {
    if (w < 1 || h < 1) throw ArgumentError("RgbImage: dimensions must be >= 1");
    if (data.size() != static_cast<std::size_t>(w) * h * 3)
      throw ArgumentError("RgbImage: data length does not match width*height*3");
  }

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  std::uint8_t& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  bool operator==(const RgbImage&) const = default;
};

struct Lab {
  double l = 0, a = 0, b = 0;
};

inline double lab_distance(const Lab& p, const Lab& q) {
  const double dl = p.l - q.l, da = p.a - q.a, db = p.b - q.b;
  return std::sqrt(dl * dl + da * da + db * db);
}

struct LabImage {
  int width = 0;
  int height = 0;
  std::vector<Lab> data;  // row-major

  LabImage() = default;
  LabImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h) {
    if (w < 1 || h < 1) throw ArgumentError("LabImage: dimensions must be >= 1");
  }

  std::size_t pixel_count() const { return data.size(); }
  const Lab& operator[](std::size_t i) const { return data[i]; }
  Lab& operator[](std::size_t i) { return data[i]; }
  const Lab& at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

// ---------------------------------------------------------------------------
// Colour conversion

namespace detail {

inline const std::array<double, 256>& srgb_linear_table() {
  static const std::array<double, 256> table = [] {
    std::array<double, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const double c = i / 255.0;
      t[i] = c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
    }
    return t;
  }();
  return table;
}

inline double lab_f(double t) {
  constexpr double delta = 6.0 / 29.0;
  return t > delta * delta * delta ? std::cbrt(t) : t / (3 * delta * delta) + 4.0 / 29.0;
}

}  // namespace detail

/// sRGB (D65) to CIELAB for a single 8-bit colour.
inline Lab rgb_to_lab(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  const auto& lin = detail::srgb_linear_table();
  const double r = lin[r8], g = lin[g8], b = lin[b8];
  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  constexpr double xn = 0.95047, yn = 1.0, zn = 1.08883;
  const double fx = detail::lab_f(x / xn), fy = detail::lab_f(y / yn), fz = detail::lab_f(z / zn);
  Lab out;
  out.l = std::clamp(116.0 * fy - 16.0, 0.0, 100.0);
  out.a = 500.0 * (fx - fy);
  out.b = 200.0 * (fy - fz);
  return out;
}

inline LabImage rgb_to_lab(const RgbImage& img) {
  LabImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.pixel_count(); ++i)
    out.data[i] = rgb_to_lab(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]);
  return out;
}

/// Bilinear resampling with half-pixel centres; edge samples are clamped.
inline RgbImage resize_bilinear(const RgbImage& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw ArgumentError("resize_bilinear: target dimensions must be >= 1");
  if (out_w == img.width && out_h == img.height) return img;
  RgbImage out(out_w, out_h);
  const double sx = static_cast<double>(img.width) / out_w;
  const double sy = static_cast<double>(img.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = img.at(x0, y0, c) * (1 - wx) + img.at(x1, y0, c) * wx;
        const double bottom = img.at(x0, y1, c) * (1 - wx) + img.at(x1, y1, c) * wx;
        const double v = top * (1 - wy) + bottom * wy;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoding

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

// --- PNG -------------------------------------------------------------------
// libpng reports errors by longjmp. The functions that call setjmp only hold
// trivially destructible locals; buffers are owned by the C++ caller.

struct PngSource {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t offset;
  char message[256];
};

inline void png_read_memory(png_structp png, png_bytep out, png_size_t n) {
  auto* src = static_cast<PngSource*>(png_get_io_ptr(png));
  if (src->offset + n > src->size) {
    std::memcpy(out, src->data + src->offset, src->size - src->offset);
    src->offset = src->size;
    png_error(png, "unexpected end of data");
  }
  std::memcpy(out, src->data + src->offset, n);
  src->offset += n;
}

inline void png_on_error(png_structp png, png_const_charp msg) {
  auto* src = static_cast<PngSource*>(png_get_error_ptr(png));
  std::snprintf(src->message, sizeof(src->message), "%s", msg);
  png_longjmp(png, 1);
}

inline void png_on_warning(png_structp, png_const_charp) {}

inline bool png_read_header(png_structp png, png_infop info, int* width, int* height) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_strip_16(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) {
    png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
  }
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);
  *width = static_cast<int>(png_get_image_width(png, info));
  *height = static_cast<int>(png_get_image_height(png, info));
  return png_get_rowbytes(png, info) == static_cast<png_size_t>(*width) * 3;
}

inline bool png_read_pixels(png_structp png, png_infop info, png_bytepp rows) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_read_image(png, rows);
  png_read_end(png, info);
  return true;
}

inline RgbImage decode_png(std::span<const std::uint8_t> bytes) {
  PngSource src{bytes.data(), bytes.size(), 0, {}};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &src, png_on_error, png_on_warning);
  if (!png) throw Error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_read_struct(png, info, nullptr); }
  } guard{&png, &info};
  if (!info) throw Error("png_create_info_struct failed");
  png_set_read_fn(png, &src, png_read_memory);

  int width = 0, height = 0;
  if (!png_read_header(png, info, &width, &height)) {
    throw DecodeError(std::string("PNG: ") + (src.message[0] ? src.message : "unsupported layout"), src.offset);
  }
  if (width < 1 || height < 1) throw DecodeError("PNG: empty image", src.offset);
  RgbImage img(width, height);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[y] = img.data.data() + static_cast<std::size_t>(y) * width * 3;
  if (!png_read_pixels(png, info, rows.data())) throw DecodeError(std::string("PNG: ") + src.message, src.offset);
  return img;
}

// --- JPEG ------------------------------------------------------------------

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_on_error(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

inline void jpeg_on_message(j_common_ptr, int) {}

inline std::size_t jpeg_consumed(const jpeg_decompress_struct& cinfo, std::size_t size) {
  return cinfo.src ? size - cinfo.src->bytes_in_buffer : 0;
}

inline bool jpeg_read_header_into(jpeg_decompress_struct* cinfo, JpegErrorManager* err,
                                  const std::uint8_t* data, std::size_t size) {
  if (setjmp(err->jump)) return false;
  jpeg_mem_src(cinfo, const_cast<unsigned char*>(data), static_cast<unsigned long>(size));
  jpeg_read_header(cinfo, TRUE);
  cinfo->out_color_space = cinfo->num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(cinfo);
  return true;
}

inline bool jpeg_read_scanlines_into(jpeg_decompress_struct* cinfo, JpegErrorManager* err, std::uint8_t* buffer) {
  if (setjmp(err->jump)) return false;
  const std::size_t stride = static_cast<std::size_t>(cinfo->output_width) * cinfo->output_components;
  while (cinfo->output_scanline < cinfo->output_height) {
    JSAMPROW row = buffer + cinfo->output_scanline * stride;
    jpeg_read_scanlines(cinfo, &row, 1);
  }
  jpeg_finish_decompress(cinfo);
  return true;
}

inline RgbImage decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_on_error;
  err.base.emit_message = jpeg_on_message;
  jpeg_create_decompress(&cinfo);
  struct Guard {
    jpeg_decompress_struct* c;
    ~Guard() { jpeg_destroy_decompress(c); }
  } guard{&cinfo};

  if (!jpeg_read_header_into(&cinfo, &err, bytes.data(), bytes.size()))
    throw DecodeError(std::string("JPEG: ") + err.message, jpeg_consumed(cinfo, bytes.size()));
  const int width = static_cast<int>(cinfo.output_width);
  const int height = static_cast<int>(cinfo.output_height);
  const int channels = cinfo.output_components;
  if (width < 1 || height < 1 || (channels != 1 && channels != 3))
    throw DecodeError("JPEG: unsupported layout", jpeg_consumed(cinfo, bytes.size()));
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(width) * height * channels);
  if (!jpeg_read_scanlines_into(&cinfo, &err, raw.data()))
    throw DecodeError(std::string("JPEG: ") + err.message, jpeg_consumed(cinfo, bytes.size()));
  if (channels == 3) return RgbImage(width, height, std::move(raw));
  RgbImage img(width, height);
  for (std::size_t i = 0; i < raw.size(); ++i) img.data[3 * i] = img.data[3 * i + 1] = img.data[3 * i + 2] = raw[i];
  return img;
}

// --- PGM / PPM (binary) --------------------------------------------------------

inline RgbImage decode_pnm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 2;
  const bool gray = bytes[1] == '5';
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
  auto read_int = [&]() -> long {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw DecodeError("PNM: malformed header", pos);
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1L << 24)) throw DecodeError("PNM: header value out of range", pos);
    }
    return v;
  };
  const long w = read_int();
  const long h = read_int();
  const long maxval = read_int();
  if (w < 1 || h < 1) throw DecodeError("PNM: empty image", pos);
  if (maxval < 1 || maxval > 255) throw DecodeError("PNM: only 8-bit maxval is supported", pos);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DecodeError("PNM: malformed header", pos);
  ++pos;
  const std::size_t channels = gray ? 1 : 3;
  const std::size_t need = static_cast<std::size_t>(w) * h * channels;
  if (bytes.size() - pos < need) throw DecodeError("PNM: truncated pixel data", bytes.size());
  RgbImage img(static_cast<int>(w), static_cast<int>(h));
  auto scale = [&](std::uint8_t v) -> std::uint8_t {
    return maxval == 255 ? v : static_cast<std::uint8_t>(std::lround(std::min<long>(v, maxval) * 255.0 / maxval));
  };
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    if (gray) {
      img.data[3 * i] = img.data[3 * i + 1] = img.data[3 * i + 2] = scale(bytes[pos + i]);
    } else {
      for (int c = 0; c < 3; ++c) img.data[3 * i + c] = scale(bytes[pos + 3 * i + c]);
    }
  }
  return img;
}

}  // namespace detail

/// Decodes PNG, baseline JPEG, or binary PGM/PPM from memory.
inline RgbImage decode_image(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(std::begin(png_sig), std::end(png_sig), bytes.begin()))
    return detail::decode_png(bytes);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) return detail::decode_jpeg(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) return detail::decode_pnm(bytes);
  throw DecodeError("unrecognised image format", 0);
}

inline RgbImage load_image(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  try {
    return decode_image(bytes);
  } catch (const DecodeError& e) {
    throw DecodeError(path.string() + ": " + e.what(), e.offset());
  }
}

// ---------------------------------------------------------------------------
// Encoding (synthetic datasets and debug output)

namespace detail {

struct PngSink {
  std::vector<std::uint8_t>* out;
  char message[256];
};

inline void png_write_memory(png_structp png, png_bytep data, png_size_t n) {
  auto* sink = static_cast<PngSink*>(png_get_io_ptr(png));
  sink->out->insert(sink->out->end(), data, data + n);
}

inline void png_flush_noop(png_structp) {}

inline bool png_write_all(png_structp png, png_infop info, int w, int h, int color, png_bytepp rows) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows);
  png_write_end(png, nullptr);
  return true;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  std::vector<std::uint8_t> bytes;
  detail::PngSink sink{&bytes, {}};
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &sink, nullptr, nullptr);
  if (!png) throw Error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_write_struct(png, info); }
  } guard{&png, &info};
  if (!info) throw Error("png_create_info_struct failed");
  png_set_write_fn(png, &sink, detail::png_write_memory, detail::png_flush_noop);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  auto* base = const_cast<std::uint8_t*>(img.data.data());
  for (int y = 0; y < img.height; ++y) rows[y] = base + static_cast<std::size_t>(y) * img.width * 3;
  if (!detail::png_write_all(png, info, img.width, img.height, PNG_COLOR_TYPE_RGB, rows.data()))
    throw Error("PNG encoding failed");
  return bytes;
}

inline void save_png(const std::filesystem::path& path, const RgbImage& img) {
  detail::write_file_bytes(path, encode_png(img));
}

/// Binary PGM of the first channel (grayscale sources are stored that way).
inline void save_pgm(const std::filesystem::path& path, const RgbImage& img) {
  std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (std::size_t i = 0; i < img.pixel_count(); ++i) bytes.push_back(img.data[3 * i]);
  detail::write_file_bytes(path, bytes);
}

}  // namespace imagegraph
