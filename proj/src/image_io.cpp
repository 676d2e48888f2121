#include "aag/image_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>

#include "aag/errors.hpp"

namespace aag {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_fail(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

void jpeg_silence(j_common_ptr, int) {}

Image decode_jpeg(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  err.mgr.emit_message = jpeg_silence;
  Image img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError("JPEG decode failed for " + path + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = cinfo.output_width;
  img.height = cinfo.output_height;
  img.channels = static_cast<std::size_t>(cinfo.output_components);
  img.pixels.resize(img.width * img.height * img.channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() + cinfo.output_scanline * img.width * img.channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

Image decode_png(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw FormatError("PNG decode failed for " + path + ": " + png.message);
  }
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image img{png.width, png.height, gray ? 1u : 3u, {}};
  img.pixels.resize(PNG_IMAGE_SIZE(png));
  // Transparent pixels are composited onto black.
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw FormatError("PNG decode failed for " + path + ": " + png.message);
  }
  return img;
}

Image decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::size_t pos = 2;
  auto next_int = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw FormatError(path + ": PNM header value too large");
    }
    if (digits == 0) throw FormatError(path + ": malformed PNM header");
    return v;
  };
  const bool color = bytes[1] == '6';
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0) throw FormatError(path + ": PNM dimensions must be positive");
  if (maxval != 255) throw FormatError(path + ": only maxval 255 PNM files are supported");
  ++pos;  // single whitespace after maxval
  Image img{static_cast<std::size_t>(w), static_cast<std::size_t>(h), color ? 3u : 1u, {}};
  const std::size_t n = img.width * img.height * img.channels;
  if (bytes.size() < pos + n) throw FormatError(path + ": truncated PNM payload");
  img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
  return img;
}

void write_pnm(const std::string& path, const Image& img, std::size_t channels, const char* magic) {
  if (img.channels != channels || img.pixels.size() != img.width * img.height * channels) {
    throw ArgumentError(std::string(magic) + " writer needs a " + std::to_string(channels) +
                        "-channel image");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << magic << "\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<long>(img.pixels.size()));
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace

Image read_image(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
    return decode_jpeg(bytes, path);
  }
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return decode_png(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    return decode_pnm(bytes, path);
  }
  throw FormatError(path + ": not a JPEG, PNG, PGM or PPM file");
}

void write_pgm(const std::string& path, const Image& img) { write_pnm(path, img, 1, "P5"); }
void write_ppm(const std::string& path, const Image& img) { write_pnm(path, img, 3, "P6"); }

void write_png(const std::string& path, const Image& img) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw DataError("PNG write failed for " + path + ": " + png.message);
  }
}

void write_jpeg(const std::string& path, const Image& img, int quality) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> file(std::fopen(path.c_str(), "wb"), std::fclose);
  if (!file) throw DataError("cannot write " + path);
  jpeg_compress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    throw DataError("JPEG encode failed for " + path + ": " + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, file.get());
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = static_cast<int>(img.channels);
  cinfo.in_color_space = img.channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPROW>(img.pixels.data() + cinfo.next_scanline * img.width * img.channels);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
}

FloatImage to_float_rgb(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ArgumentError("expected a 1- or 3-channel image");
  FloatImage out{3, img.height, img.width, std::vector<float>(3 * img.height * img.width)};
  const std::size_t plane = img.height * img.width;
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t src = img.channels == 1 ? 0 : c;
      out.data[c * plane + p] = static_cast<float>(img.pixels[p * img.channels + src]) / 255.0f;
    }
  }
  return out;
}

FloatImage resize_bilinear(const FloatImage& img, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ArgumentError("resize target must be positive");
  if (height == img.height && width == img.width) return img;
  struct Tap {
    std::size_t lo, hi;
    float frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t d = 0; d < out; ++d) {
      double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(src);
      t[d] = {lo, std::min(lo + 1, in - 1), static_cast<float>(src - static_cast<double>(lo))};
    }
    return t;
  };
  const auto ty = taps(img.height, height);
  const auto tx = taps(img.width, width);
  FloatImage out{img.channels, height, width, std::vector<float>(img.channels * height * width)};
  for (std::size_t c = 0; c < img.channels; ++c) {
    const float* src = img.data.data() + c * img.height * img.width;
    float* dst = out.data.data() + c * height * width;
    for (std::size_t y = 0; y < height; ++y) {
      const float* r0 = src + ty[y].lo * img.width;
      const float* r1 = src + ty[y].hi * img.width;
      for (std::size_t x = 0; x < width; ++x) {
        const auto& h = tx[x];
        // Difference form keeps constant regions exactly constant.
        const float top = r0[h.lo] + h.frac * (r0[h.hi] - r0[h.lo]);
        const float bottom = r1[h.lo] + h.frac * (r1[h.hi] - r1[h.lo]);
        dst[y * width + x] = top + ty[y].frac * (bottom - top);
      }
    }
  }
  return out;
}

void flip_horizontal(FloatImage& img) {
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y) {
      auto row = img.data.begin() + static_cast<long>((c * img.height + y) * img.width);
      std::reverse(row, row + static_cast<long>(img.width));
    }
  }
}

}  // namespace aag
