#include "circle/ingest.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

namespace circle::ingest {

namespace {

constexpr double kDepthScale = 1000.0;

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

DepthFrame read_depth_png(const std::filesystem::path& path, const geom::Intrinsics& k,
                          const geom::Pose& pose, int frame_id) {
  FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw Error(ErrorCode::Io, "cannot open depth image " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::Io, "libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::Format, "corrupt depth image " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto width = static_cast<int>(png_get_image_width(png, info));
  const auto height = static_cast<int>(png_get_image_height(png, info));
  const int depth_bits = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (depth_bits != 16 || color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::Format, "depth image must be 16-bit grayscale: " + path.string());
  }
  if (width != k.width || height != k.height) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::ShapeMismatch, "depth image size differs from intrinsics");
  }
  png_set_swap(png);
  png_read_update_info(png, info);

  std::vector<std::uint16_t> pixels(static_cast<std::size_t>(width) * height);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int v = 0; v < height; ++v) {
    rows[v] = reinterpret_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(v) * width);
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  DepthFrame frame = DepthFrame::blank(k, pose, frame_id);
  for (std::size_t i = 0; i < pixels.size(); ++i) frame.depth[i] = pixels[i] / kDepthScale;
  return frame;
}

void write_depth_png(const std::filesystem::path& path, const DepthFrame& frame) {
  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw Error(ErrorCode::Io, "cannot write depth image " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::Io, "libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::Io, "failed writing depth image " + path.string());
  }
  const int width = frame.width();
  const int height = frame.height();
  std::vector<std::uint16_t> pixels(static_cast<std::size_t>(width) * height);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double mm = std::round(frame.depth[i] * kDepthScale);
    pixels[i] = static_cast<std::uint16_t>(std::clamp(mm, 0.0, 65535.0));
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  // Fixed header fields only, so identical frames give identical bytes.
  png_write_info(png, info);
  png_set_swap(png);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int v = 0; v < height; ++v) {
    rows[v] = reinterpret_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(v) * width);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace circle::ingest
