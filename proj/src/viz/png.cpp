#include <png.h>

#include <cstring>

#include "milr/errors.hpp"
#include "milr/image_io.hpp"

namespace milr {

RgbImage read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    const std::string why = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + why);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.height = image.height;
  out.width = image.width;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string why = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + why);
  }
  return out;
}

void write_png(const RgbImage& image, const std::filesystem::path& path) {
  if (image.height == 0 || image.width == 0 ||
      image.pixels.size() != image.height * image.width * 3) {
    throw ContractError("write_png: malformed image");
  }
  png_image desc;
  std::memset(&desc, 0, sizeof(desc));
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(image.width);
  desc.height = static_cast<png_uint_32>(image.height);
  desc.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&desc, path.c_str(), 0, image.pixels.data(), 0,
                               nullptr)) {
    const std::string why = desc.message;
    png_image_free(&desc);
    throw IoError("cannot write PNG " + path.string() + ": " + why);
  }
}

}  // namespace milr
