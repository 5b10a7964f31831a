#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dpt/tensor.hpp"

namespace dpt {

// Planar float image, channel-major. PNM loads land in [0, 1]; the raw float
// container ("DPTR": magic, u32 channels/height/width, then f32 LE data)
// round-trips arbitrary values.
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  int source_maxval = 0;  // PNM maxval, 0 for raw float sources
  std::vector<float> data;

  std::size_t numel() const { return channels * height * width; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
};

namespace detail {

inline int pnm_next_value(std::istream& in) {
  // Skips whitespace and '#' comments between header tokens.
  while (true) {
    int ch = in.peek();
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  int value;
  if (!(in >> value)) throw IoError("pnm: malformed header");
  return value;
}

}  // namespace detail

inline Image read_pnm(std::istream& in, const std::string& what) {
  char magic[2];
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw IoError(what + ": expected binary PGM (P5) or PPM (P6)");
  std::size_t channels = magic[1] == '6' ? 3 : 1;
  std::size_t width = static_cast<std::size_t>(detail::pnm_next_value(in));
  std::size_t height = static_cast<std::size_t>(detail::pnm_next_value(in));
  int maxval = detail::pnm_next_value(in);
  if (maxval <= 0 || maxval > 65535) throw IoError(what + ": bad maxval");
  in.get();  // single whitespace before raster
  std::size_t n = channels * width * height;
  bool wide = maxval > 255;
  std::vector<unsigned char> raw(n * (wide ? 2 : 1));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError(what + ": truncated raster");
  Image img;
  img.channels = channels;
  img.height = height;
  img.width = width;
  img.source_maxval = maxval;
  img.data.resize(n);
  // PNM rasters are interleaved; store planar.
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        std::size_t src = (y * width + x) * channels + c;
        unsigned v = wide ? (static_cast<unsigned>(raw[2 * src]) << 8) | raw[2 * src + 1]
                          : raw[src];
        img.data[(c * height + y) * width + x] =
            static_cast<float>(v) / static_cast<float>(maxval);
      }
  return img;
}

inline void write_pnm(std::ostream& out, const Image& img, bool sixteen_bit = false) {
  check_config(img.channels == 1 || img.channels == 3,
               "pnm: only 1- or 3-channel images can be written");
  unsigned maxval = sixteen_bit ? 65535 : 255;
  out << (img.channels == 3 ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n"
      << maxval << "\n";
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        float v = img.at(c, y, x);
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        unsigned q = static_cast<unsigned>(v * static_cast<float>(maxval) + 0.5f);
        if (q > maxval) q = maxval;
        if (sixteen_bit) {
          out.put(static_cast<char>(q >> 8));
          out.put(static_cast<char>(q & 0xff));
        } else {
          out.put(static_cast<char>(q));
        }
      }
  if (!out) throw IoError("pnm: write failed");
}

inline void write_raw_image(std::ostream& out, const Image& img) {
  out.write("DPTR", 4);
  std::uint32_t dims[3] = {static_cast<std::uint32_t>(img.channels),
                           static_cast<std::uint32_t>(img.height),
                           static_cast<std::uint32_t>(img.width)};
  out.write(reinterpret_cast<const char*>(dims), 12);
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (!out) throw IoError("raw image: write failed");
}

inline Image read_raw_image(std::istream& in, const std::string& what) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "DPTR", 4) != 0)
    throw IoError(what + ": expected DPTR raw float image");
  std::uint32_t dims[3];
  in.read(reinterpret_cast<char*>(dims), 12);
  if (!in) throw IoError(what + ": truncated header");
  Image img;
  img.channels = dims[0];
  img.height = dims[1];
  img.width = dims[2];
  img.data.resize(img.numel());
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (!in) throw IoError(what + ": truncated data");
  return img;
}

inline Image read_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("image: cannot open '" + path + "'");
  int first = f.peek();
  if (first == 'P') return read_pnm(f, path);
  return read_raw_image(f, path);
}

inline void write_image(const std::string& path, const Image& img, bool sixteen_bit = false) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("image: cannot open '" + path + "' for writing");
  bool pnm = path.size() >= 4 && (path.substr(path.size() - 4) == ".pgm" ||
                                  path.substr(path.size() - 4) == ".ppm");
  if (pnm)
    write_pnm(f, img, sixteen_bit);
  else
    write_raw_image(f, img);
}

// Model input tensor: grayscale is replicated to three channels; PNM values
// (already in [0, 1]) are shifted per channel by (v - mean) / std.
template <typename T>
Tensor<T> image_to_tensor(const Image& img, const std::array<double, 3>& mean,
                          const std::array<double, 3>& stddev) {
  check_config(img.channels == 1 || img.channels == 3,
               "image: expected 1 or 3 channels, got " + std::to_string(img.channels));
  Tensor<T> t({3, img.height, img.width});
  T* d = t.mutable_data();
  std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t src_c = img.channels == 1 ? 0 : c;
    for (std::size_t i = 0; i < plane; ++i)
      d[c * plane + i] = static_cast<T>(
          (static_cast<double>(img.data[src_c * plane + i]) - mean[c]) / stddev[c]);
  }
  return t;
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t) {
  check_shape(t.rank() == 3, "tensor_to_image: expected CxHxW");
  Image img;
  img.channels = t.extent(0);
  img.height = t.extent(1);
  img.width = t.extent(2);
  img.data.resize(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) img.data[i] = static_cast<float>(t.at(i));
  return img;
}

// Mirror index for reflective padding (period 2n - 2, no edge repeat).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  std::ptrdiff_t period = 2 * static_cast<std::ptrdiff_t>(n) - 2;
  i = ((i % period) + period) % period;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

// Pads right/bottom with reflection so both extents are multiples of `mult`.
template <typename T>
Tensor<T> reflect_pad_to_multiple(const Tensor<T>& x, std::size_t mult, std::size_t& orig_h,
                                  std::size_t& orig_w) {
  check_shape(x.rank() == 3, "reflect_pad: expected CxHxW");
  orig_h = x.extent(1);
  orig_w = x.extent(2);
  std::size_t h = (orig_h + mult - 1) / mult * mult;
  std::size_t w = (orig_w + mult - 1) / mult * mult;
  if (h == orig_h && w == orig_w) return x;
  Tensor<T> out({x.extent(0), h, w});
  T* d = out.mutable_data();
  for (std::size_t c = 0; c < x.extent(0); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        d[(c * h + y) * w + xx] =
            x.at(c, reflect_index(static_cast<std::ptrdiff_t>(y), orig_h),
                 reflect_index(static_cast<std::ptrdiff_t>(xx), orig_w));
  return out;
}

template <typename T>
Tensor<T> crop_to(const Tensor<T>& x, std::size_t h, std::size_t w) {
  check_shape(x.rank() == 3 && x.extent(1) >= h && x.extent(2) >= w, "crop: target too large");
  if (x.extent(1) == h && x.extent(2) == w) return x;
  Tensor<T> out({x.extent(0), h, w});
  T* d = out.mutable_data();
  for (std::size_t c = 0; c < x.extent(0); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) d[(c * h + y) * w + xx] = x.at(c, y, xx);
  return out;
}

}  // namespace dpt
