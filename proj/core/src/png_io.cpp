#include "matseg/png_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace matseg {

namespace {

constexpr std::uint8_t kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};

std::uint32_t read_u32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void write_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  std::span<const std::uint8_t> payload) {
  write_u32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uLong crc =
      crc32(0, out.data() + crc_start, static_cast<uInt>(4 + payload.size()));
  write_u32(out, static_cast<std::uint32_t>(crc));
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

ImageU8 decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSignature, 8) != 0) {
    throw PngError("not a PNG file");
  }
  std::size_t pos = 8;
  std::size_t width = 0, height = 0, channels = 0;
  int bit_depth = 0, color_type = -1;
  std::vector<std::uint8_t> idat;
  bool seen_iend = false;
  bool palette_seen = false;

  while (pos + 8 <= bytes.size() && !seen_iend) {
    const std::uint32_t length = read_u32(bytes.data() + pos);
    if (pos + 12 + length > bytes.size()) {
      throw PngError("truncated chunk");
    }
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const std::uint8_t* payload = bytes.data() + pos + 8;
    const std::uint32_t stored_crc = read_u32(payload + length);
    const uLong crc = crc32(0, bytes.data() + pos + 4, 4 + length);
    if (static_cast<std::uint32_t>(crc) != stored_crc) {
      throw PngError("chunk CRC mismatch");
    }

    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (length != 13) throw PngError("bad IHDR length");
      width = read_u32(payload);
      height = read_u32(payload + 4);
      bit_depth = payload[8];
      color_type = payload[9];
      if (payload[10] != 0 || payload[11] != 0) {
        throw PngError("unsupported compression/filter method");
      }
      if (payload[12] != 0) throw PngError("interlaced PNG not supported");
      if (bit_depth != 8) throw PngError("only 8-bit PNG supported");
      switch (color_type) {
        case 0: channels = 1; break;  // gray
        case 2: channels = 3; break;  // rgb
        case 3: channels = 1; break;  // indexed; indices returned as-is
        case 6: channels = 4; break;  // rgba
        default: throw PngError("unsupported PNG color type");
      }
      if (width == 0 || height == 0) throw PngError("zero-sized image");
    } else if (std::memcmp(type, "PLTE", 4) == 0) {
      palette_seen = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + length);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      seen_iend = true;
    }
    pos += 12 + length;
  }
  if (color_type < 0) throw PngError("missing IHDR");
  if (!seen_iend) throw PngError("missing IEND");
  if (color_type == 3 && !palette_seen) throw PngError("indexed PNG without PLTE");
  if (idat.empty()) throw PngError("missing IDAT");

  const std::size_t stride = width * channels;
  const std::size_t raw_size = (stride + 1) * height;
  std::vector<std::uint8_t> raw(raw_size);
  {
    z_stream zs{};
    if (inflateInit(&zs) != Z_OK) throw PngError("inflate init failed");
    zs.next_in = idat.data();
    zs.avail_in = static_cast<uInt>(idat.size());
    zs.next_out = raw.data();
    zs.avail_out = static_cast<uInt>(raw.size());
    const int rc = inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    if (rc != Z_STREAM_END || zs.total_out != raw_size) {
      throw PngError("inflate failed or size mismatch");
    }
  }

  ImageU8 img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.pixels.assign(stride * height, 0);

  const std::size_t bpp = channels;  // bytes per pixel at 8-bit depth
  for (std::size_t y = 0; y < height; ++y) {
    const std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
    std::uint8_t* dst = img.pixels.data() + y * stride;
    const std::uint8_t* prev = y > 0 ? img.pixels.data() + (y - 1) * stride : nullptr;
    for (std::size_t x = 0; x < stride; ++x) {
      const int a = x >= bpp ? dst[x - bpp] : 0;
      const int b = prev ? prev[x] : 0;
      const int c = (prev && x >= bpp) ? prev[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw PngError("unknown scanline filter");
      }
      dst[x] = static_cast<std::uint8_t>(v & 0xFF);
    }
  }
  return img;
}

std::vector<std::uint8_t> encode_png(const ImageU8& image) {
  if (image.width == 0 || image.height == 0) {
    throw PngError("cannot encode zero-sized image");
  }
  if (image.channels != 1 && image.channels != 3 && image.channels != 4) {
    throw PngError("encode supports 1, 3 or 4 channels");
  }
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw PngError("pixel buffer size mismatch");
  }

  const std::size_t stride = image.width * image.channels;
  std::vector<std::uint8_t> raw((stride + 1) * image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    raw[y * (stride + 1)] = 0;  // filter: none
    std::memcpy(raw.data() + y * (stride + 1) + 1,
                image.pixels.data() + y * stride, stride);
  }

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(),
                static_cast<uLong>(raw.size()), Z_DEFAULT_COMPRESSION) != Z_OK) {
    throw PngError("deflate failed");
  }
  compressed.resize(bound);

  std::vector<std::uint8_t> out(kSignature, kSignature + 8);
  std::vector<std::uint8_t> ihdr;
  write_u32(ihdr, static_cast<std::uint32_t>(image.width));
  write_u32(ihdr, static_cast<std::uint32_t>(image.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(image.channels == 1 ? 0 : (image.channels == 3 ? 2 : 6));
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", compressed);
  append_chunk(out, "IEND", {});
  return out;
}

ImageU8 load_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PngError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

void save_png(const std::filesystem::path& path, const ImageU8& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PngError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw PngError("short write to " + path.string());
}

Tensor tensor_from_image(const ImageU8& image) {
  Tensor t({image.channels, image.height, image.width});
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) {
        t.at3(c, y, x) =
            image.pixels[(y * image.width + x) * image.channels + c] / 255.0;
      }
    }
  }
  return t;
}

ImageU8 image_from_tensor(const Tensor& t) {
  if (t.rank() != 3) throw PngError("image tensor must be (C, H, W)");
  ImageU8 img;
  img.channels = t.dim(0);
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.pixels.resize(img.channels * img.height * img.width);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double v = std::clamp(t.at3(c, y, x), 0.0, 1.0);
        img.pixels[(y * img.width + x) * img.channels + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return img;
}

LabelMask mask_from_image(const ImageU8& image) {
  if (image.channels != 1) {
    throw PngError("label masks must be single-channel PNGs");
  }
  LabelMask mask(image.height, image.width);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    mask.labels[i] = image.pixels[i];
  }
  return mask;
}

ImageU8 image_from_mask(const LabelMask& mask) {
  ImageU8 img;
  img.width = mask.width;
  img.height = mask.height;
  img.channels = 1;
  img.pixels.resize(mask.labels.size());
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    const std::int32_t v = mask.labels[i];
    if (v < 0 || v > 255) {
      throw PngError("label " + std::to_string(v) + " not encodable as 8-bit");
    }
    img.pixels[i] = static_cast<std::uint8_t>(v);
  }
  return img;
}

}  // namespace matseg
