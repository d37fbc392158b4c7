#include "p2i/image_io.hpp"

#include <png.h>

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>

#include "p2i/file_util.hpp"

namespace p2i {
namespace {

std::string lower_ext(const std::filesystem::path& path) {
  std::string e = path.extension().string();
  for (char& ch : e) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return e;
}

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

Tensor read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    fail(ErrorCode::kFormat, "'" + path.string() + "' is not a readable PNG: " + img.message);
  }
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    fail(ErrorCode::kFormat, "'" + path.string() + "' is a corrupt PNG: " + msg);
  }
  const int C = color ? 3 : 1, H = static_cast<int>(img.height), W = static_cast<int>(img.width);
  Tensor t(Shape{1, C, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c)
        t.at(0, c, y, x) = static_cast<float>(pixels[(static_cast<std::size_t>(y) * W + x) * C + c]) / 255.0f;
  return t;
}

class PnmParser {
 public:
  PnmParser(const std::filesystem::path& path, std::vector<std::uint8_t> bytes)
      : path_(path), b_(std::move(bytes)) {}

  Tensor parse() {
    if (b_.size() < 2 || b_[0] != 'P') bad("missing P-format magic");
    const char kind = static_cast<char>(b_[1]);
    pos_ = 2;
    const bool ascii = kind == '2' || kind == '3';
    const int C = (kind == '3' || kind == '6') ? 3 : 1;
    if (kind != '2' && kind != '3' && kind != '5' && kind != '6') bad("unsupported PNM variant");
    const long W = number(), H = number(), maxval = number();
    if (W <= 0 || H <= 0 || maxval <= 0 || maxval > 65535) bad("invalid header");
    Tensor t(Shape{1, C, static_cast<int>(H), static_cast<int>(W)});
    if (!ascii) {
      if (pos_ >= b_.size() || !std::isspace(b_[pos_])) bad("invalid header terminator");
      ++pos_;
    }
    const int bytes_per = maxval > 255 ? 2 : 1;
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x)
        for (int c = 0; c < C; ++c) {
          long v;
          if (ascii) {
            v = number();
          } else {
            if (pos_ + bytes_per > b_.size()) bad("truncated pixel data");
            v = bytes_per == 2 ? (b_[pos_] << 8) | b_[pos_ + 1] : b_[pos_];
            pos_ += bytes_per;
          }
          if (v > maxval) bad("sample exceeds maxval");
          t.at(0, c, static_cast<int>(y), static_cast<int>(x)) = static_cast<float>(v) / static_cast<float>(maxval);
        }
    return t;
  }

 private:
  [[noreturn]] void bad(const std::string& why) const {
    fail(ErrorCode::kFormat, "'" + path_.string() + "' is not a valid PNM file: " + why);
  }

  long number() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
    if (pos_ >= b_.size() || !std::isdigit(b_[pos_])) bad("expected a number");
    long v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_++] - '0');
      if (v > (1L << 30)) bad("number out of range");
    }
    return v;
  }

  std::filesystem::path path_;
  std::vector<std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> interleave(const Tensor& image) {
  const int C = image.c(), H = image.h(), W = image.w();
  std::vector<std::uint8_t> px(static_cast<std::size_t>(C) * H * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) px[(static_cast<std::size_t>(y) * W + x) * C + c] = to_byte(image.at(0, c, y, x));
  return px;
}

}  // namespace

Tensor read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::kIo, "image file '" + path.string() + "' does not exist");
  const std::string ext = lower_ext(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return PnmParser(path, read_bytes(path)).parse();
  fail(ErrorCode::kFormat, "'" + path.string() + "': unsupported image format (use PNG, PGM or PPM)");
}

void write_image(const std::filesystem::path& path, const Tensor& image) {
  if (image.n() != 1 || (image.c() != 1 && image.c() != 3)) {
    fail(ErrorCode::kShape, "write_image: expected (1,1,H,W) or (1,3,H,W), got " + to_string(image.shape()));
  }
  const std::vector<std::uint8_t> px = interleave(image);
  const std::string ext = lower_ext(path);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (ext == ".png") {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.w());
    img.height = static_cast<png_uint_32>(image.h());
    img.format = image.c() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_get_memory_size(img, size, 0, px.data(), 0, nullptr)) {
      fail(ErrorCode::kIo, "cannot encode PNG '" + path.string() + "': " + img.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, px.data(), 0, nullptr)) {
      fail(ErrorCode::kIo, "cannot encode PNG '" + path.string() + "': " + img.message);
    }
    out.resize(size);
    write_bytes_atomic(path, out);
    return;
  }
  if (ext == ".pgm" || ext == ".ppm") {
    if ((ext == ".pgm") != (image.c() == 1)) {
      fail(ErrorCode::kInvalidArgument, "'" + path.string() + "': extension does not match channel count");
    }
    const std::string header = std::string(image.c() == 1 ? "P5" : "P6") + "\n" + std::to_string(image.w()) + " " +
                               std::to_string(image.h()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), px.begin(), px.end());
    write_bytes_atomic(path, out);
    return;
  }
  fail(ErrorCode::kInvalidArgument, "'" + path.string() + "': unsupported output format (use .png, .pgm or .ppm)");
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::vector<std::uint8_t> out = {'P', '2', 'I', 'T'};
  out.reserve(20 + 4 * t.size());
  auto put = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put(static_cast<std::uint32_t>(t.n()));
  put(static_cast<std::uint32_t>(t.c()));
  put(static_cast<std::uint32_t>(t.h()));
  put(static_cast<std::uint32_t>(t.w()));
  for (float v : t.values()) put(std::bit_cast<std::uint32_t>(v));
  write_bytes_atomic(path, out);
}

Tensor load_tensor(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> b = read_bytes(path);
  auto u32 = [&](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
    return v;
  };
  if (b.size() < 20 || std::memcmp(b.data(), "P2IT", 4) != 0) {
    fail(ErrorCode::kFormat, "'" + path.string() + "' is not a tensor file");
  }
  const Shape s{static_cast<int>(u32(4)), static_cast<int>(u32(8)), static_cast<int>(u32(12)),
                static_cast<int>(u32(16))};
  if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0 || b.size() != 20 + 4 * s.numel()) {
    fail(ErrorCode::kFormat, "'" + path.string() + "': tensor file size does not match its header");
  }
  std::vector<float> data(s.numel());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<float>(u32(20 + 4 * i));
  return Tensor(s, std::move(data));
}

}  // namespace p2i
