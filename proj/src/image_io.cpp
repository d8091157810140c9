#include "latinf/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "latinf/errors.hpp"

namespace latinf {

ImageBatch::ImageBatch(Tensor pixels) : pixels_(std::move(pixels)) {
  LATINF_EXPECT(pixels_.rank() == 4, "image batch must be rank 4, got " + shape_str(pixels_.shape()));
}

ImageBatch ImageBatch::empty(std::int64_t channels, std::int64_t height, std::int64_t width) {
  return ImageBatch(Tensor({0, channels, height, width}));
}

Tensor ImageBatch::image(std::int64_t i) const {
  Tensor one = pixels_.slice_rows(i, i + 1);
  return one.reshaped({channels(), height(), width()});
}

bool ImageBatch::in_unit_interval(double tol) const {
  return std::all_of(pixels_.values().begin(), pixels_.values().end(),
                     [tol](double v) { return v >= -tol && v <= 1.0 + tol; });
}

ImageBatch stack_images(std::span<const Tensor> chw_images) {
  LATINF_EXPECT(!chw_images.empty(), "stack_images needs at least one image");
  std::vector<Tensor> rows;
  rows.reserve(chw_images.size());
  for (const auto& t : chw_images) {
    LATINF_EXPECT(t.rank() == 3, "stack_images expects [C, H, W] images");
    Shape s{1, t.dim(0), t.dim(1), t.dim(2)};
    rows.push_back(t.reshaped(s));
  }
  return ImageBatch(Tensor::stack_rows(rows));
}

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok += c;
  }
  return tok;
}

}  // namespace

Tensor read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  const std::string magic = next_token(in);
  std::int64_t channels;
  if (magic == "P6") {
    channels = 3;
  } else if (magic == "P5") {
    channels = 1;
  } else {
    throw DataError("unsupported image format in " + path.string() + " (expected binary P5/P6)");
  }
  std::int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(next_token(in));
    h = std::stoll(next_token(in));
    maxval = std::stoll(next_token(in));
  } catch (const std::exception&) {
    throw DataError("malformed netpbm header in " + path.string());
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw DataError("invalid netpbm header in " + path.string());
  const std::int64_t bytes_per = maxval > 255 ? 2 : 1;
  std::string raw(static_cast<std::size_t>(w * h * channels * bytes_per), '\0');
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw DataError("truncated image data in " + path.string());
  Tensor out({channels, h, w});
  const auto top = static_cast<double>(maxval);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < channels; ++c) {
        const std::size_t i = static_cast<std::size_t>(((y * w + x) * channels + c) * bytes_per);
        unsigned v = static_cast<unsigned char>(raw[i]);
        if (bytes_per == 2) v = (v << 8) | static_cast<unsigned char>(raw[i + 1]);
        out[(c * h + y) * w + x] = std::min(1.0, v / top);
      }
  return out;
}

void write_netpbm(const std::filesystem::path& path, const Tensor& chw) {
  LATINF_EXPECT(chw.rank() == 3 && (chw.dim(0) == 1 || chw.dim(0) == 3),
                "write_netpbm expects [1|3, H, W], got " + shape_str(chw.shape()));
  const std::int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  std::ostringstream os;
  os << (c == 3 ? "P6" : "P5") << '\n' << w << ' ' << h << "\n255\n";
  std::string body(static_cast<std::size_t>(c * h * w), '\0');
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t k = 0; k < c; ++k) {
        const double v = std::clamp(chw[(k * h + y) * w + x], 0.0, 1.0);
        body[static_cast<std::size_t>((y * w + x) * c + k)] = static_cast<char>(std::lround(v * 255.0));
      }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write image " + path.string());
  const std::string header = os.str();
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
}

Tensor resize_bilinear(const Tensor& chw, std::int64_t height, std::int64_t width) {
  LATINF_EXPECT(chw.rank() == 3, "resize_bilinear expects [C, H, W]");
  LATINF_EXPECT(height > 0 && width > 0, "resize_bilinear: target size must be positive");
  const std::int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  if (h == height && w == width) return chw;
  Tensor out({c, height, width});
  const double sy = static_cast<double>(h) / static_cast<double>(height);
  const double sx = static_cast<double>(w) / static_cast<double>(width);
  for (std::int64_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::int64_t>(fy);
    const std::int64_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::int64_t>(fx);
      const std::int64_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::int64_t k = 0; k < c; ++k) {
        const double* p = chw.data() + k * h * w;
        const double top = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
        const double bot = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
        out[(k * height + y) * width + x] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

ImageBatch load_images(std::span<const std::filesystem::path> paths, std::int64_t channels, std::int64_t height,
                       std::int64_t width) {
  if (paths.empty()) return ImageBatch::empty(channels, height, width);
  std::vector<Tensor> images;
  images.reserve(paths.size());
  for (const auto& p : paths) {
    Tensor img = read_netpbm(p);
    if (img.dim(0) != channels) {
      if (img.dim(0) == 1 && channels == 3) {
        Tensor rgb({3, img.dim(1), img.dim(2)});
        const auto plane = img.numel();
        for (int k = 0; k < 3; ++k) std::copy_n(img.data(), plane, rgb.data() + k * plane);
        img = std::move(rgb);
      } else {
        throw DataError("image " + p.string() + " has " + std::to_string(img.dim(0)) + " channels, expected " +
                        std::to_string(channels));
      }
    }
    images.push_back(resize_bilinear(img, height, width));
  }
  return stack_images(images);
}

}  // namespace latinf
