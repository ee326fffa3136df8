#include "megl/image_io.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <vector>

namespace megl {
namespace {

int64_t read_header_int(std::istream& in, const std::filesystem::path& path) {
  int ch = in.get();
  while (in && (std::isspace(ch) || ch == '#')) {
    if (ch == '#') {
      while (in && ch != '\n') ch = in.get();
    }
    ch = in.get();
  }
  if (!in || !std::isdigit(ch)) fail(ErrorKind::kParseError, "bad PNM header in " + path.string());
  int64_t value = 0;
  while (in && std::isdigit(ch)) {
    value = value * 10 + (ch - '0');
    ch = in.get();
  }
  return value;  // the single whitespace after the number has been consumed
}

}  // namespace

torch::Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingFile, "cannot open image '" + path.string() + "'");
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    fail(ErrorKind::kParseError, "unsupported image format in " + path.string());
  }
  const int64_t channels = magic[1] == '6' ? 3 : 1;
  const int64_t width = read_header_int(in, path);
  const int64_t height = read_header_int(in, path);
  const int64_t maxval = read_header_int(in, path);
  if (width <= 0 || height <= 0 || maxval != 255) {
    fail(ErrorKind::kParseError, "unsupported PNM geometry in " + path.string());
  }
  std::vector<unsigned char> bytes(static_cast<size_t>(width * height * channels));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    fail(ErrorKind::kParseError, "truncated image " + path.string());
  }
  auto hwc = torch::from_blob(bytes.data(), {height, width, channels}, torch::kUInt8);
  return hwc.permute({2, 0, 1}).to(torch::kFloat).div(255.0).contiguous();
}

void write_pnm(const std::filesystem::path& path, const torch::Tensor& image) {
  auto img = image.dim() == 2 ? image.unsqueeze(0) : image;
  if (img.dim() != 3 || (img.size(0) != 1 && img.size(0) != 3)) {
    fail(ErrorKind::kShapeMismatch, "PNM writer expects (1|3, H, W)");
  }
  const int64_t channels = img.size(0);
  const auto bytes = img.detach()
                         .to(torch::kDouble)
                         .clamp(0.0, 1.0)
                         .mul(255.0)
                         .round()
                         .to(torch::kUInt8)
                         .permute({1, 2, 0})
                         .contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kMissingFile, "cannot write image '" + path.string() + "'");
  out << (channels == 3 ? "P6" : "P5") << "\n" << img.size(2) << " " << img.size(1) << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data_ptr<uint8_t>()),
            static_cast<std::streamsize>(bytes.numel()));
}

void write_pfm(const std::filesystem::path& path, const torch::Tensor& map) {
  if (map.dim() != 2) fail(ErrorKind::kShapeMismatch, "PFM writer expects (H, W)");
  const auto rows = map.detach().to(torch::kFloat).flip({0}).contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kMissingFile, "cannot write image '" + path.string() + "'");
  out << "Pf\n" << map.size(1) << " " << map.size(0) << "\n-1.0\n";
  out.write(reinterpret_cast<const char*>(rows.data_ptr<float>()),
            static_cast<std::streamsize>(rows.numel() * sizeof(float)));
}

torch::Tensor read_pfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingFile, "cannot open image '" + path.string() + "'");
  std::string magic;
  int64_t w = 0, h = 0;
  double scale = 0.0;
  in >> magic >> w >> h >> scale;
  if (!in || magic != "Pf" || w <= 0 || h <= 0 || scale >= 0.0) {
    fail(ErrorKind::kParseError, "'" + path.string() + "' is not a little-endian grayscale PFM");
  }
  in.get();
  auto t = torch::empty({h, w}, torch::kFloat);
  in.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(h * w * sizeof(float)));
  if (!in) fail(ErrorKind::kParseError, "truncated PFM '" + path.string() + "'");
  return t.flip({0}).contiguous();
}

}  // namespace megl
