#include "fvhand/pnm.hpp"

#include "fvhand/errors.hpp"

#include <cctype>
#include <fstream>
#include <iterator>
#include <string>

namespace fvhand::pnm {

namespace {

class HeaderScanner {
 public:
  explicit HeaderScanner(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  int next_int() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) {
      throw DataError("pnm: expected integer in header");
    }
    long value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_++] - '0');
      if (value > 1 << 20) throw DataError("pnm: header value too large");
    }
    return static_cast<int>(value);
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      throw DataError("pnm: missing separator before raster");
    }
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 2;
};

}  // namespace

std::vector<std::uint8_t> encode(const Image& image) {
  if ((image.channels != 1 && image.channels != 3) || image.width <= 0 || image.height <= 0 ||
      image.data.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw std::invalid_argument("pnm: inconsistent image");
  }
  const std::string header = std::string(image.channels == 3 ? "P6" : "P5") + "\n" +
                             std::to_string(image.width) + " " + std::to_string(image.height) +
                             "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.data.begin(), image.data.end());
  return out;
}

Image decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
    throw DataError("pnm: not a binary P5/P6 file");
  }
  Image img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  HeaderScanner scan(bytes);
  img.width = scan.next_int();
  img.height = scan.next_int();
  const int maxval = scan.next_int();
  if (maxval != 255) throw DataError("pnm: only maxval 255 is supported");
  if (img.width <= 0 || img.height <= 0) throw DataError("pnm: empty image");
  const std::size_t start = scan.raster_start();
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (bytes.size() < start + n) throw DataError("pnm: truncated raster");
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                  bytes.begin() + static_cast<std::ptrdiff_t>(start + n));
  return img;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

void write(const std::filesystem::path& path, const Image& image) { write_file(path, encode(image)); }

Image read(const std::filesystem::path& path) { return decode(read_file(path)); }

}  // namespace fvhand::pnm
