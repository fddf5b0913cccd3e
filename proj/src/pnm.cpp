#include "msat/pnm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace msat {
namespace {

struct Header {
  Index width = 0;
  Index height = 0;
  std::size_t data_offset = 0;
};

class HeaderParser {
 public:
  explicit HeaderParser(std::string_view bytes) : bytes_(bytes) {}

  Header parse(std::string_view magic) {
    if (bytes_.size() < 2 || bytes_.substr(0, 2) != magic) {
      throw PnmError("expected magic '" + std::string(magic) + "'", 0);
    }
    pos_ = 2;
    Header h;
    h.width = read_int("width");
    h.height = read_int("height");
    const Index maxval = read_int("maxval");
    if (maxval != 255) throw PnmError("unsupported maxval " + std::to_string(maxval), pos_);
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      throw PnmError("expected single whitespace after maxval", pos_);
    }
    h.data_offset = pos_ + 1;
    return h;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  Index read_int(const char* what) {
    const std::size_t before = pos_;
    skip_space_and_comments();
    if (pos_ == before) throw PnmError(std::string("expected whitespace before ") + what, pos_);
    const std::size_t start = pos_;
    Index v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (1 << 24)) throw PnmError(std::string(what) + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw PnmError(std::string("expected ") + what, start);
    if (v < 1) throw PnmError(std::string(what) + " must be positive", start);
    return v;
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string header(const char* magic, Index w, Index h) {
  std::ostringstream os;
  os << magic << '\n' << w << ' ' << h << "\n255\n";
  return os.str();
}

unsigned char quantize(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

std::string write_ppm(const TensorF& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("write_ppm: image must be 3xHxW, got " + to_string(image.shape()));
  }
  const Index h = image.dim(1), w = image.dim(2), hw = h * w;
  std::string out = header("P6", w, h);
  const std::size_t base = out.size();
  out.resize(base + static_cast<std::size_t>(3 * hw));
  for (Index i = 0; i < hw; ++i) {
    for (Index c = 0; c < 3; ++c) {
      out[base + static_cast<std::size_t>(3 * i + c)] = static_cast<char>(quantize(image[c * hw + i]));
    }
  }
  return out;
}

TensorF read_ppm(std::string_view bytes) {
  const Header hd = HeaderParser(bytes).parse("P6");
  const Index hw = hd.width * hd.height;
  if (bytes.size() < hd.data_offset + static_cast<std::size_t>(3 * hw)) {
    throw PnmError("truncated pixel data", bytes.size());
  }
  TensorF image({3, hd.height, hd.width});
  for (Index i = 0; i < hw; ++i) {
    for (Index c = 0; c < 3; ++c) {
      const auto byte = static_cast<unsigned char>(bytes[hd.data_offset + static_cast<std::size_t>(3 * i + c)]);
      image[c * hw + i] = static_cast<float>(byte) / 255.0f;
    }
  }
  return image;
}

std::string write_pgm(const LabelMap& labels) {
  if (labels.n != 1) throw ShapeError("write_pgm: expects a single label map (n == 1)");
  std::string out = header("P5", labels.w, labels.h);
  out.append(labels.data.begin(), labels.data.end());
  return out;
}

LabelMap read_pgm(std::string_view bytes) {
  const Header hd = HeaderParser(bytes).parse("P5");
  const auto count = static_cast<std::size_t>(hd.width * hd.height);
  if (bytes.size() < hd.data_offset + count) throw PnmError("truncated pixel data", bytes.size());
  LabelMap labels(1, hd.height, hd.width);
  std::copy_n(bytes.data() + hd.data_offset, count, reinterpret_cast<char*>(labels.data.data()));
  return labels;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

}  // namespace msat
