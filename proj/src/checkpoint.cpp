#include "msat/checkpoint.hpp"

#include "msat/pnm.hpp"

#include <bit>
#include <cstring>
#include <limits>

namespace msat {
namespace {

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > bytes_.size()) {
      throw CheckpointError(std::string("checkpoint truncated reading ") + what + " at byte " + std::to_string(pos_));
    }
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      throw CheckpointError(std::string("checkpoint truncated reading ") + what + " at byte " + std::to_string(pos_));
    }
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const ParamMap<float>& tensors) {
  std::string out = "MSAT";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw CheckpointError("tensor name too long: " + name);
    if (t.rank() > 255) throw CheckpointError("tensor rank too large: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (Index d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    const std::size_t base = out.size();
    out.resize(base + static_cast<std::size_t>(t.size()) * sizeof(float));
    std::memcpy(out.data() + base, t.raw(), static_cast<std::size_t>(t.size()) * sizeof(float));
  }
  return out;
}

ParamMap<float> decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != "MSAT") throw CheckpointError("not an MSAT checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  ParamMap<float> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name(r.take(len, "name"));
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape;
    for (int d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint32_t>("dims");
      if (dim == 0) throw CheckpointError("tensor '" + name + "' has a zero dimension");
      shape.push_back(static_cast<Index>(dim));
    }
    const Index n = shape_size(shape);
    auto raw = r.take(static_cast<std::size_t>(n) * sizeof(float), "tensor data");
    TensorF t(shape);
    std::memcpy(t.raw(), raw.data(), raw.size());
    if (!out.emplace(std::move(name), std::move(t)).second) throw CheckpointError("duplicate tensor name in checkpoint");
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last tensor at byte " + std::to_string(r.pos()));
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParamMap<float>& tensors) {
  write_file(path, encode_checkpoint(tensors));
}

ParamMap<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace msat
