#ifndef MSAT_PNM_HPP
#define MSAT_PNM_HPP

#include "msat/labels.hpp"
#include "msat/tensor.hpp"

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace msat {

class PnmError : public std::runtime_error {
 public:
  PnmError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Binary PPM (P6) / PGM (P5) with maxval 255. Images are 3 x H x W float
// tensors in [0, 1]; values are clamped and rounded to 8 bits on write.
std::string write_ppm(const TensorF& image);
TensorF read_ppm(std::string_view bytes);

// Single-image label map (n == 1) as raw 8-bit gray.
std::string write_pgm(const LabelMap& labels);
LabelMap read_pgm(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace msat

#endif  // MSAT_PNM_HPP
