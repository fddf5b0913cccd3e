#ifndef MSAT_CHECKPOINT_HPP
#define MSAT_CHECKPOINT_HPP

#include "msat/autodiff.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace msat {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Little-endian layout:
//   "MSAT" | u32 version (1) | u32 tensor count |
//   per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 data
// Tensors are stored in name order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const ParamMap<float>& tensors);
ParamMap<float> decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const ParamMap<float>& tensors);
ParamMap<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace msat

#endif  // MSAT_CHECKPOINT_HPP
