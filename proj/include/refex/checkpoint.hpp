#pragma once

#include <string>

#include "refex/model.hpp"

namespace refex {

// Binary checkpoint layout:
//   magic "RFXCKPT1"
//   u32 little-endian header length
//   UTF-8 JSON header {"version":1,"variant":...,"layers":L,"heads":H,
//     "d_model":D,"tensors":[{"name":...,"shape":[r,c],"offset":bytes}]}
//   contiguous little-endian f32 payload, tensors in header order,
//   each tensor row-major.
inline constexpr char kCheckpointMagic[8] = {'R', 'F', 'X', 'C', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointVersion = 1;

class checkpoint_error : public data_error {
 public:
  enum class Kind { bad_magic, version_mismatch, header_parse, shape_offset, truncated, io };
  checkpoint_error(Kind kind, const std::string& what) : data_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

void save_checkpoint(const ModelWeights<float>& weights, const std::string& path);

// Round-trips bit-for-bit on tensor payloads. scale_scores is not part of the
// on-disk format; the loaded config has it off.
ModelWeights<float> load_checkpoint(const std::string& path);

}  // namespace refex
