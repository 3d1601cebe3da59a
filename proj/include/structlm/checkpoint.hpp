#pragma once

// Checkpoint container:
//
//   structlm-ckpt-v1\n
//   <one-line JSON header: config, seed, step, optimizer step, manifest>\n
//   <little-endian float64 payload: parameters in declaration order, then,
//    when present, first moments and second moments in the same order>

#include <cstddef>
#include <map>
#include <optional>
#include <string>

#include "structlm/model.hpp"
#include "structlm/optim.hpp"

namespace structlm {

inline constexpr const char* kCheckpointMagic = "structlm-ckpt-v1";

struct Checkpoint {
  Model model;
  std::size_t step = 0;
  std::optional<AdamState> optimizer;
  // Free-form string settings stored alongside (training configuration).
  std::map<std::string, std::string> extra;
};

void save_checkpoint(const std::string& path, const Model& model, std::size_t step, const AdamState* optimizer,
                     const std::map<std::string, std::string>& extra = {});

// Throws DataError on a wrong header, a manifest that disagrees with the
// stored config, or a truncated payload.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace structlm
