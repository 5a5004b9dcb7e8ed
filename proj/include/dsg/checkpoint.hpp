#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsg/model.hpp"

namespace dsg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary layout, all integers u32 little-endian:
///   "DSG1" | version | tensor count |
///   per tensor: name length | UTF-8 name | rank | dims[rank] | f32 LE values (row-major)
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::map<std::string, Tensor>;

/// Tensors are written in name order.
std::string encode_tensors(const NamedTensors& tensors);
NamedTensors decode_tensors(const std::string& bytes, const std::string& origin = "<memory>");

/// Model parameters, `dbn.<layer>.mean/.var/.count` statistics (leading domain
/// axis), `config.*` architecture values and any extra tensors (e.g. a
/// training-config echo under `train.*`).
NamedTensors model_to_tensors(const Model<float>& model);
Model<float> model_from_tensors(const NamedTensors& tensors);

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                     const NamedTensors& extra = {});

struct LoadedCheckpoint {
  Model<float> model;
  NamedTensors tensors;  // everything in the file, including extras
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dsg
