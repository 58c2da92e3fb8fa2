#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctrack/model.hpp"
#include "ctrack/training.hpp"

namespace ctrack {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kNotFound, kCorruptManifest, kTruncatedBlob, kVersionMismatch, kMissingTensor };
  CheckpointError(Kind kind, const std::string& detail);
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

enum class DType { kF32, kF64 };

struct StoredTensor {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<unsigned char> bytes;  // little-endian
};

/// Manifest text followed by one little-endian blob:
///
///   ctrack-checkpoint
///   version 1
///   regime <name>
///   config <key>=<value>        (one line per config key)
///   tensor <name> <f32|f64> <d0,d1,..> <offset> <length>
///   blob <bytes>
///   <raw bytes>
struct Checkpoint {
  int version = kCheckpointVersion;
  Regime regime = Regime::kTeacher;
  RunConfig config;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
  bool has_model(const std::string& prefix) const;
};

/// Appends every parameter of `model` as "<prefix>.<name>".
template <typename T>
void add_model(Checkpoint& ckpt, const std::string& prefix, const TrackerModel<T>& model);

/// Rebuilds a model with the given architecture from "<prefix>.*" tensors.
template <typename T>
TrackerModel<T> extract_model(const Checkpoint& ckpt, const std::string& prefix,
                              const TrackerConfig& config);

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& file);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ctrack
