#pragma once

// Checkpoint file layout (all integers and reals little-endian):
//
//   8 bytes   magic "PATNCKPT"
//   u32       format version
//   u64       header length H
//   H bytes   JSON header: model config, vocabularies, training state metadata,
//             and the name/shape of every stored matrix
//   u64       payload length P (number of doubles)
//   P × f64   parameters in registration order, then Adam m and v
//   u64       FNV-1a hash of the payload bytes

#include "parattn/data.hpp"
#include "parattn/model.hpp"
#include "parattn/training.hpp"

#include <filesystem>

namespace parattn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TransformerModel model;
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
  TrainState state;
};

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                     const TrainState& state);

/// Throws FormatError on a missing, truncated, corrupt or version-mismatched file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace parattn
