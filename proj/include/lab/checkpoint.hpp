#pragma once

#include <string>

#include "lab/model.hpp"

namespace lab {

// Binary checkpoint file: magic, little-endian u64 header length, JSON header
// (format version, config, config hash, vocabulary reference+hash, step,
// strategy, parent hash, array directory), then the named float32 payloads in
// directory order. The vocabulary itself is a text sidecar at
// "<path>.vocab". load(save(c)) is bit-identical.
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// FNV-1a over the payload bytes; used as parent_hash links between
// checkpoints of a run.
std::string checkpoint_content_hash(const Checkpoint& c);

}  // namespace lab
