#pragma once

#include <string>

#include "tcil/model.hpp"

namespace tcil {

// Checkpoint container: "TCILCKPT1\n" magic, a little-endian uint64 with the
// manifest length, the JSON manifest (arch, step metadata, re-scoring state,
// kept-index manifests, named array index), then the raw float64 payload.
void save_checkpoint(const DeaModel& model, const std::string& path);
DeaModel load_checkpoint(const std::string& path);

}  // namespace tcil
