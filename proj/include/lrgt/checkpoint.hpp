#pragma once

#include <filesystem>
#include <string>

#include "lrgt/model.hpp"
#include "lrgt/train.hpp"

namespace lrgt {

struct CheckpointMeta {
    std::uint64_t architecture_digest = 0;
    std::uint64_t step = 0;
    int epoch = -1;
    std::string config_text;
};

// Versioned little-endian binary: header, embedded canonical config text,
// name-prefixed weight records, then optional optimizer moments in the same
// order. save -> load -> save is byte-identical.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const AdamW* optimizer,
                     std::uint64_t step, int epoch);

CheckpointMeta peek_checkpoint(const std::filesystem::path& path);

// Loads weights (and moments when optimizer != nullptr) into a model of the
// same architecture. A digest mismatch is a hard error.
CheckpointMeta load_checkpoint(const std::filesystem::path& path, Model& model,
                               AdamW* optimizer);

// Builds the model from the checkpoint's embedded config, then loads it.
Model model_from_checkpoint(const std::filesystem::path& path);

}  // namespace lrgt
