#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lrgt/decoder.hpp"
#include "lrgt/encoder.hpp"

namespace lrgt {

struct TrainConfig {
    std::uint64_t seed = 1;
    int views_per_sample = 3;
    int batch_size = 4;
    int epochs = 30;
    double lr = 1e-3;
    int lr_decay_epoch1 = 16;  // epochs/110 scaling of the reference 60/90 knots
    int lr_decay_epoch2 = 25;
    double lr_decay = 0.1;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double threshold = 0.5;
    int checkpoint_every = 0;  // epochs; 0 = final checkpoint only

    double lr_at_epoch(int epoch) const;
};

// Full architectural + training configuration. Serializes to a flat
// key=value text file; unknown keys are rejected.
struct ModelConfig {
    EncoderConfig encoder;
    std::vector<int> decoder_widths{32, 16, 8, 2};
    int decoder_heads = 2;
    int decoder_mlp_ratio = 2;
    int token_budget = 512;
    TrainConfig train;

    DecoderConfig decoder() const;
    void validate() const;

    static ModelConfig desk();
    static ModelConfig reference();

    static ModelConfig from_text(const std::string& text);
    static ModelConfig from_file(const std::filesystem::path& path);
    void apply_override(const std::string& key, const std::string& value);
    std::string to_text() const;  // canonical: all keys, sorted

    // Digest over architecture keys only; training hyperparameters may differ
    // between a checkpoint and the runtime without invalidating the weights.
    std::uint64_t architecture_digest() const;
};

}  // namespace lrgt
