#pragma once

#include <map>

#include "lrgt/config.hpp"
#include "lrgt/decoder.hpp"
#include "lrgt/encoder.hpp"
#include "lrgt/metrics.hpp"
#include "lrgt/synth.hpp"

namespace lrgt {

// Encoder + decoder with a stable parameter registry. Forward passes are pure
// given the weights; the per-view-count assignment cache must be warmed via
// prepare_views before sharing one model across threads.
class Model {
public:
    static Model init(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    NamedParams& params() { return params_; }
    const NamedParams& params() const { return params_; }
    Tensor param(const std::string& name) const;

    // images: [N, in_channels, S, S] -> occupancy probabilities [32, 32, 32]
    Tensor forward(const Tensor& images) const;
    void prepare_views(int n) const;

    EncoderWeights encoder;
    DecoderWeights decoder;

private:
    ModelConfig config_;
    NamedParams params_;
    mutable std::map<int, GroupAssignment> assignments_;
};

// Stacks rendered views into the model's image tensor layout.
Tensor images_from_views(const std::vector<RenderedView>& views, int in_channels);

VoxelGrid binarize(const Tensor& probs, double threshold);

}  // namespace lrgt
