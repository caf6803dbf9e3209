#include "lrgt/model.hpp"

namespace lrgt {

Model Model::init(const ModelConfig& config) {
    config.validate();
    Model m;
    m.config_ = config;
    Rng rng = Rng::derive(config.train.seed, {0x696e6974ULL});
    m.encoder = EncoderWeights::init(config.encoder, rng);
    m.decoder = DecoderWeights::init(config.decoder(), rng);
    m.encoder.register_params(m.params_);
    m.decoder.register_params(m.params_);
    return m;
}

Tensor Model::param(const std::string& name) const {
    for (const auto& [n, t] : params_) {
        if (n == name) return t;
    }
    throw ContractError("no parameter named '" + name + "'");
}

void Model::prepare_views(int n) const {
    if (config_.encoder.strategy == Strategy::kNone) return;
    if (!assignments_.count(n)) {
        assignments_.emplace(n, config_.encoder.assignment_for(n, config_.train.seed));
    }
}

Tensor Model::forward(const Tensor& images) const {
    const GroupAssignment* assignment = nullptr;
    if (config_.encoder.strategy != Strategy::kNone) {
        prepare_views(static_cast<int>(images.dim(0)));
        assignment = &assignments_.at(static_cast<int>(images.dim(0)));
    }
    Tensor seed = encode(images, encoder, assignment);
    return decode(seed, decoder);
}

Tensor images_from_views(const std::vector<RenderedView>& views, int in_channels) {
    if (views.empty()) throw ContractError("need at least one view");
    const int s = views[0].size;
    const std::int64_t n = static_cast<std::int64_t>(views.size());
    DVec data(static_cast<std::size_t>(n * in_channels * s * s));
    for (std::int64_t v = 0; v < n; ++v) {
        const auto& view = views[static_cast<std::size_t>(v)];
        if (view.size != s) throw ShapeError("views have mismatched sizes");
        for (int c = 0; c < in_channels; ++c) {
            for (std::size_t i = 0; i < view.pixels.size(); ++i) {
                data[static_cast<std::size_t>((v * in_channels + c) * s * s) + i] =
                    static_cast<double>(view.pixels[i]);
            }
        }
    }
    return Tensor::from_data({n, in_channels, s, s}, std::move(data));
}

VoxelGrid binarize(const Tensor& probs, double threshold) {
    const std::int64_t r = probs.dim(0);
    VoxelGrid g = VoxelGrid::empty(static_cast<int>(r));
    const auto& pv = probs.values();
    for (std::size_t i = 0; i < pv.size(); ++i) g.occupancy[i] = pv[i] > threshold ? 1 : 0;
    return g;
}

}  // namespace lrgt
