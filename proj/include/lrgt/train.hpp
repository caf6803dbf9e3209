#pragma once

#include <filesystem>
#include <functional>

#include "lrgt/model.hpp"

namespace lrgt {

// Adam with decoupled weight decay, updating parameters in place.
class AdamW {
public:
    AdamW(NamedParams params, double beta1, double beta2, double eps, double weight_decay);

    void step(double lr);
    void zero_grads();
    std::uint64_t steps_taken() const { return t_; }

    const NamedParams& params() const { return params_; }
    std::vector<DVec>& first_moments() { return m_; }
    std::vector<DVec>& second_moments() { return v_; }
    void set_steps_taken(std::uint64_t t) { t_ = t; }

private:
    NamedParams params_;
    std::vector<DVec> m_, v_;
    std::uint64_t t_ = 0;
    double beta1_, beta2_, eps_, wd_;
};

struct EpochStats {
    int epoch = 0;
    std::uint64_t step = 0;  // optimizer steps taken so far
    double loss = 0.0;       // mean dice loss over the epoch
    double train_iou = 0.0;  // mean IoU of the epoch's own batch predictions
    double lr = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    std::uint64_t final_step = 0;
};

// Returns false to stop training early (the epoch's checkpoint still lands).
using EpochCallback = std::function<bool(const EpochStats&)>;

// Deterministic given (config, corpus): batch order and view subsets are
// derived from (seed, epoch, sample), so resuming from a checkpoint replays
// the exact remaining schedule. A non-finite loss aborts with the step and
// the op that produced it.
TrainResult train(Model& model, const std::filesystem::path& corpus_dir,
                  const std::filesystem::path& out_dir,
                  const std::filesystem::path* resume_from = nullptr,
                  const EpochCallback& on_epoch = nullptr);

}  // namespace lrgt
