#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lrgt/checkpoint.hpp"
#include "lrgt/model.hpp"

namespace lrgt {

struct EvalRecord {
    std::uint64_t object_id = 0;
    int n_views = 0;
    double iou_score = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;
};

struct EvalReport {
    std::vector<int> view_counts;
    std::vector<EvalRecord> records;  // sorted by (object id, view count)
    std::map<int, double> mean_iou;
    std::map<int, double> mean_f;
    // view counts whose mean IoU drops more than half a point below the best
    // mean over smaller counts (saturation diagnostic)
    std::vector<int> flagged_view_counts;
    int objects = 0;
    int skipped = 0;

    std::string table() const;
    std::string jsonl() const;
};

using Predictor = std::function<Tensor(const Tensor& images)>;

// Runs the predictor over every corpus object at each view count (the first k
// stored views, by direction index), measuring IoU at `threshold` and
// F-score@1% on 8192 marching-cubes surface samples per side. Objects with too
// few stored views are skipped with a warning. Parallel across objects with
// deterministic aggregation.
EvalReport evaluate(const Predictor& predict, int in_channels, double threshold,
                    const std::filesystem::path& corpus, const std::vector<int>& view_counts,
                    int threads = 1);

EvalReport evaluate_model(const Model& model, const std::filesystem::path& corpus,
                          const std::vector<int>& view_counts, int threads = 1);

// ---- analytic attention complexity -------------------------------------------

struct ComplexityRow {
    std::string strategy;
    int views = 0;
    std::uint64_t grouped_layer_flops = 0;  // one inter-view attention layer
    std::uint64_t fra_layer_flops = 0;      // same layer under full-range attention
    double ratio = 1.0;                     // grouped / fra, exactly 1/g for even groups
    std::uint64_t encoder_attention_flops = 0;  // all attention in the encoder
};

std::vector<ComplexityRow> complexity_report(const ModelConfig& config,
                                             const std::vector<int>& view_counts);
std::string complexity_table(const std::vector<ComplexityRow>& rows);

// ---- finite-difference gradient audit -------------------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;  // one per named tensor, registry order
    double worst = 0.0;
    std::string worst_name;
    double tolerance = 1e-4;
    bool pass = false;

    std::string table() const;
};

// Core: compares analytic gradients of loss_fn against central differences at
// coords_per_tensor seeded coordinates of every parameter.
GradCheckReport gradcheck_loss(const NamedParams& params, const std::function<Tensor()>& loss_fn,
                               std::uint64_t seed, int coords_per_tensor, double tolerance,
                               double step);

// Builds the model from the config and audits a full forward + Dice loss on a
// synthetic two-view sample.
GradCheckReport gradcheck(const ModelConfig& config, std::uint64_t seed,
                          int coords_per_tensor = 10, double tolerance = 1e-4,
                          double step = 1e-5);

}  // namespace lrgt
