#include "lrgt/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <sstream>
#include <thread>

#include "lrgt/rng.hpp"
#include "lrgt/synth.hpp"

#include <json.hpp>

namespace lrgt {

namespace {

constexpr double kFScoreDistance = 0.01;  // 1% of the normalized extent
constexpr int kSurfaceSamples = 8192;

struct EvalObject {
    std::uint64_t id = 0;
    VoxelGrid gt;
    std::vector<RenderedView> views;
};

}  // namespace

EvalReport evaluate(const Predictor& predict, int in_channels, double threshold,
                    const std::filesystem::path& corpus, const std::vector<int>& view_counts,
                    int threads) {
    if (view_counts.empty()) throw ContractError("evaluate needs at least one view count");
    const int max_views = *std::max_element(view_counts.begin(), view_counts.end());

    std::vector<EvalObject> objects;
    int skipped = 0;
    for (const CorpusEntry& e : read_manifest(corpus)) {
        EvalObject obj;
        obj.id = e.id;
        const auto sdir = shape_dir(corpus, e.id);
        obj.gt = read_voxels(sdir / "voxels.bin");
        for (int v = 0; v < 20; ++v) {
            char name[16];
            std::snprintf(name, sizeof(name), "view_%02d.img", v);
            if (!std::filesystem::exists(sdir / name)) break;
            obj.views.push_back(read_view(sdir / name));
        }
        if (static_cast<int>(obj.views.size()) < max_views) {
            std::cerr << "warning: shape " << e.id << " has " << obj.views.size()
                      << " views, need " << max_views << "; skipped\n";
            ++skipped;
            continue;
        }
        objects.push_back(std::move(obj));
    }
    if (objects.empty()) throw IoError("no evaluable objects in " + corpus.string());

    std::vector<std::vector<EvalRecord>> per_object(objects.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t oi = next.fetch_add(1); oi < objects.size(); oi = next.fetch_add(1)) {
            const EvalObject& obj = objects[oi];
            SurfaceMesh gt_mesh = marching_cubes(obj.gt, 0.5);
            PointCloud gt_cloud;
            if (!gt_mesh.empty()) {
                gt_cloud = sample_surface(gt_mesh, kSurfaceSamples,
                                          Rng::derive(obj.id, {0x6774ULL}).next_u64());
            }
            for (int k : view_counts) {
                std::vector<RenderedView> chosen(obj.views.begin(), obj.views.begin() + k);
                Tensor probs = predict(images_from_views(chosen, in_channels));
                EvalRecord rec;
                rec.object_id = obj.id;
                rec.n_views = k;
                rec.iou_score = iou(probs, obj.gt, threshold);
                SurfaceMesh pred_mesh = marching_cubes(probs, threshold);
                if (!pred_mesh.empty() && !gt_mesh.empty()) {
                    PointCloud pred_cloud = sample_surface(
                        pred_mesh, kSurfaceSamples,
                        Rng::derive(obj.id, {0x7072ULL, static_cast<std::uint64_t>(k)}).next_u64());
                    const FScore s = f_score(pred_cloud, gt_cloud, kFScoreDistance);
                    rec.precision = s.precision;
                    rec.recall = s.recall;
                    rec.f = s.f;
                }  // an empty surface on either side scores zero
                per_object[oi].push_back(rec);
            }
        }
    };
    const int worker_count = std::max(1, std::min<int>(threads, static_cast<int>(objects.size())));
    if (worker_count == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < worker_count; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    EvalReport report;
    report.view_counts = view_counts;
    report.objects = static_cast<int>(objects.size());
    report.skipped = skipped;
    for (const auto& group : per_object) {
        report.records.insert(report.records.end(), group.begin(), group.end());
    }
    for (int k : view_counts) {
        double iou_sum = 0.0, f_sum = 0.0;
        int n = 0;
        for (const auto& r : report.records) {
            if (r.n_views != k) continue;
            iou_sum += r.iou_score;
            f_sum += r.f;
            ++n;
        }
        report.mean_iou[k] = n ? iou_sum / n : 0.0;
        report.mean_f[k] = n ? f_sum / n : 0.0;
    }
    std::vector<int> sorted_counts = view_counts;
    std::sort(sorted_counts.begin(), sorted_counts.end());
    double best = -1.0;
    for (int k : sorted_counts) {
        const double m = report.mean_iou[k];
        if (best >= 0.0 && m < best - 0.005) report.flagged_view_counts.push_back(k);
        best = std::max(best, m);
    }
    return report;
}

EvalReport evaluate_model(const Model& model, const std::filesystem::path& corpus,
                          const std::vector<int>& view_counts, int threads) {
    for (int k : view_counts) model.prepare_views(k);  // warm before worker threads share it
    const double threshold = model.config().train.threshold;
    const int channels = model.config().encoder.in_channels;
    return evaluate([&model](const Tensor& images) { return model.forward(images); }, channels,
                    threshold, corpus, view_counts, threads);
}

std::string EvalReport::table() const {
    std::ostringstream os;
    os << "views |  mean IoU | mean F@1%\n";
    os << "------+-----------+----------\n";
    for (int k : view_counts) {
        char line[80];
        std::snprintf(line, sizeof(line), "%5d | %9.4f | %9.4f%s\n", k, mean_iou.at(k),
                      mean_f.at(k),
                      std::count(flagged_view_counts.begin(), flagged_view_counts.end(), k)
                          ? "  [IoU drop]"
                          : "");
        os << line;
    }
    os << "objects: " << objects << ", skipped: " << skipped << "\n";
    return os.str();
}

std::string EvalReport::jsonl() const {
    std::ostringstream os;
    for (const auto& r : records) {
        nlohmann::json j{{"object", r.object_id}, {"n_views", r.n_views},
                         {"iou", r.iou_score},   {"precision", r.precision},
                         {"recall", r.recall},   {"f", r.f}};
        os << j.dump() << '\n';
    }
    return os.str();
}

// ---- complexity ------------------------------------------------------------------

std::vector<ComplexityRow> complexity_report(const ModelConfig& config,
                                             const std::vector<int>& view_counts) {
    const EncoderConfig& enc = config.encoder;
    std::vector<ComplexityRow> rows;
    for (int n : view_counts) {
        const TokenGrid grid = enc.grid_for(n);
        const std::uint64_t p = static_cast<std::uint64_t>(grid.tokens());
        const std::uint64_t d = static_cast<std::uint64_t>(enc.d_model);
        // per-view self-attention cost of one standard block, over all views
        const std::uint64_t std_layer = 2 * static_cast<std::uint64_t>(n) * p * p * d;
        const std::uint64_t merger =
            2 * static_cast<std::uint64_t>(enc.merged_tokens) * n * p * d;
        const AttentionCost fra = attention_flops(grid, build_fra(grid), enc.d_model, enc.heads);
        for (Strategy s :
             {Strategy::kFra, Strategy::kTga, Strategy::kSga, Strategy::kLga, Strategy::kRandom}) {
            GroupAssignment a = build_assignment(grid, s, enc.groups, 0);
            const AttentionCost cost = attention_flops(grid, a, enc.d_model, enc.heads);
            ComplexityRow row;
            row.strategy = strategy_name(s);
            row.views = n;
            row.grouped_layer_flops = cost.total;
            row.fra_layer_flops = fra.total;
            row.ratio = cost.ratio_vs_fra;
            row.encoder_attention_flops =
                static_cast<std::uint64_t>(enc.n1 + enc.n2) * std_layer +
                static_cast<std::uint64_t>(enc.n2) * cost.total + merger;
            rows.push_back(row);
        }
    }
    return rows;
}

std::string complexity_table(const std::vector<ComplexityRow>& rows) {
    std::ostringstream os;
    os << "views | strategy | layer MACs    | vs FRA        | saved  | encoder attention MACs\n";
    os << "------+----------+---------------+---------------+--------+-----------------------\n";
    for (const auto& r : rows) {
        char line[160];
        std::snprintf(line, sizeof(line), "%5d | %-8s | %13llu | %13.6g | %5.1f%% | %llu\n",
                      r.views, r.strategy.c_str(),
                      static_cast<unsigned long long>(r.grouped_layer_flops), r.ratio,
                      100.0 * (1.0 - r.ratio),
                      static_cast<unsigned long long>(r.encoder_attention_flops));
        os << line;
    }
    return os.str();
}

// ---- gradcheck -------------------------------------------------------------------

namespace {

double fd_rel_err(double analytic, double numeric) {
    const double m = std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
    return std::fabs(analytic - numeric) / m;
}

}  // namespace

GradCheckReport gradcheck_loss(const NamedParams& params, const std::function<Tensor()>& loss_fn,
                               std::uint64_t seed, int coords_per_tensor, double tolerance,
                               double step) {
    for (const auto& [name, p] : params) const_cast<Tensor&>(p).zero_grad();
    {
        Tape tape;
        tape.backward(loss_fn());
    }
    GradCheckReport report;
    report.tolerance = tolerance;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const std::string& name = params[pi].first;
        Tensor p = params[pi].second;
        Rng rng = Rng::derive(seed, {0x67636bULL, static_cast<std::uint64_t>(pi)});
        GradCheckEntry entry;
        entry.name = name;
        for (int c = 0; c < coords_per_tensor; ++c) {
            const std::size_t ci =
                static_cast<std::size_t>(rng.uniform_below(static_cast<std::uint64_t>(p.numel())));
            const double analytic = p.has_grad() ? p.grad()[ci] : 0.0;
            double& coord = p.raw()[ci];
            const double orig = coord;
            coord = orig + step;
            const double fp = loss_fn().item();
            coord = orig - step;
            const double fm = loss_fn().item();
            coord = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            entry.max_rel_err = std::max(entry.max_rel_err, fd_rel_err(analytic, numeric));
        }
        if (entry.max_rel_err > report.worst) {
            report.worst = entry.max_rel_err;
            report.worst_name = name;
        }
        report.entries.push_back(std::move(entry));
    }
    report.pass = report.worst <= tolerance;
    return report;
}

GradCheckReport gradcheck(const ModelConfig& config, std::uint64_t seed, int coords_per_tensor,
                          double tolerance, double step) {
    ModelConfig cfg = config;
    cfg.train.seed = seed;
    Model model = Model::init(cfg);

    SynthShape shape = generate_shape(seed);
    std::vector<RenderedView> views;
    for (int v = 0; v < 2; ++v) {
        views.push_back(render_view(shape.voxels, v, cfg.encoder.image_size));
    }
    Tensor images = images_from_views(views, cfg.encoder.in_channels);
    model.prepare_views(2);
    auto loss_fn = [&]() { return dice_loss(model.forward(images), shape.voxels); };
    return gradcheck_loss(model.params(), loss_fn, seed, coords_per_tensor, tolerance, step);
}

std::string GradCheckReport::table() const {
    std::ostringstream os;
    for (const auto& e : entries) {
        char line[160];
        std::snprintf(line, sizeof(line), "%-36s max rel err %.3e%s\n", e.name.c_str(),
                      e.max_rel_err, e.max_rel_err > tolerance ? "  FAIL" : "");
        os << line;
    }
    char tail[160];
    std::snprintf(tail, sizeof(tail), "worst: %.3e (%s), tolerance %.0e -> %s\n", worst,
                  worst_name.c_str(), tolerance, pass ? "pass" : "FAIL");
    os << tail;
    return os.str();
}

}  // namespace lrgt
