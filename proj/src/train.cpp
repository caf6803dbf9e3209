#include "lrgt/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "lrgt/checkpoint.hpp"
#include "lrgt/rng.hpp"
#include "lrgt/synth.hpp"

#include <json.hpp>

namespace lrgt {

AdamW::AdamW(NamedParams params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    for (const auto& [name, t] : params_) {
        m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi].second;
        DVec& theta = p.raw();
        DVec& m = m_[pi];
        DVec& v = v_[pi];
        const bool has_grad = p.has_grad();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double g = has_grad ? p.grad()[i] : 0.0;
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * theta[i]);
        }
    }
}

void AdamW::zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
}

namespace {

struct Sample {
    std::uint64_t id = 0;
    VoxelGrid gt;
    std::vector<RenderedView> views;  // all stored views, indexed by direction
};

std::vector<Sample> load_corpus(const std::filesystem::path& dir) {
    std::vector<Sample> samples;
    for (const CorpusEntry& e : read_manifest(dir)) {
        Sample s;
        s.id = e.id;
        const auto sdir = shape_dir(dir, e.id);
        s.gt = read_voxels(sdir / "voxels.bin");
        for (int v = 0; v < 20; ++v) {
            char name[16];
            std::snprintf(name, sizeof(name), "view_%02d.img", v);
            const auto path = sdir / name;
            if (!std::filesystem::exists(path)) break;
            s.views.push_back(read_view(path));
        }
        if (s.views.empty()) {
            throw IoError("shape " + std::to_string(e.id) + " has no views");
        }
        samples.push_back(std::move(s));
    }
    if (samples.empty()) throw IoError("corpus at " + dir.string() + " is empty");
    return samples;
}

std::vector<int> pick_view_ids(std::uint64_t seed, int epoch, std::uint64_t sample_id, int want,
                               int available) {
    std::vector<std::int64_t> ids(static_cast<std::size_t>(available));
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng = Rng::derive(seed, {0x76696577ULL, static_cast<std::uint64_t>(epoch), sample_id});
    rng.shuffle(ids);
    std::vector<int> out;
    for (int i = 0; i < want && i < available; ++i) out.push_back(static_cast<int>(ids[static_cast<std::size_t>(i)]));
    return out;
}

}  // namespace

TrainResult train(Model& model, const std::filesystem::path& corpus_dir,
                  const std::filesystem::path& out_dir,
                  const std::filesystem::path* resume_from, const EpochCallback& on_epoch) {
    const ModelConfig& cfg = model.config();
    const TrainConfig& tc = cfg.train;
    std::filesystem::create_directories(out_dir);

    std::vector<Sample> samples = load_corpus(corpus_dir);
    AdamW opt(model.params(), tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);

    std::uint64_t step = 0;
    int start_epoch = 0;
    if (resume_from) {
        const CheckpointMeta meta = load_checkpoint(*resume_from, model, &opt);
        step = meta.step;
        start_epoch = meta.epoch + 1;
    }

    std::ofstream log(out_dir / "metrics.jsonl", std::ios::app);
    if (!log) throw IoError("cannot open metric log in " + out_dir.string());

    TrainResult result;
    for (int epoch = start_epoch; epoch < tc.epochs; ++epoch) {
        std::vector<std::int64_t> order(samples.size());
        std::iota(order.begin(), order.end(), 0);
        Rng order_rng = Rng::derive(tc.seed, {0x6f726465ULL, static_cast<std::uint64_t>(epoch)});
        order_rng.shuffle(order);

        const double lr = tc.lr_at_epoch(epoch);
        double loss_sum = 0.0;
        double iou_sum = 0.0;
        std::size_t batches = 0, scored = 0;

        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(tc.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(tc.batch_size));
            try {
                Tape tape;
                Tensor batch_loss;
                for (std::size_t bi = begin; bi < end; ++bi) {
                    const Sample& s = samples[static_cast<std::size_t>(order[bi])];
                    const std::vector<int> view_ids =
                        pick_view_ids(tc.seed, epoch, s.id, tc.views_per_sample,
                                      static_cast<int>(s.views.size()));
                    std::vector<RenderedView> chosen;
                    for (int vid : view_ids) chosen.push_back(s.views[static_cast<std::size_t>(vid)]);
                    Tensor images = images_from_views(chosen, cfg.encoder.in_channels);
                    Tensor probs = model.forward(images);
                    Tensor loss = dice_loss(probs, s.gt);
                    batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
                    iou_sum += iou(probs, s.gt, tc.threshold);
                    ++scored;
                }
                Tensor loss = scale(batch_loss, 1.0 / static_cast<double>(end - begin));
                loss_sum += loss.item();
                ++batches;
                tape.backward(loss);
                opt.step(lr);
                opt.zero_grads();
                ++step;
            } catch (const NumericError& e) {
                throw Error("training aborted at step " + std::to_string(step + 1) + ": " +
                            e.what());
            }
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.step = step;
        stats.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        stats.train_iou = scored ? iou_sum / static_cast<double>(scored) : 0.0;
        stats.lr = lr;
        result.history.push_back(stats);

        nlohmann::json j{{"epoch", stats.epoch},
                         {"step", stats.step},
                         {"loss", stats.loss},
                         {"train_iou", stats.train_iou},
                         {"lr", stats.lr}};
        log << j.dump() << '\n';
        log.flush();

        const bool keep_going = !on_epoch || on_epoch(stats);
        if (tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof(name), "checkpoint_epoch%04d.ckpt", epoch);
            save_checkpoint(out_dir / name, model, &opt, step, epoch);
        }
        if (!keep_going || epoch + 1 == tc.epochs) {
            save_checkpoint(out_dir / "checkpoint_final.ckpt", model, &opt, step, epoch);
            break;
        }
    }
    if (tc.epochs == 0) {
        save_checkpoint(out_dir / "checkpoint_final.ckpt", model, &opt, step, -1);
    }
    result.final_step = step;
    return result;
}

}  // namespace lrgt
