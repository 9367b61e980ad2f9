#pragma once

#include <cmath>
#include <ostream>
#include <vector>

#include "holoseg/losses.hpp"
#include "holoseg/model.hpp"
#include "holoseg/scene.hpp"

namespace holoseg {

struct TrainSchedule {
    int epochs = 40;
    double learning_rate = 1e-3;
    double lr_decay = 0.98;  // multiplied in at each epoch
    int batch_size = 8;
    uint64_t seed = 0;
    double pixel_fraction = 1.0;  // per-epoch pixel subsample for the losses
    double sigma_g = 4.0;         // ground-truth center kernel width
    double divergence_limit = 1e6;

    void validate() const {
        if (epochs < 0) throw ConfigError("schedule: epochs must be >= 0");
        if (!(learning_rate > 0)) throw ConfigError("schedule: learning_rate must be > 0");
        if (!(lr_decay > 0) || lr_decay > 1) throw ConfigError("schedule: lr_decay in (0,1]");
        if (batch_size < 1) throw ConfigError("schedule: batch_size must be >= 1");
        if (!(pixel_fraction > 0) || pixel_fraction > 1)
            throw ConfigError("schedule: pixel_fraction in (0,1]");
        if (!(sigma_g > 0)) throw ConfigError("schedule: sigma_g must be > 0");
    }
};

struct EpochTrace {
    int epoch = 0;
    LossReport report;
    double lr = 0;

    ordered_json to_json() const {
        return ordered_json{{"epoch", epoch},   {"L_s", report.L_s},   {"L_o", report.L_o},
                            {"L_p", report.L_p}, {"L_va", report.L_va}, {"L_di", report.L_di},
                            {"L_re", report.L_re}, {"L_kl", report.L_kl},
                            {"total", report.total}, {"lr", lr}};
    }
};

template <typename S>
struct TrainResult {
    ModelParamsT<S> params;
    std::vector<EpochTrace> trace;
    bool aborted = false;
    int completed_epochs = 0;
};

namespace detail {

/// Adam with double-precision moments; the update itself is computed in
/// double and cast back, so float training stays deterministic.
struct AdamState {
    std::vector<double> m, v;
    long step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit AdamState(size_t n) : m(n, 0.0), v(n, 0.0) {}

    template <typename S>
    void update(std::vector<S>& theta, const std::vector<S>& grad, double lr) {
        ++step;
        const double c1 = 1.0 - std::pow(beta1, step);
        const double c2 = 1.0 - std::pow(beta2, step);
        for (size_t i = 0; i < theta.size(); ++i) {
            double g = static_cast<double>(grad[i]);
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
            theta[i] = static_cast<S>(static_cast<double>(theta[i]) - update);
        }
    }
};

}  // namespace detail

/// Adam training over the train split: lr decays multiplicatively per epoch,
/// image order reshuffles per epoch, pixel subsets resample per (epoch, image).
/// Divergence (non-finite or loss above the limit) aborts and returns the last
/// completed epoch's parameters.
template <typename S>
TrainResult<S> train(ModelParamsT<S> params, const std::vector<Sample>& train_split,
                     const LossWeights& weights, const TrainSchedule& schedule,
                     std::ostream* trace_stream = nullptr) {
    weights.validate();
    schedule.validate();
    if (train_split.empty()) throw ConfigError("train: dataset split is empty");
    for (const auto& s : train_split)
        for (uint8_t y : s.semantic_map.data)
            if (y != kIgnoreLabel && y >= params.K)
                throw ConfigError("train: unknown class id in the train split");

    const int n = static_cast<int>(train_split.size());
    std::vector<Grid<double>> heatmaps(n);
    parallel_for(static_cast<size_t>(n), [&](size_t i) {
        heatmaps[i] = make_center_heatmap(train_split[i], schedule.sigma_g);
    });

    TrainResult<S> result;
    result.params = std::move(params);
    std::vector<S> theta = result.params.flatten();
    detail::AdamState adam(theta.size());
    ModelParamsT<S> last_good = result.params;

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;

    for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
        const double lr = schedule.learning_rate * std::pow(schedule.lr_decay, epoch);
        Rng shuffle_rng(derive_seed(schedule.seed, 0x5a5a0000ULL + epoch));
        shuffle_rng.shuffle(order);

        LossReport epoch_mean;
        int n_batches = 0;
        bool diverged = false;

        for (int start = 0; start < n && !diverged; start += schedule.batch_size) {
            const int end = std::min(n, start + schedule.batch_size);
            std::vector<BatchItem> batch;
            for (int i = start; i < end; ++i) {
                int idx = order[i];
                uint64_t pix_seed =
                    derive_seed(schedule.seed, (static_cast<uint64_t>(epoch) << 24) ^
                                                   static_cast<uint64_t>(idx) ^ 0x9e1ceULL);
                batch.push_back(make_batch_item(train_split[idx], heatmaps[idx],
                                                schedule.pixel_fraction, pix_seed));
            }
            BatchEval<S> eval;
            try {
                eval = evaluate_batch(result.params, batch, weights, true);
            } catch (const NumericError&) {
                diverged = true;
                break;
            }
            if (!std::isfinite(eval.report.total) ||
                eval.report.total > schedule.divergence_limit) {
                diverged = true;
                break;
            }
            std::vector<S> grad = eval.grad->flatten();
            adam.update(theta, grad, lr);
            result.params.unflatten(theta);

            epoch_mean.L_s += eval.report.L_s;
            epoch_mean.L_o += eval.report.L_o;
            epoch_mean.L_p += eval.report.L_p;
            epoch_mean.L_va += eval.report.L_va;
            epoch_mean.L_di += eval.report.L_di;
            epoch_mean.L_re += eval.report.L_re;
            epoch_mean.L_kl += eval.report.L_kl;
            epoch_mean.L_d += eval.report.L_d;
            epoch_mean.total += eval.report.total;
            ++n_batches;
        }

        if (diverged) {
            result.params = last_good;
            result.aborted = true;
            break;
        }
        for (double* f : {&epoch_mean.L_s, &epoch_mean.L_o, &epoch_mean.L_p, &epoch_mean.L_va,
                          &epoch_mean.L_di, &epoch_mean.L_re, &epoch_mean.L_kl, &epoch_mean.L_d,
                          &epoch_mean.total})
            *f /= std::max(1, n_batches);

        EpochTrace trace{epoch, epoch_mean, lr};
        result.trace.push_back(trace);
        if (trace_stream) *trace_stream << trace.to_json().dump() << '\n';
        last_good = result.params;
        result.completed_epochs = epoch + 1;
    }
    return result;
}

}  // namespace holoseg
