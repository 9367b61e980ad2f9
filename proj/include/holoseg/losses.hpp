#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "holoseg/core.hpp"
#include "holoseg/model.hpp"
#include "holoseg/prototype.hpp"
#include "holoseg/scene.hpp"
#include "holoseg/special_functions.hpp"

namespace holoseg {

struct LossWeights {
    double lambda1 = 1.0;    // semantic
    double lambda2 = 200.0;  // center
    double lambda3 = 1.0;    // prototype
    double lambda4 = 1.0;    // discriminative
    double lambda41 = 1.0;   // variance term
    double lambda42 = 1.0;   // distance term
    double lambda43 = 0.001; // regularizer term
    double delta_v = 0.5;
    double delta_d = 1.5;
    double lambda_kl = 0.0;  // 0 disables the KL variant
    Activation activation = Activation::Softplus;

    void validate() const {
        for (double w : {lambda1, lambda2, lambda3, lambda4, lambda41, lambda42, lambda43,
                         lambda_kl})
            if (!(w >= 0.0) || !std::isfinite(w))
                throw ConfigError("loss weights must be finite and >= 0");
        if (!(delta_v > 0) || !(delta_d > 0)) throw ConfigError("margins must be > 0");
        if (!(delta_d > delta_v))
            throw ConfigError("delta_d must exceed delta_v to leave attract/repel room");
    }
};

struct LossReport {
    double L_s = 0, L_o = 0, L_p = 0, L_d = 0;
    double L_va = 0, L_di = 0, L_re = 0;
    double L_kl = 0;
    double total = 0;
    std::map<std::string, double> grad_norms;  // filled by the diagnostic path
    bool all_ignored = false;   // every pixel of some image carried the ignore label
    bool empty_group = false;   // a discriminative group had no sampled members
};

// ---------------------------------------------------------------------------
// Standalone loss operations (double precision, used directly by tests and as
// the reference the fused batch evaluator is checked against).
// ---------------------------------------------------------------------------

/// Per-pixel negative expected log likelihood under Dir(alpha):
/// psi(sum alpha) - psi(alpha_y), averaged over non-ignored pixels.
inline double semantic_loss(const Field<double>& alpha, const Grid<uint8_t>& gt,
                            bool* all_ignored = nullptr) {
    if (alpha.rows != gt.rows || alpha.cols != gt.cols)
        throw ConfigError("semantic_loss: shape mismatch");
    const int K = alpha.channels;
    std::vector<double> terms;
    terms.reserve(alpha.pixel_count());
    for (size_t i = 0; i < alpha.pixel_count(); ++i) {
        int y = gt.data[i];
        if (y == kIgnoreLabel || y >= K) continue;
        const double* a = alpha.data.data() + i * K;
        double sum = 0;
        for (int k = 0; k < K; ++k) {
            if (!(a[k] >= 1.0)) throw DomainError("semantic_loss: alpha must be >= 1");
            sum += a[k];
        }
        terms.push_back(digamma(sum) - digamma(a[y]));
    }
    if (all_ignored) *all_ignored = terms.empty();
    if (terms.empty()) return 0.0;
    return pairwise_sum(terms.data(), terms.size()) / static_cast<double>(terms.size());
}

/// KL( Dir(alpha~) || Dir(1,...,1) ) with the true-class entry clamped to 1,
/// averaged over non-ignored pixels.
inline double kl_regularizer(const Field<double>& alpha, const Grid<uint8_t>& gt,
                             bool* all_ignored = nullptr) {
    if (alpha.rows != gt.rows || alpha.cols != gt.cols)
        throw ConfigError("kl_regularizer: shape mismatch");
    const int K = alpha.channels;
    std::vector<double> terms;
    for (size_t i = 0; i < alpha.pixel_count(); ++i) {
        int y = gt.data[i];
        if (y == kIgnoreLabel || y >= K) continue;
        const double* a = alpha.data.data() + i * K;
        double sum = 0, lg = 0, corr = 0;
        for (int k = 0; k < K; ++k) {
            double ak = (k == y) ? 1.0 : a[k];
            sum += ak;
            lg += lgamma(ak);
        }
        double psi_sum = digamma(sum);
        for (int k = 0; k < K; ++k) {
            double ak = (k == y) ? 1.0 : a[k];
            corr += (ak - 1.0) * (digamma(ak) - psi_sum);
        }
        terms.push_back(lgamma(sum) - lg - lgamma(static_cast<double>(K)) + corr);
    }
    if (all_ignored) *all_ignored = terms.empty();
    if (terms.empty()) return 0.0;
    return pairwise_sum(terms.data(), terms.size()) / static_cast<double>(terms.size());
}

/// Mean squared error between predicted and ground-truth center heatmaps.
inline double center_loss(const Grid<double>& center_hat, const Grid<double>& center_gt) {
    if (!center_hat.same_shape(center_gt)) throw ConfigError("center_loss: shape mismatch");
    std::vector<double> terms(center_hat.size());
    for (size_t i = 0; i < terms.size(); ++i) {
        double d = center_hat.data[i] - center_gt.data[i];
        terms[i] = d * d;
    }
    return pairwise_sum(terms.data(), terms.size()) / static_cast<double>(terms.size());
}

/// Association scores y_hat = -||phi - mu||^2 / (2 sigma^2), one per prototype.
inline Eigen::VectorXd association_scores(const Eigen::VectorXd& phi,
                                          const std::vector<Prototype>& prototypes) {
    if (prototypes.empty()) throw DomainError("association_scores: empty prototype list");
    Eigen::VectorXd scores(prototypes.size());
    for (size_t i = 0; i < prototypes.size(); ++i) {
        const Prototype& p = prototypes[i];
        if (!(p.var > 0)) throw DomainError("association_scores: sigma^2 must be > 0");
        scores[i] = -(phi - p.mu).squaredNorm() / (2.0 * p.var);
    }
    return scores;
}

/// Cross-entropy on the softmax of the association scores; labels index into
/// the prototype list.
inline double prototype_loss(const Eigen::MatrixXd& embeds,
                             const std::vector<Prototype>& prototypes,
                             const std::vector<int>& labels) {
    if (prototypes.empty()) throw DomainError("prototype_loss: empty prototype set");
    if (static_cast<size_t>(embeds.rows()) != labels.size())
        throw ConfigError("prototype_loss: label count mismatch");
    std::vector<double> terms(labels.size());
    for (Eigen::Index i = 0; i < embeds.rows(); ++i) {
        Eigen::VectorXd s = association_scores(embeds.row(i).transpose(), prototypes);
        double mx = s.maxCoeff();
        double lse = mx + std::log((s.array() - mx).exp().sum());
        terms[i] = lse - s[labels[i]];
    }
    if (terms.empty()) return 0.0;
    return pairwise_sum(terms.data(), terms.size()) / static_cast<double>(terms.size());
}

struct DiscriminativeTerms {
    double L_d = 0, L_va = 0, L_di = 0, L_re = 0;
    bool empty_group = false;
};

/// Variance/distance/regularizer terms over embedding groups; group means are
/// the mean member embeddings. With one group the distance term is 0.
inline DiscriminativeTerms discriminative_loss(const Eigen::MatrixXd& embeds,
                                               const std::vector<std::vector<int>>& groups,
                                               const LossWeights& w) {
    DiscriminativeTerms out;
    std::vector<Eigen::VectorXd> means;
    std::vector<const std::vector<int>*> live;
    for (const auto& g : groups) {
        if (g.empty()) {
            out.empty_group = true;
            continue;
        }
        Eigen::VectorXd mu = Eigen::VectorXd::Zero(embeds.cols());
        for (int idx : g) mu += embeds.row(idx).transpose();
        means.push_back(mu / static_cast<double>(g.size()));
        live.push_back(&g);
    }
    const int G = static_cast<int>(means.size());
    if (G == 0) throw DomainError("discriminative_loss: at least one nonempty group required");

    for (int g = 0; g < G; ++g) {
        double acc = 0;
        for (int idx : *live[g]) {
            double h = std::max(0.0, (means[g] - embeds.row(idx).transpose()).norm() - w.delta_v);
            acc += h * h;
        }
        out.L_va += acc / static_cast<double>(live[g]->size());
    }
    out.L_va /= G;

    if (G > 1) {
        for (int a = 0; a < G; ++a)
            for (int b = 0; b < G; ++b) {
                if (a == b) continue;
                double h = std::max(0.0, 2.0 * w.delta_d - (means[a] - means[b]).norm());
                out.L_di += h * h;
            }
        out.L_di /= static_cast<double>(G) * (G - 1);
    }

    for (int g = 0; g < G; ++g) out.L_re += means[g].norm();
    out.L_re /= G;

    out.L_d = w.lambda41 * out.L_va + w.lambda42 * out.L_di + w.lambda43 * out.L_re;
    return out;
}

// ---------------------------------------------------------------------------
// Dirichlet density and sampling.
// ---------------------------------------------------------------------------

/// log D(p | alpha) = -ln B(alpha) + sum (alpha_k - 1) ln p_k.
inline double dirichlet_log_density(const Eigen::VectorXd& p, const Eigen::VectorXd& alpha) {
    if (p.size() != alpha.size() || p.size() < 2)
        throw DomainError("dirichlet_log_density: dimension mismatch");
    double sum_p = 0;
    for (Eigen::Index k = 0; k < p.size(); ++k) {
        if (!(p[k] > 0)) throw DomainError("dirichlet_log_density: p must be strictly positive");
        if (!(alpha[k] > 0)) throw DomainError("dirichlet_log_density: alpha must be > 0");
        sum_p += p[k];
    }
    if (std::abs(sum_p - 1.0) > 1e-9)
        throw DomainError("dirichlet_log_density: p must sum to 1");
    double log_beta = -lgamma(alpha.sum());
    double acc = 0;
    for (Eigen::Index k = 0; k < p.size(); ++k) {
        log_beta += lgamma(alpha[k]);
        acc += (alpha[k] - 1.0) * std::log(p[k]);
    }
    return -log_beta + acc;
}

namespace detail {

/// Marsaglia-Tsang gamma sampler (shape > 0, unit scale).
inline double gamma_sample(double shape, Rng& rng) {
    if (shape < 1.0) {
        double u = 0.0;
        while (u == 0.0) u = rng.uniform();
        return gamma_sample(shape + 1.0, rng) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = rng.normal();
        double v = 1.0 + c * x;
        if (v <= 0) continue;
        v = v * v * v;
        double u = 0.0;
        while (u == 0.0) u = rng.uniform();
        if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
}

}  // namespace detail

/// Draws from Dir(alpha) via normalized independent gamma draws.
inline Eigen::VectorXd dirichlet_sample(const Eigen::VectorXd& alpha, Rng& rng) {
    Eigen::VectorXd g(alpha.size());
    double sum = 0;
    for (Eigen::Index k = 0; k < alpha.size(); ++k) {
        if (!(alpha[k] > 0)) throw DomainError("dirichlet_sample: alpha must be > 0");
        g[k] = detail::gamma_sample(alpha[k], rng);
        sum += g[k];
    }
    if (sum == 0) throw NumericError("dirichlet_sample: degenerate draw");
    return g / sum;
}

// ---------------------------------------------------------------------------
// Fused batch evaluation with analytic gradients.
//
// Cross-branch head inputs (semantic logits into the center and embedding
// heads, the center pre-activation into the embedding/prototype heads) and the
// per-batch stuff prototypes are constants for the backward pass. A FrozenTaps
// snapshot pins those constants so that central finite differences of
// evaluate_batch(params, ..., &taps) probe exactly the function whose gradient
// the backward pass computes.
// ---------------------------------------------------------------------------

struct BatchItem {
    const Sample* sample = nullptr;
    const Grid<double>* center_gt = nullptr;
    std::vector<int> pixels;  // sorted linear indices; always includes GT centers
};

/// Deterministic pixel subsample (fraction of all pixels, GT centers forced in).
inline BatchItem make_batch_item(const Sample& sample, const Grid<double>& center_gt,
                                 double pixel_fraction, uint64_t seed) {
    if (!(pixel_fraction > 0.0) || pixel_fraction > 1.0)
        throw ConfigError("pixel_fraction must be in (0, 1]");
    BatchItem item;
    item.sample = &sample;
    item.center_gt = &center_gt;
    const int n = sample.semantic_map.rows * sample.semantic_map.cols;
    if (pixel_fraction >= 1.0) {
        item.pixels.resize(n);
        for (int i = 0; i < n; ++i) item.pixels[i] = i;
        return item;
    }
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    const int keep = std::max(1, static_cast<int>(std::ceil(pixel_fraction * n)));
    idx.resize(keep);
    for (const auto& c : sample.centers)
        idx.push_back(c.row * sample.semantic_map.cols + c.col);
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    item.pixels = std::move(idx);
    return item;
}

template <typename S>
struct FrozenTaps {
    std::vector<MatrixX<S>> sem_logits;   // per image, N x K
    std::vector<VectorX<S>> center_pre;   // per image, N
    std::vector<Eigen::VectorXd> stuff_mu;   // per stuff class (empty if absent)
    std::vector<double> stuff_var;
    std::vector<char> stuff_present;
};

template <typename S>
struct BatchEval {
    LossReport report;
    std::optional<ModelParamsT<S>> grad;
};

namespace detail {

struct ProtoRef {  // prototype used inside the batch loss
    bool is_thing = false;
    int cache_index = -1;    // things: row in this image's cache
    int stuff_class = -1;    // stuff: class id
    Eigen::VectorXd mu;      // stuff value (constant); things read live
    double var = 1.0;
};

}  // namespace detail

template <typename S>
BatchEval<S> evaluate_batch(const ModelParamsT<S>& params, const std::vector<BatchItem>& batch,
                            const LossWeights& weights, bool with_grad,
                            const FrozenTaps<S>* frozen = nullptr,
                            FrozenTaps<S>* capture = nullptr) {
    weights.validate();
    if (batch.empty()) throw ConfigError("evaluate_batch: batch must be nonempty");
    if (weights.activation != params.activation)
        throw ConfigError("evaluate_batch: activation variant mismatch");
    const int B = static_cast<int>(batch.size());
    const int K = params.K, K_st = params.K_st, F = params.F;

    // Phase 1: forward every image over its sampled pixels.
    std::vector<ForwardCache<S>> caches(B);
    parallel_for(static_cast<size_t>(B), [&](size_t i) {
        BranchTaps<S> taps;
        if (frozen) {
            taps.sem_logits = &frozen->sem_logits[i];
            taps.center_pre = &frozen->center_pre[i];
        }
        caches[i] = forward_pixels(params, batch[i].sample->image, params.feature,
                                   batch[i].pixels, taps);
    });

    // Phase 2: per-batch stuff prototypes over ground-truth stuff pixels
    // (means accumulated in double, fixed image/pixel order).
    std::vector<Eigen::VectorXd> stuff_mu(K_st, Eigen::VectorXd::Zero(F));
    std::vector<double> stuff_var(K_st, 0.0);
    std::vector<long> stuff_n(K_st, 0);
    if (frozen) {
        stuff_mu = frozen->stuff_mu;
        stuff_var = frozen->stuff_var;
        for (int k = 0; k < K_st; ++k) stuff_n[k] = frozen->stuff_present[k] ? 1 : 0;
    } else {
        for (int b = 0; b < B; ++b) {
            const auto& item = batch[b];
            const auto& cache = caches[b];
            for (int i = 0; i < cache.count(); ++i) {
                int y = item.sample->semantic_map.data[item.pixels[i]];
                if (y >= K_st) continue;
                for (int f = 0; f < F; ++f) stuff_mu[y][f] += static_cast<double>(cache.proto_mu(i, f));
                stuff_var[y] += static_cast<double>(cache.proto_var(i));
                ++stuff_n[y];
            }
        }
        for (int k = 0; k < K_st; ++k)
            if (stuff_n[k] > 0) {
                stuff_mu[k] /= static_cast<double>(stuff_n[k]);
                stuff_var[k] /= static_cast<double>(stuff_n[k]);
            }
    }
    if (capture) {
        capture->sem_logits.clear();
        capture->center_pre.clear();
        for (int b = 0; b < B; ++b) {
            capture->sem_logits.push_back(caches[b].sem_logits);
            capture->center_pre.push_back(caches[b].center_pre);
        }
        capture->stuff_mu = stuff_mu;
        capture->stuff_var = stuff_var;
        capture->stuff_present.assign(K_st, 0);
        for (int k = 0; k < K_st; ++k) capture->stuff_present[k] = stuff_n[k] > 0 ? 1 : 0;
    }

    // Phase 3 + 4: per-image losses, output gradients, and backward.
    struct PerImage {
        double L_s = 0, L_o = 0, L_p = 0, L_va = 0, L_di = 0, L_re = 0, L_kl = 0;
        bool all_ignored = false;
        bool empty_group = false;
        std::optional<ModelParamsT<S>> grad;
    };
    std::vector<PerImage> per_image(B);
    const double inv_B = 1.0 / B;

    parallel_for(static_cast<size_t>(B), [&](size_t bi) {
        const int b = static_cast<int>(bi);
        const BatchItem& item = batch[b];
        const ForwardCache<S>& cache = caches[b];
        const Sample& sample = *item.sample;
        PerImage& out = per_image[b];
        const int N = cache.count();
        const int W_img = sample.semantic_map.cols;

        MatrixX<S> d_sem = MatrixX<S>::Zero(N, K);
        VectorX<S> d_center_pre = VectorX<S>::Zero(N);
        MatrixX<S> d_embed = MatrixX<S>::Zero(N, F);
        MatrixX<S> d_proto_mu = MatrixX<S>::Zero(N, F);
        VectorX<S> d_proto_var_pre = VectorX<S>::Zero(N);

        // Labels for the sampled pixels; unknown or ignore ids never carry loss.
        std::vector<int> labels(N);
        int included = 0;
        for (int i = 0; i < N; ++i) {
            int y = sample.semantic_map.data[item.pixels[i]];
            labels[i] = (y == kIgnoreLabel || y >= K) ? -1 : y;
            if (labels[i] >= 0) ++included;
        }
        out.all_ignored = included == 0;

        // --- semantic loss (and KL variant) over alpha = activation(logit)+1.
        {
            std::vector<double> terms, kl_terms;
            terms.reserve(included);
            const double scale = included > 0 ? 1.0 / included : 0.0;
            for (int i = 0; i < N; ++i) {
                if (labels[i] < 0) continue;
                int y = labels[i];
                double sum_alpha = 0;
                std::vector<double> alpha(K), dact(K);
                for (int k = 0; k < K; ++k) {
                    double logit = static_cast<double>(cache.sem_logits(i, k));
                    if (params.activation == Activation::Softplus) {
                        alpha[k] = softplus(logit) + 1.0;
                        dact[k] = softplus_derivative(logit);
                    } else {
                        alpha[k] = std::exp(logit) + 1.0;
                        dact[k] = std::exp(logit);
                    }
                    sum_alpha += alpha[k];
                }
                terms.push_back(digamma(sum_alpha) - digamma(alpha[y]));
                if (with_grad && weights.lambda1 > 0) {
                    const double psi1_sum = trigamma(sum_alpha);
                    const double psi1_y = trigamma(alpha[y]);
                    for (int k = 0; k < K; ++k) {
                        double g = psi1_sum - (k == y ? psi1_y : 0.0);
                        d_sem(i, k) += static_cast<S>(weights.lambda1 * inv_B * scale * g * dact[k]);
                    }
                }
                if (weights.lambda_kl > 0) {
                    double s_t = 0, lg = 0;
                    std::vector<double> at(K);
                    for (int k = 0; k < K; ++k) {
                        at[k] = (k == y) ? 1.0 : alpha[k];
                        s_t += at[k];
                        lg += lgamma(at[k]);
                    }
                    double psi_sum = digamma(s_t);
                    double corr = 0;
                    for (int k = 0; k < K; ++k) corr += (at[k] - 1.0) * (digamma(at[k]) - psi_sum);
                    kl_terms.push_back(lgamma(s_t) - lg - lgamma(static_cast<double>(K)) + corr);
                    if (with_grad) {
                        // dKL/da_m = (a_m - 1) psi'(a_m) - psi'(S) (S - K), m != y
                        const double psi1_sum = trigamma(s_t);
                        for (int k = 0; k < K; ++k) {
                            if (k == y) continue;
                            double g = (at[k] - 1.0) * trigamma(at[k]) - psi1_sum * (s_t - K);
                            d_sem(i, k) +=
                                static_cast<S>(weights.lambda_kl * inv_B * scale * g * dact[k]);
                        }
                    }
                }
            }
            out.L_s = terms.empty() ? 0.0
                                    : pairwise_sum(terms.data(), terms.size()) / terms.size();
            out.L_kl = kl_terms.empty()
                           ? 0.0
                           : pairwise_sum(kl_terms.data(), kl_terms.size()) / kl_terms.size();
        }

        // --- center loss over the sampled pixels.
        {
            std::vector<double> terms(N);
            const double scale = N > 0 ? 1.0 / N : 0.0;
            for (int i = 0; i < N; ++i) {
                double pred = static_cast<double>(cache.center_hat(i));
                double gt = item.center_gt->data[item.pixels[i]];
                double diff = pred - gt;
                terms[i] = diff * diff;
                if (with_grad && weights.lambda2 > 0) {
                    double dsig = pred * (1.0 - pred);
                    d_center_pre(i) +=
                        static_cast<S>(weights.lambda2 * inv_B * scale * 2.0 * diff * dsig);
                }
            }
            out.L_o = N > 0 ? pairwise_sum(terms.data(), terms.size()) / N : 0.0;
        }

        // --- prototype loss: softmax over this image's thing prototypes (live,
        // read at the true centers) plus the batch stuff prototypes (constant).
        {
            std::vector<detail::ProtoRef> protos;
            std::map<int, int> instance_to_proto;
            for (const auto& ctr : sample.centers) {
                int linear = ctr.row * W_img + ctr.col;
                int ci = cache.find_pixel(linear);
                if (ci < 0) throw DataError("evaluate_batch: center pixel missing from sample");
                detail::ProtoRef p;
                p.is_thing = true;
                p.cache_index = ci;
                p.var = static_cast<double>(cache.proto_var(ci));
                instance_to_proto[ctr.instance_id] = static_cast<int>(protos.size());
                protos.push_back(std::move(p));
            }
            std::vector<int> stuff_to_proto(K_st, -1);
            for (int k = 0; k < K_st; ++k) {
                if (stuff_n[k] == 0) continue;
                detail::ProtoRef p;
                p.stuff_class = k;
                p.mu = stuff_mu[k];
                p.var = stuff_var[k];
                stuff_to_proto[k] = static_cast<int>(protos.size());
                protos.push_back(std::move(p));
            }
            const int P = static_cast<int>(protos.size());
            if (P == 0 && included > 0)
                throw DataError("evaluate_batch: empty prototype set for a labeled image");

            std::vector<double> terms;
            terms.reserve(included);
            const double scale = included > 0 ? 1.0 / included : 0.0;
            Eigen::VectorXd phi(F), scores(P), z(P);
            for (int i = 0; i < N && P > 0; ++i) {
                if (labels[i] < 0) continue;
                int target;
                if (labels[i] < K_st) {
                    target = stuff_to_proto[labels[i]];
                } else {
                    int inst = sample.instance_map.data[item.pixels[i]];
                    auto it = instance_to_proto.find(inst);
                    target = it == instance_to_proto.end() ? -1 : it->second;
                }
                if (target < 0)
                    throw DataError("evaluate_batch: pixel without a pseudo-label prototype");

                for (int f = 0; f < F; ++f) phi[f] = static_cast<double>(cache.embed(i, f));
                for (int p = 0; p < P; ++p) {
                    const auto& pr = protos[p];
                    double d2 = 0;
                    for (int f = 0; f < F; ++f) {
                        double mu = pr.is_thing ? static_cast<double>(cache.proto_mu(pr.cache_index, f))
                                                : pr.mu[f];
                        double diff = phi[f] - mu;
                        d2 += diff * diff;
                    }
                    scores[p] = -d2 / (2.0 * pr.var);
                }
                double mx = scores.maxCoeff();
                double lse = mx + std::log((scores.array() - mx).exp().sum());
                terms.push_back(lse - scores[target]);

                if (with_grad && weights.lambda3 > 0) {
                    z = (scores.array() - lse).exp();
                    const double coeff = weights.lambda3 * inv_B * scale;
                    for (int p = 0; p < P; ++p) {
                        const auto& pr = protos[p];
                        double w_p = coeff * (z[p] - (p == target ? 1.0 : 0.0));
                        if (w_p == 0.0) continue;
                        double d2 = 0;
                        for (int f = 0; f < F; ++f) {
                            double mu = pr.is_thing
                                            ? static_cast<double>(cache.proto_mu(pr.cache_index, f))
                                            : pr.mu[f];
                            double diff = phi[f] - mu;
                            d2 += diff * diff;
                            double ds_dphi = -diff / pr.var;
                            d_embed(i, f) += static_cast<S>(w_p * ds_dphi);
                            if (pr.is_thing)
                                d_proto_mu(pr.cache_index, f) += static_cast<S>(w_p * (diff / pr.var));
                        }
                        if (pr.is_thing) {
                            double ds_dvar = d2 / (2.0 * pr.var * pr.var);
                            double dvar_dpre = softplus_derivative(
                                static_cast<double>(cache.proto_var_pre(pr.cache_index)));
                            d_proto_var_pre(pr.cache_index) +=
                                static_cast<S>(w_p * ds_dvar * dvar_dpre);
                        }
                    }
                }
            }
            out.L_p = terms.empty() ? 0.0
                                    : pairwise_sum(terms.data(), terms.size()) / terms.size();
        }

        // --- discriminative loss over sampled GT groups (thing instances and
        // stuff classes of this image), means over sampled members.
        {
            std::map<int, std::vector<int>> group_map;  // key: stuff class or K + instance id
            for (int i = 0; i < N; ++i) {
                if (labels[i] < 0) continue;
                int key = labels[i] < K_st
                              ? labels[i]
                              : K + static_cast<int>(sample.instance_map.data[item.pixels[i]]);
                group_map[key].push_back(i);
            }
            std::vector<const std::vector<int>*> groups;
            for (const auto& [key, members] : group_map) groups.push_back(&members);
            const int G = static_cast<int>(groups.size());
            if (G > 0) {
                std::vector<Eigen::VectorXd> means(G, Eigen::VectorXd::Zero(F));
                for (int g = 0; g < G; ++g) {
                    for (int idx : *groups[g])
                        for (int f = 0; f < F; ++f)
                            means[g][f] += static_cast<double>(cache.embed(idx, f));
                    means[g] /= static_cast<double>(groups[g]->size());
                }
                // mean-gradient accumulators, scattered to members afterwards
                std::vector<Eigen::VectorXd> d_mean(G, Eigen::VectorXd::Zero(F));

                double L_va = 0;
                for (int g = 0; g < G; ++g) {
                    const auto& members = *groups[g];
                    const double n_g = static_cast<double>(members.size());
                    double acc = 0;
                    for (int idx : members) {
                        Eigen::VectorXd r(F);
                        for (int f = 0; f < F; ++f)
                            r[f] = means[g][f] - static_cast<double>(cache.embed(idx, f));
                        double dist = r.norm();
                        double h = dist - weights.delta_v;
                        if (h <= 0) continue;  // hinge inactive; kink subgradient is 0
                        acc += h * h;
                        if (with_grad && weights.lambda4 > 0 && weights.lambda41 > 0 && dist > 0) {
                            const double coeff = weights.lambda4 * weights.lambda41 * inv_B *
                                                 2.0 * h / (G * n_g * dist);
                            for (int f = 0; f < F; ++f) {
                                d_embed(idx, f) += static_cast<S>(-coeff * r[f]);
                                d_mean[g][f] += coeff * r[f];
                            }
                        }
                    }
                    L_va += acc / n_g;
                }
                out.L_va = L_va / G;

                double L_di = 0;
                if (G > 1) {
                    const double pair_norm = 1.0 / (static_cast<double>(G) * (G - 1));
                    for (int a = 0; a < G; ++a)
                        for (int b = 0; b < G; ++b) {
                            if (a == b) continue;
                            Eigen::VectorXd diff = means[a] - means[b];
                            double dist = diff.norm();
                            double h = 2.0 * weights.delta_d - dist;
                            if (h <= 0) continue;
                            L_di += h * h;
                            // coincident means: direction undefined, subgradient 0
                            if (with_grad && weights.lambda4 > 0 && weights.lambda42 > 0 &&
                                dist > 0) {
                                const double coeff = weights.lambda4 * weights.lambda42 * inv_B *
                                                     pair_norm * 2.0 * h / dist;
                                d_mean[a] -= coeff * diff;
                                d_mean[b] += coeff * diff;
                            }
                        }
                    L_di *= pair_norm;
                }
                out.L_di = L_di;

                double L_re = 0;
                for (int g = 0; g < G; ++g) {
                    double nrm = means[g].norm();
                    L_re += nrm;
                    if (with_grad && weights.lambda4 > 0 && weights.lambda43 > 0 && nrm > 0)
                        d_mean[g] += (weights.lambda4 * weights.lambda43 * inv_B / (G * nrm)) *
                                     means[g];
                }
                out.L_re = L_re / G;

                if (with_grad && weights.lambda4 > 0)
                    for (int g = 0; g < G; ++g) {
                        const auto& members = *groups[g];
                        Eigen::VectorXd share = d_mean[g] / static_cast<double>(members.size());
                        for (int idx : members)
                            for (int f = 0; f < F; ++f)
                                d_embed(idx, f) += static_cast<S>(share[f]);
                    }
            } else {
                out.empty_group = true;
            }
        }

        if (!with_grad) return;

        // --- backward through heads and trunk.
        ModelParamsT<S> grad = params.zeros_like();
        const MatrixX<S>& h = cache.trunk_act.back();
        MatrixX<S> d_h = MatrixX<S>::Zero(N, h.cols());
        const int T = static_cast<int>(h.cols());

        const MatrixX<S>& sem_tap = frozen ? frozen->sem_logits[b] : cache.sem_logits;
        MatrixX<S> center_tap = frozen ? frozen->center_pre[b] : cache.center_pre;

        // head_sem: input h
        grad.head_sem.W += d_sem.transpose() * h;
        grad.head_sem.b += d_sem.colwise().sum().transpose();
        d_h += d_sem * params.head_sem.W;

        // head_center: input [h, sem_tap]; the tap carries no gradient
        {
            MatrixX<S> in = detail::concat_cols(h, sem_tap);
            grad.head_center.W += d_center_pre.transpose() * in;
            grad.head_center.b(0) += d_center_pre.sum();
            d_h += d_center_pre * params.head_center.W.leftCols(T);
        }
        // head_embed: input [h, center_tap, sem_tap]
        {
            MatrixX<S> in = detail::concat_cols(detail::concat_cols(h, center_tap), sem_tap);
            grad.head_embed.W += d_embed.transpose() * in;
            grad.head_embed.b += d_embed.colwise().sum().transpose();
            d_h += d_embed * params.head_embed.W.leftCols(T);
        }
        // proto heads: input [h, center_tap]
        {
            MatrixX<S> in = detail::concat_cols(h, center_tap);
            grad.head_proto_mu.W += d_proto_mu.transpose() * in;
            grad.head_proto_mu.b += d_proto_mu.colwise().sum().transpose();
            d_h += d_proto_mu * params.head_proto_mu.W.leftCols(T);

            grad.head_proto_var.W += d_proto_var_pre.transpose() * in;
            grad.head_proto_var.b(0) += d_proto_var_pre.sum();
            d_h += d_proto_var_pre * params.head_proto_var.W.leftCols(T);
        }

        // trunk: delta through tanh, layer by layer
        MatrixX<S> delta = d_h;
        for (int layer = static_cast<int>(params.trunk.size()) - 1; layer >= 0; --layer) {
            delta = delta.cwiseProduct(
                (MatrixX<S>::Ones(N, cache.trunk_act[layer].cols()) -
                 cache.trunk_act[layer].cwiseProduct(cache.trunk_act[layer])));
            const MatrixX<S>& below =
                layer == 0 ? cache.input : cache.trunk_act[layer - 1];
            grad.trunk[layer].W += delta.transpose() * below;
            grad.trunk[layer].b += delta.colwise().sum().transpose();
            if (layer > 0) delta = (delta * params.trunk[layer].W).eval();
        }
        out.grad = std::move(grad);
    });

    // Reduce in fixed image order.
    BatchEval<S> result;
    auto mean_of = [&](auto field) {
        std::vector<double> vals(B);
        for (int b = 0; b < B; ++b) vals[b] = field(per_image[b]);
        return pairwise_sum(vals.data(), vals.size()) / B;
    };
    result.report.L_s = mean_of([](const PerImage& p) { return p.L_s; });
    result.report.L_o = mean_of([](const PerImage& p) { return p.L_o; });
    result.report.L_p = mean_of([](const PerImage& p) { return p.L_p; });
    result.report.L_va = mean_of([](const PerImage& p) { return p.L_va; });
    result.report.L_di = mean_of([](const PerImage& p) { return p.L_di; });
    result.report.L_re = mean_of([](const PerImage& p) { return p.L_re; });
    result.report.L_kl = mean_of([](const PerImage& p) { return p.L_kl; });
    result.report.L_d = weights.lambda41 * result.report.L_va +
                        weights.lambda42 * result.report.L_di +
                        weights.lambda43 * result.report.L_re;
    result.report.total = weights.lambda1 * result.report.L_s +
                          weights.lambda2 * result.report.L_o +
                          weights.lambda3 * result.report.L_p +
                          weights.lambda4 * result.report.L_d +
                          weights.lambda_kl * result.report.L_kl;
    for (int b = 0; b < B; ++b) {
        result.report.all_ignored |= per_image[b].all_ignored;
        result.report.empty_group |= per_image[b].empty_group;
    }
    if (!std::isfinite(result.report.total))
        throw NumericError("evaluate_batch: non-finite total loss (L_s=" +
                           std::to_string(result.report.L_s) +
                           ", L_o=" + std::to_string(result.report.L_o) +
                           ", L_p=" + std::to_string(result.report.L_p) +
                           ", L_d=" + std::to_string(result.report.L_d) + ")");

    if (with_grad) {
        ModelParamsT<S> total = params.zeros_like();
        for (int b = 0; b < B; ++b) {
            ModelParamsT<S>& g = *per_image[b].grad;
            std::vector<AffineLayer<S>*> dst, src;
            total.for_each_layer([&](AffineLayer<S>& l) { dst.push_back(&l); });
            g.for_each_layer([&](AffineLayer<S>& l) { src.push_back(&l); });
            for (size_t i = 0; i < dst.size(); ++i) {
                dst[i]->W += src[i]->W;
                dst[i]->b += src[i]->b;
            }
        }
        result.grad = std::move(total);
    }
    return result;
}

/// Captures the cross-branch constants of a batch at the current parameters.
template <typename S>
FrozenTaps<S> make_frozen_taps(const ModelParamsT<S>& params, const std::vector<BatchItem>& batch,
                               const LossWeights& weights) {
    FrozenTaps<S> taps;
    evaluate_batch<S>(params, batch, weights, false, nullptr, &taps);
    return taps;
}

/// Parameter-gradient norm of each weighted term, via one backward pass per
/// term (diagnostic path; training uses the single combined backward).
template <typename S>
std::map<std::string, double> loss_term_gradient_norms(const ModelParamsT<S>& params,
                                                       const std::vector<BatchItem>& batch,
                                                       const LossWeights& weights) {
    std::map<std::string, double> norms;
    auto grad_norm = [&](LossWeights w) {
        auto eval = evaluate_batch(params, batch, w, true);
        double acc = 0;
        eval.grad->for_each_layer([&](const AffineLayer<S>& l) {
            acc += static_cast<double>(l.W.squaredNorm()) + static_cast<double>(l.b.squaredNorm());
        });
        return std::sqrt(acc);
    };
    LossWeights only = weights;
    only.lambda2 = only.lambda3 = only.lambda4 = only.lambda_kl = 0;
    norms["L_s"] = grad_norm(only);
    only = weights;
    only.lambda1 = only.lambda3 = only.lambda4 = only.lambda_kl = 0;
    norms["L_o"] = grad_norm(only);
    only = weights;
    only.lambda1 = only.lambda2 = only.lambda4 = only.lambda_kl = 0;
    norms["L_p"] = grad_norm(only);
    only = weights;
    only.lambda1 = only.lambda2 = only.lambda3 = only.lambda_kl = 0;
    norms["L_d"] = grad_norm(only);
    if (weights.lambda_kl > 0) {
        only = weights;
        only.lambda1 = only.lambda2 = only.lambda3 = only.lambda4 = 0;
        norms["L_kl"] = grad_norm(only);
    }
    return norms;
}

}  // namespace holoseg
