#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "holoseg/clustering.hpp"
#include "holoseg/core.hpp"
#include "holoseg/image_io.hpp"
#include "holoseg/losses.hpp"
#include "holoseg/model.hpp"
#include "holoseg/prototype.hpp"
#include "holoseg/scene.hpp"

namespace holoseg {

/// u = K / sum_k alpha_k, in (0, 1]; 1 means zero evidence.
template <typename S>
Grid<double> uncertainty_map(const Field<S>& alpha) {
    const int K = alpha.channels;
    Grid<double> u(alpha.rows, alpha.cols);
    for (size_t i = 0; i < alpha.pixel_count(); ++i) {
        double sum = 0;
        for (int k = 0; k < K; ++k) {
            double a = static_cast<double>(alpha.data[i * K + k]);
            if (!(a >= 1.0)) throw DomainError("uncertainty_map: alpha must be >= 1");
            sum += a;
        }
        u.data[i] = K / sum;
    }
    return u;
}

struct UncertaintyStats {
    double mean_u = 0;
    double std_u = 0;   // population convention
    double t = 3.0;
    double threshold = 0;
    long n_pixels = 0;

    ordered_json to_json() const {
        return ordered_json{{"mean_u", mean_u},
                            {"std_u", std_u},
                            {"t", t},
                            {"threshold", threshold},
                            {"n_pixels", n_pixels}};
    }
    static UncertaintyStats from_json(const ordered_json& j) {
        UncertaintyStats s;
        s.mean_u = json_get<double>(j, "mean_u");
        s.std_u = json_get<double>(j, "std_u");
        s.t = json_get<double>(j, "t");
        s.threshold = json_get<double>(j, "threshold");
        s.n_pixels = json_get<long>(j, "n_pixels");
        return s;
    }
};

namespace detail {

struct Welford {
    long n = 0;
    double mean = 0;
    double m2 = 0;

    void add(double x) {
        ++n;
        double d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    /// Chan's pairwise merge; applied in fixed order for bit stability.
    void merge(const Welford& o) {
        if (o.n == 0) return;
        if (n == 0) {
            *this = o;
            return;
        }
        double d = o.mean - mean;
        long total = n + o.n;
        mean += d * o.n / total;
        m2 += o.m2 + d * d * (static_cast<double>(n) * o.n / total);
        n = total;
    }
};

}  // namespace detail

/// Single numerically-stable pass over every training pixel's uncertainty;
/// threshold = mean + t * std (population variance).
inline UncertaintyStats fit_uncertainty_stats(const ModelParams& params,
                                              const std::vector<Sample>& train_split, double t) {
    if (train_split.empty()) throw ConfigError("fit_uncertainty_stats: empty split");
    if (!(t >= 0)) throw ConfigError("fit_uncertainty_stats: t must be >= 0");
    std::vector<detail::Welford> per_image(train_split.size());
    parallel_for(train_split.size(), [&](size_t i) {
        auto pred = forward(params, train_split[i].image);
        Grid<double> u = uncertainty_map(pred.alpha);
        for (double v : u.data) per_image[i].add(v);
    });
    detail::Welford acc;
    for (const auto& w : per_image) acc.merge(w);
    UncertaintyStats stats;
    stats.n_pixels = acc.n;
    stats.mean_u = acc.mean;
    stats.std_u = std::sqrt(acc.m2 / acc.n);
    stats.t = t;
    stats.threshold = stats.mean_u + t * stats.std_u;
    return stats;
}

struct CenterDetection {
    int row = 0;
    int col = 0;
    double confidence = 0;
};

struct NmsParams {
    int window = 3;      // (2w+1)^2 max window
    double c_min = 0.1;  // confidence floor
    int top_k = 64;
};

/// Local maxima of the center heatmap under a square max-window. Plateau ties
/// go to the raster-first pixel; the list is sorted by confidence with (row,
/// col) tie-breaks and truncated to top_k.
template <typename S>
std::vector<CenterDetection> detect_centers(const Grid<S>& center_hat,
                                            const NmsParams& nms = {}) {
    std::vector<CenterDetection> out;
    const int H = center_hat.rows, W = center_hat.cols, w = nms.window;
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            double v = static_cast<double>(center_hat.at(r, c));
            if (v < nms.c_min) continue;
            bool is_max = true;
            for (int dr = -w; dr <= w && is_max; ++dr)
                for (int dc = -w; dc <= w && is_max; ++dc) {
                    int nr = r + dr, nc = c + dc;
                    if (nr < 0 || nr >= H || nc < 0 || nc >= W) continue;
                    double q = static_cast<double>(center_hat.at(nr, nc));
                    if (q > v || (q == v && (nr < r || (nr == r && nc < c)))) is_max = false;
                }
            if (is_max) out.push_back({r, c, v});
        }
    std::sort(out.begin(), out.end(), [](const CenterDetection& a, const CenterDetection& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        if (a.row != b.row) return a.row < b.row;
        return a.col < b.col;
    });
    if (static_cast<int>(out.size()) > nms.top_k) out.resize(nms.top_k);
    return out;
}

/// Per-pixel semantic argmax (ties to the lower class id).
template <typename S>
Grid<uint8_t> semantic_argmax(const Field<S>& sem_logits) {
    Grid<uint8_t> out(sem_logits.rows, sem_logits.cols);
    const int K = sem_logits.channels;
    for (size_t i = 0; i < sem_logits.pixel_count(); ++i) {
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (sem_logits.data[i * K + k] > sem_logits.data[i * K + best]) best = k;
        out.data[i] = static_cast<uint8_t>(best);
    }
    return out;
}

/// One thing prototype per detected center, (mu, sigma^2) read at the center
/// pixel; one stuff prototype per stuff class as means over that class's
/// source pixels. Pixels under exclude_mask never contribute, and centers on
/// excluded pixels are dropped.
template <typename S>
std::vector<Prototype> build_prototypes(const DensePredictionT<S>& pred,
                                        const std::vector<CenterDetection>& centers,
                                        const Grid<uint8_t>& stuff_source, int K_st,
                                        const Grid<uint8_t>* exclude_mask = nullptr) {
    const int F = pred.F;
    std::vector<Prototype> protos;
    int next_instance = 1;
    for (const auto& ctr : centers) {
        if (exclude_mask && exclude_mask->at(ctr.row, ctr.col)) continue;
        Eigen::VectorXd mu(F);
        for (int f = 0; f < F; ++f) mu[f] = static_cast<double>(pred.proto_mu.at(ctr.row, ctr.col, f));
        int seed_class = 0;
        for (int k = 1; k < pred.K; ++k)
            if (pred.sem_logits.at(ctr.row, ctr.col, k) >
                pred.sem_logits.at(ctr.row, ctr.col, seed_class))
                seed_class = k;
        protos.push_back(Prototype::thing(std::move(mu),
                                          static_cast<double>(pred.proto_var.at(ctr.row, ctr.col)),
                                          next_instance++, seed_class, ctr.row, ctr.col));
    }
    for (int k = 0; k < K_st; ++k) {
        Eigen::VectorXd mu = Eigen::VectorXd::Zero(F);
        double var = 0;
        long n = 0;
        for (int r = 0; r < stuff_source.rows; ++r)
            for (int c = 0; c < stuff_source.cols; ++c) {
                if (stuff_source.at(r, c) != k) continue;
                if (exclude_mask && exclude_mask->at(r, c)) continue;
                for (int f = 0; f < F; ++f) mu[f] += static_cast<double>(pred.proto_mu.at(r, c, f));
                var += static_cast<double>(pred.proto_var.at(r, c));
                ++n;
            }
        if (n == 0) continue;  // class with zero source pixels is omitted
        protos.push_back(Prototype::stuff(mu / static_cast<double>(n), var / n, k));
    }
    return protos;
}

enum class InferMode { Open, Closed };

inline std::string infer_mode_name(InferMode m) { return m == InferMode::Open ? "open" : "closed"; }
inline InferMode infer_mode_from_name(const std::string& n) {
    if (n == "open") return InferMode::Open;
    if (n == "closed") return InferMode::Closed;
    throw ConfigError("unknown eval mode: " + n);
}

struct HolisticOutput {
    Grid<uint8_t> semantic_map;   // known ids plus the single unknown id K
    Grid<uint16_t> instance_map;  // things and unknown instances; 0 elsewhere
    Grid<uint8_t> unknown_mask;   // 1 exactly where semantic_map == K
    Grid<double> uncertainty;     // u in (0, 1]
    bool no_prototypes_warning = false;

    struct InstanceInfo {
        int id = 0;
        int class_id = 0;
        bool is_unknown = false;
        long pixel_count = 0;
    };
    std::vector<InstanceInfo> instances;
};

namespace detail {

inline void finalize_instances(HolisticOutput& out, int unknown_id) {
    std::map<uint16_t, HolisticOutput::InstanceInfo> info;
    for (size_t i = 0; i < out.instance_map.size(); ++i) {
        uint16_t id = out.instance_map.data[i];
        if (id == 0) continue;
        auto& inst = info[id];
        inst.id = id;
        inst.class_id = out.semantic_map.data[i];
        inst.is_unknown = out.semantic_map.data[i] == unknown_id;
        ++inst.pixel_count;
    }
    out.instances.clear();
    for (auto& [id, inst] : info) out.instances.push_back(inst);
}

/// Fallback when no prototypes exist: label by semantic argmax; connected
/// components of thing-class pixels become instances so the output maps stay
/// well formed.
template <typename S>
void argmax_fallback(const DensePredictionT<S>& pred, const Grid<uint8_t>& argmax, int K_st,
                     HolisticOutput& out) {
    out.no_prototypes_warning = true;
    out.semantic_map = argmax;
    out.instance_map = Grid<uint16_t>(argmax.rows, argmax.cols, 0);
    out.unknown_mask = Grid<uint8_t>(argmax.rows, argmax.cols, 0);
    uint16_t next = 1;
    for (int r = 0; r < argmax.rows; ++r)
        for (int c = 0; c < argmax.cols; ++c) {
            if (argmax.at(r, c) < K_st || out.instance_map.at(r, c) != 0) continue;
            uint8_t cls = argmax.at(r, c);
            std::vector<std::pair<int, int>> stack{{r, c}};
            out.instance_map.at(r, c) = next;
            while (!stack.empty()) {
                auto [cr, cc] = stack.back();
                stack.pop_back();
                const int dr[4] = {-1, 1, 0, 0};
                const int dc[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    int nr = cr + dr[k], nc = cc + dc[k];
                    if (nr < 0 || nr >= argmax.rows || nc < 0 || nc >= argmax.cols) continue;
                    if (argmax.at(nr, nc) != cls || out.instance_map.at(nr, nc) != 0) continue;
                    out.instance_map.at(nr, nc) = next;
                    stack.emplace_back(nr, nc);
                }
            }
            ++next;
        }
}

}  // namespace detail

/// The holistic pipeline over a precomputed dense prediction. Canonical order:
/// uncertainty -> unknown mask (open) -> centers & prototypes from non-unknown
/// pixels -> per-pixel best-prototype assignment -> per-instance majority vote
/// -> DBSCAN over unknown embeddings -> noise reassignment -> dense renumber.
template <typename S>
HolisticOutput holistic_infer_prediction(const DensePredictionT<S>& pred,
                                         const UncertaintyStats& stats,
                                         const DbscanParams& dbscan_params, InferMode mode,
                                         int K_st, const NmsParams& nms = {}) {
    const int H = pred.center_hat.rows, W = pred.center_hat.cols;
    const int K = pred.K, F = pred.F;
    const int n_px = H * W;
    const uint8_t unknown_id = static_cast<uint8_t>(K);

    HolisticOutput out;
    out.uncertainty = uncertainty_map(pred.alpha);
    out.unknown_mask = Grid<uint8_t>(H, W, 0);
    if (mode == InferMode::Open)
        for (int i = 0; i < n_px; ++i)
            out.unknown_mask.data[i] = out.uncertainty.data[i] >= stats.threshold ? 1 : 0;

    Grid<uint8_t> argmax = semantic_argmax(pred.sem_logits);
    std::vector<CenterDetection> centers = detect_centers(pred.center_hat, nms);
    std::vector<Prototype> protos =
        build_prototypes(pred, centers, argmax, K_st, &out.unknown_mask);
    if (protos.empty()) {
        detail::argmax_fallback(pred, argmax, K_st, out);
        detail::finalize_instances(out, K);
        return out;
    }

    std::vector<int> thing_protos, stuff_protos;
    for (size_t p = 0; p < protos.size(); ++p)
        (protos[p].kind == Prototype::Kind::Thing ? thing_protos : stuff_protos)
            .push_back(static_cast<int>(p));

    // Step 5: every non-unknown pixel takes its best-scoring prototype.
    // provisional labels: semantic + prototype instance (0 = stuff)
    out.semantic_map = Grid<uint8_t>(H, W, 0);
    Grid<int> proto_of(H, W, -1);
    Eigen::VectorXd phi(F);
    for (int i = 0; i < n_px; ++i) {
        if (out.unknown_mask.data[i]) continue;
        for (int f = 0; f < F; ++f) phi[f] = static_cast<double>(pred.embed.data[static_cast<size_t>(i) * F + f]);
        int best = -1;
        double best_score = -std::numeric_limits<double>::infinity();
        for (size_t p = 0; p < protos.size(); ++p) {
            double score = -(phi - protos[p].mu).squaredNorm() / (2.0 * protos[p].var);
            if (score > best_score) {
                best_score = score;
                best = static_cast<int>(p);
            }
        }
        proto_of.data[i] = best;
    }

    // Step 6: majority vote per thing instance over the members' semantic
    // argmax; ties break to the lower class id. An instance whose majority is
    // a stuff class dissolves into that stuff class.
    std::map<int, std::vector<int>> members;  // prototype index -> pixels
    for (int i = 0; i < n_px; ++i) {
        int p = proto_of.data[i];
        if (p >= 0 && protos[p].kind == Prototype::Kind::Thing) members[p].push_back(i);
    }
    std::map<int, int> voted_class;  // prototype index -> class (may be stuff)
    for (const auto& [p, px] : members) {
        std::vector<long> votes(K, 0);
        for (int i : px) ++votes[argmax.data[i]];
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (votes[k] > votes[best]) best = k;
        voted_class[p] = best;
    }

    Grid<uint16_t> raw_instance(H, W, 0);  // provisional thing ids = proto index + 1
    for (int i = 0; i < n_px; ++i) {
        int p = proto_of.data[i];
        if (p < 0) continue;
        if (protos[p].kind == Prototype::Kind::Stuff) {
            out.semantic_map.data[i] = static_cast<uint8_t>(protos[p].class_id);
        } else {
            int cls = voted_class[p];
            out.semantic_map.data[i] = static_cast<uint8_t>(cls);
            if (cls >= K_st)
                raw_instance.data[i] = static_cast<uint16_t>(p + 1);
            // dissolved instances (stuff majority) keep instance id 0
        }
    }
    auto surviving_thing = [&](int p) {
        auto it = voted_class.find(p);
        return it != voted_class.end() && it->second >= K_st;
    };

    // Steps 7-8 (open mode): cluster unknown embeddings, revert noise pixels.
    std::vector<HolisticOutput::InstanceInfo> unknown_infos;
    Grid<uint16_t> unknown_instance(H, W, 0);
    if (mode == InferMode::Open) {
        std::vector<int> unknown_px;
        for (int i = 0; i < n_px; ++i)
            if (out.unknown_mask.data[i]) unknown_px.push_back(i);
        if (!unknown_px.empty()) {
            Eigen::MatrixXd points(unknown_px.size(), F);
            for (size_t j = 0; j < unknown_px.size(); ++j)
                for (int f = 0; f < F; ++f)
                    points(j, f) = static_cast<double>(
                        pred.embed.data[static_cast<size_t>(unknown_px[j]) * F + f]);
            ClusterResult clusters = dbscan(points, dbscan_params);
            for (size_t j = 0; j < unknown_px.size(); ++j) {
                const int i = unknown_px[j];
                if (clusters.labels[j] >= 0) {
                    out.semantic_map.data[i] = unknown_id;
                    unknown_instance.data[i] = static_cast<uint16_t>(clusters.labels[j] + 1);
                    continue;
                }
                // DBSCAN noise: revert to the semantic-branch argmax class.
                out.unknown_mask.data[i] = 0;
                int cls = argmax.data[i];
                if (cls < K_st) {
                    out.semantic_map.data[i] = static_cast<uint8_t>(cls);
                    continue;
                }
                // thing-class pixel: join the best-scoring surviving instance,
                // else fall back to the best-scoring stuff class, else to the
                // best stuff logit.
                for (int f = 0; f < F; ++f)
                    phi[f] = static_cast<double>(pred.embed.data[static_cast<size_t>(i) * F + f]);
                int best_thing = -1;
                double best_thing_score = -std::numeric_limits<double>::infinity();
                for (int p : thing_protos) {
                    if (!surviving_thing(p)) continue;
                    double score = -(phi - protos[p].mu).squaredNorm() / (2.0 * protos[p].var);
                    if (score > best_thing_score) {
                        best_thing_score = score;
                        best_thing = p;
                    }
                }
                if (best_thing >= 0) {
                    out.semantic_map.data[i] = static_cast<uint8_t>(voted_class[best_thing]);
                    raw_instance.data[i] = static_cast<uint16_t>(best_thing + 1);
                    continue;
                }
                int best_stuff = -1;
                double best_stuff_score = -std::numeric_limits<double>::infinity();
                for (int p : stuff_protos) {
                    double score = -(phi - protos[p].mu).squaredNorm() / (2.0 * protos[p].var);
                    if (score > best_stuff_score) {
                        best_stuff_score = score;
                        best_stuff = p;
                    }
                }
                if (best_stuff >= 0) {
                    out.semantic_map.data[i] = static_cast<uint8_t>(protos[best_stuff].class_id);
                } else {
                    int cls_fb = 0;
                    for (int k = 1; k < K_st; ++k)
                        if (pred.sem_logits.data[static_cast<size_t>(i) * K + k] >
                            pred.sem_logits.data[static_cast<size_t>(i) * K + cls_fb])
                            cls_fb = k;
                    out.semantic_map.data[i] = static_cast<uint8_t>(cls_fb);
                }
            }
        }
    }

    // Step: dense renumber in raster order of first occurrence; thing and
    // unknown instances share one id space.
    out.instance_map = Grid<uint16_t>(H, W, 0);
    std::map<std::pair<int, int>, uint16_t> renumber;  // (kind, raw id) -> dense id
    uint16_t next_id = 1;
    for (int i = 0; i < n_px; ++i) {
        int kind;
        int raw;
        if (unknown_instance.data[i] != 0) {
            kind = 1;
            raw = unknown_instance.data[i];
        } else if (raw_instance.data[i] != 0) {
            kind = 0;
            raw = raw_instance.data[i];
        } else {
            continue;
        }
        auto [it, fresh] = renumber.emplace(std::make_pair(kind, raw), next_id);
        if (fresh) ++next_id;
        out.instance_map.data[i] = it->second;
    }

    // invariant: unknown_mask holds exactly where the unknown class is reported
    for (int i = 0; i < n_px; ++i)
        out.unknown_mask.data[i] = out.semantic_map.data[i] == unknown_id ? 1 : 0;
    detail::finalize_instances(out, K);
    return out;
}

/// Pure function of (params, image, stats, dbscan, mode).
inline HolisticOutput holistic_infer(const ModelParams& params, const Field<uint8_t>& image,
                                     const UncertaintyStats& stats,
                                     const DbscanParams& dbscan_params, InferMode mode,
                                     const NmsParams& nms = {}) {
    DensePrediction pred = forward(params, image);
    return holistic_infer_prediction(pred, stats, dbscan_params, mode, params.K_st, nms);
}

}  // namespace holoseg
