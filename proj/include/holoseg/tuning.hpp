#pragma once

#include <algorithm>
#include <vector>

#include "holoseg/clustering.hpp"
#include "holoseg/inference.hpp"
#include "holoseg/metrics.hpp"
#include "holoseg/model.hpp"
#include "holoseg/scene.hpp"

namespace holoseg {

struct TuneCell {
    double eps = 0;
    int min_pts = 0;
    double pq_known_things = 0;
    bool populated = false;
};

struct TuneResult {
    DbscanParams selected;
    std::vector<TuneCell> table;

    ordered_json to_json() const {
        ordered_json cells = ordered_json::array();
        for (const auto& c : table)
            cells.push_back({{"eps", c.eps},
                             {"min_pts", c.min_pts},
                             {"pq_known_things", c.populated ? ordered_json(c.pq_known_things)
                                                             : ordered_json(nullptr)}});
        return ordered_json{{"selected", {{"eps", selected.eps}, {"min_pts", selected.min_pts}}},
                            {"table", cells}};
    }
};

namespace detail {

/// Instances from embeddings alone: DBSCAN over the thing-argmax pixels,
/// cluster class by majority vote of the semantic argmax, noise pixels fall
/// back to their best stuff logit. No center detection is involved.
template <typename S>
void cluster_only_maps(const DensePredictionT<S>& pred, const Grid<uint8_t>& argmax,
                       const std::vector<int>& thing_px, const Eigen::MatrixXd& dist_sq,
                       const DbscanParams& params, int K_st, Grid<uint8_t>& sem_out,
                       Grid<uint16_t>& inst_out) {
    const int H = pred.center_hat.rows, W = pred.center_hat.cols;
    const int K = pred.K;
    sem_out = Grid<uint8_t>(H, W, 0);
    inst_out = Grid<uint16_t>(H, W, 0);
    // stuff background: argmax over stuff classes only
    for (int i = 0; i < H * W; ++i) {
        int cls = argmax.data[i];
        if (cls < K_st) {
            sem_out.data[i] = static_cast<uint8_t>(cls);
        } else {
            int best = 0;
            for (int k = 1; k < K_st; ++k)
                if (pred.sem_logits.data[static_cast<size_t>(i) * K + k] >
                    pred.sem_logits.data[static_cast<size_t>(i) * K + best])
                    best = k;
            sem_out.data[i] = static_cast<uint8_t>(best);
        }
    }
    if (thing_px.empty()) return;

    ClusterResult clusters = dbscan_from_sq_distances(dist_sq, params);
    std::vector<std::vector<long>> votes(clusters.n_clusters, std::vector<long>(K, 0));
    for (size_t j = 0; j < thing_px.size(); ++j)
        if (clusters.labels[j] >= 0) ++votes[clusters.labels[j]][argmax.data[thing_px[j]]];
    std::vector<int> cluster_class(clusters.n_clusters, 0);
    for (int c = 0; c < clusters.n_clusters; ++c) {
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (votes[c][k] > votes[c][best]) best = k;
        cluster_class[c] = best;
    }
    for (size_t j = 0; j < thing_px.size(); ++j) {
        int label = clusters.labels[j];
        if (label < 0) continue;  // noise keeps the stuff fallback
        int cls = cluster_class[label];
        if (cls < K_st) continue;  // stuff-majority cluster dissolves
        sem_out.data[thing_px[j]] = static_cast<uint8_t>(cls);
        inst_out.data[thing_px[j]] = static_cast<uint16_t>(label + 1);
    }
}

}  // namespace detail

/// Appendix-style grid search: clusters the known thing-region embeddings
/// with DBSCAN only (detection ignored), scores each (eps, min_pts) cell by
/// known-thing PQ on the subset, and returns the argmax cell. Ties prefer the
/// smaller eps, then the smaller min_pts.
inline TuneResult tune_dbscan(const ModelParams& params, const std::vector<Sample>& known_subset,
                              std::vector<double> eps_grid, std::vector<int> min_pts_grid) {
    if (eps_grid.empty() || min_pts_grid.empty())
        throw ConfigError("tune_dbscan: empty parameter grid");
    for (const auto& s : known_subset)
        for (uint8_t y : s.semantic_map.data)
            if (y != kIgnoreLabel && y >= params.K)
                throw ConfigError("tune_dbscan: subset must contain only known classes");
    std::sort(eps_grid.begin(), eps_grid.end());
    std::sort(min_pts_grid.begin(), min_pts_grid.end());

    const int n = static_cast<int>(known_subset.size());
    const ClassLayout layout{params.K_st, params.K};

    // Forward passes and pairwise embedding distances once per image.
    struct PerImage {
        DensePrediction pred;
        Grid<uint8_t> argmax;
        std::vector<int> thing_px;
        Eigen::MatrixXd dist_sq;
    };
    std::vector<PerImage> images(n);
    parallel_for(static_cast<size_t>(n), [&](size_t i) {
        PerImage& im = images[i];
        im.pred = forward(params, known_subset[i].image);
        im.argmax = semantic_argmax(im.pred.sem_logits);
        for (int px = 0; px < im.argmax.rows * im.argmax.cols; ++px)
            if (layout.is_known_thing(im.argmax.data[px])) im.thing_px.push_back(px);
        const int m = static_cast<int>(im.thing_px.size());
        Eigen::MatrixXd pts(m, params.F);
        for (int j = 0; j < m; ++j)
            for (int f = 0; f < params.F; ++f)
                pts(j, f) = static_cast<double>(
                    im.pred.embed.data[static_cast<size_t>(im.thing_px[j]) * params.F + f]);
        im.dist_sq.resize(m, m);
        for (int a = 0; a < m; ++a)
            for (int b = 0; b <= a; ++b) {
                double d2 = (pts.row(a) - pts.row(b)).squaredNorm();
                im.dist_sq(a, b) = d2;
                im.dist_sq(b, a) = d2;
            }
    });

    std::vector<TuneCell> table;
    for (double eps : eps_grid)
        for (int min_pts : min_pts_grid) table.push_back({eps, min_pts, 0.0, false});

    parallel_for(table.size(), [&](size_t cell_idx) {
        TuneCell& cell = table[cell_idx];
        DbscanParams p{cell.eps, cell.min_pts};
        std::map<int, PqTally> per_class;
        for (int i = 0; i < n; ++i) {
            Grid<uint8_t> sem;
            Grid<uint16_t> inst;
            detail::cluster_only_maps(images[i].pred, images[i].argmax, images[i].thing_px,
                                      images[i].dist_sq, p, params.K_st, sem, inst);
            pq_accumulate(sem, inst, known_subset[i].semantic_map, known_subset[i].instance_map,
                          layout, per_class);
        }
        PqReport report = pq_report_from(per_class, layout);
        cell.populated = report.known_things.populated();
        cell.pq_known_things = report.known_things.pq();
    });

    TuneResult result;
    size_t best = 0;
    for (size_t i = 1; i < table.size(); ++i)
        if (table[i].pq_known_things > table[best].pq_known_things) best = i;
    // grids are sorted ascending, so the first maximum already honors the
    // smaller-eps-then-smaller-min_pts tie-break
    result.selected = {table[best].eps, table[best].min_pts};
    result.table = std::move(table);
    return result;
}

}  // namespace holoseg
