#pragma once

#include <deque>
#include <vector>

#include <Eigen/Dense>

#include "holoseg/core.hpp"

namespace holoseg {

struct DbscanParams {
    double eps = 0.5;
    int min_pts = 4;

    void validate() const {
        if (!(eps > 0)) throw ConfigError("dbscan: eps must be > 0");
        if (min_pts < 1) throw ConfigError("dbscan: min_pts must be >= 1");
    }
};

struct ClusterResult {
    std::vector<int> labels;  // -1 = noise, clusters numbered 0..n_clusters-1
    int n_clusters = 0;
};

namespace detail {

/// Classic density-reachability expansion over an abstract neighborhood
/// query. Expansion follows input order, so cluster numbering and
/// border-point ties are deterministic for a fixed input order.
template <typename RegionQuery>
ClusterResult dbscan_impl(int n, int min_pts, RegionQuery&& region_query) {
    ClusterResult result;
    result.labels.assign(n, -2);  // -2 = unvisited
    if (n == 0) return result;

    int cluster = 0;
    for (int i = 0; i < n; ++i) {
        if (result.labels[i] != -2) continue;
        std::vector<int> neighbors = region_query(i);
        if (static_cast<int>(neighbors.size()) < min_pts) {
            result.labels[i] = -1;
            continue;
        }
        const int c = cluster++;
        result.labels[i] = c;
        std::deque<int> seeds(neighbors.begin(), neighbors.end());
        while (!seeds.empty()) {
            int q = seeds.front();
            seeds.pop_front();
            if (result.labels[q] == -1) result.labels[q] = c;  // border point
            if (result.labels[q] != -2) continue;
            result.labels[q] = c;
            std::vector<int> qn = region_query(q);
            if (static_cast<int>(qn.size()) >= min_pts)
                seeds.insert(seeds.end(), qn.begin(), qn.end());
        }
    }
    result.n_clusters = cluster;
    return result;
}

}  // namespace detail

/// DBSCAN with Euclidean distance and a closed eps-ball (d <= eps, self
/// included in the core count). Exact O(n^2) neighborhoods; no spatial index.
inline ClusterResult dbscan(const Eigen::MatrixXd& points, const DbscanParams& params) {
    params.validate();
    const int n = static_cast<int>(points.rows());
    const double eps_sq = params.eps * params.eps;
    return detail::dbscan_impl(n, params.min_pts, [&](int i) {
        std::vector<int> out;
        for (int j = 0; j < n; ++j)
            if ((points.row(i) - points.row(j)).squaredNorm() <= eps_sq) out.push_back(j);
        return out;
    });
}

/// Same semantics over a precomputed squared-distance matrix (used by the
/// grid search, which reuses one matrix across many (eps, min_pts) cells).
inline ClusterResult dbscan_from_sq_distances(const Eigen::MatrixXd& dist_sq,
                                              const DbscanParams& params) {
    params.validate();
    if (dist_sq.rows() != dist_sq.cols()) throw ConfigError("dbscan: distance matrix not square");
    const int n = static_cast<int>(dist_sq.rows());
    const double eps_sq = params.eps * params.eps;
    return detail::dbscan_impl(n, params.min_pts, [&](int i) {
        std::vector<int> out;
        for (int j = 0; j < n; ++j)
            if (dist_sq(i, j) <= eps_sq) out.push_back(j);
        return out;
    });
}

/// Core-point set depends only on geometry (used by property tests).
inline std::vector<bool> dbscan_core_points(const Eigen::MatrixXd& points,
                                            const DbscanParams& params) {
    params.validate();
    const int n = static_cast<int>(points.rows());
    const double eps_sq = params.eps * params.eps;
    std::vector<bool> core(n, false);
    for (int i = 0; i < n; ++i) {
        int count = 0;
        for (int j = 0; j < n; ++j)
            if ((points.row(i) - points.row(j)).squaredNorm() <= eps_sq) ++count;
        core[i] = count >= params.min_pts;
    }
    return core;
}

}  // namespace holoseg
