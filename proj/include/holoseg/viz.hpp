#pragma once

#include <cmath>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "holoseg/core.hpp"
#include "holoseg/model.hpp"
#include "holoseg/scene.hpp"

namespace holoseg {

/// Semantic overlay: catalog colors for known ids, white for the unknown id,
/// black for ignore.
inline Field<uint8_t> viz_semantic(const Grid<uint8_t>& sem, const ClassCatalog& catalog) {
    Field<uint8_t> img(sem.rows, sem.cols, 3, 0);
    const int K = catalog.known_count();
    for (size_t i = 0; i < sem.size(); ++i) {
        int id = sem.data[i];
        Rgb color{0, 0, 0};
        if (id == catalog.unknown_report_id()) {
            color = {1.0, 1.0, 1.0};
        } else if (catalog.is_stuff_id(id)) {
            color = catalog.stuff[id].color;
        } else if (catalog.is_known_thing_id(id)) {
            color = catalog.known_things[id - catalog.stuff_count()].color;
        } else if (catalog.is_unknown_id(id)) {
            color = catalog.unknown_things[id - K].color;
        }
        for (int k = 0; k < 3; ++k)
            img.data[i * 3 + k] = static_cast<uint8_t>(std::lround(color[k] * 255.0));
    }
    return img;
}

/// Instance overlay: id-hashed colors, black background.
inline Field<uint8_t> viz_instances(const Grid<uint16_t>& inst) {
    Field<uint8_t> img(inst.rows, inst.cols, 3, 0);
    for (size_t i = 0; i < inst.size(); ++i) {
        if (inst.data[i] == 0) continue;
        uint64_t h = inst.data[i];
        h = splitmix64(h);
        // keep channels away from black so instances stay visible
        img.data[i * 3 + 0] = static_cast<uint8_t>(64 + (h & 0xbf));
        img.data[i * 3 + 1] = static_cast<uint8_t>(64 + ((h >> 8) & 0xbf));
        img.data[i * 3 + 2] = static_cast<uint8_t>(64 + ((h >> 16) & 0xbf));
    }
    return img;
}

/// Uncertainty heat ramp: dark blue -> red -> yellow over u in [0, 1].
inline Field<uint8_t> viz_uncertainty(const Grid<double>& u) {
    Field<uint8_t> img(u.rows, u.cols, 3, 0);
    auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
    for (size_t i = 0; i < u.size(); ++i) {
        double v = std::clamp(u.data[i], 0.0, 1.0);
        double r, g, b;
        if (v < 0.5) {
            double t = v / 0.5;
            r = lerp(0.08, 0.85, t);
            g = lerp(0.10, 0.15, t);
            b = lerp(0.30, 0.10, t);
        } else {
            double t = (v - 0.5) / 0.5;
            r = lerp(0.85, 1.0, t);
            g = lerp(0.15, 0.95, t);
            b = lerp(0.10, 0.15, t);
        }
        img.data[i * 3 + 0] = static_cast<uint8_t>(std::lround(r * 255.0));
        img.data[i * 3 + 1] = static_cast<uint8_t>(std::lround(g * 255.0));
        img.data[i * 3 + 2] = static_cast<uint8_t>(std::lround(b * 255.0));
    }
    return img;
}

/// Embedding field to RGB: whitening plus a 3-component linear projection
/// (principal axes of this image's embeddings), each channel squashed through
/// a logistic. Deterministic: eigenvector signs are fixed so the largest-
/// magnitude coefficient is positive.
template <typename S>
Field<uint8_t> viz_embeddings(const Field<S>& embed) {
    const int F = embed.channels;
    const long n = static_cast<long>(embed.pixel_count());
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(F);
    for (long i = 0; i < n; ++i)
        for (int f = 0; f < F; ++f) mean[f] += static_cast<double>(embed.data[i * F + f]);
    mean /= static_cast<double>(n);

    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(F, F);
    Eigen::VectorXd x(F);
    for (long i = 0; i < n; ++i) {
        for (int f = 0; f < F; ++f) x[f] = static_cast<double>(embed.data[i * F + f]) - mean[f];
        cov += x * x.transpose();
    }
    cov /= static_cast<double>(n);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const int n_comp = std::min(3, F);
    Eigen::MatrixXd proj(F, 3);
    proj.setZero();
    for (int c = 0; c < n_comp; ++c) {
        // eigenvalues ascend; take the top ones
        Eigen::VectorXd v = eig.eigenvectors().col(F - 1 - c);
        int arg = 0;
        for (int f = 1; f < F; ++f)
            if (std::abs(v[f]) > std::abs(v[arg])) arg = f;
        if (v[arg] < 0) v = -v;
        double scale = eig.eigenvalues()[F - 1 - c];
        proj.col(c) = v / std::sqrt(std::max(scale, 1e-12));
    }

    Field<uint8_t> img(embed.rows, embed.cols, 3, 0);
    for (long i = 0; i < n; ++i) {
        for (int f = 0; f < F; ++f) x[f] = static_cast<double>(embed.data[i * F + f]) - mean[f];
        Eigen::Vector3d z = proj.transpose() * x;
        for (int c = 0; c < 3; ++c) {
            double channel = 1.0 / (1.0 + std::exp(-z[c]));
            img.data[i * 3 + c] = static_cast<uint8_t>(std::lround(channel * 255.0));
        }
    }
    return img;
}

}  // namespace holoseg
