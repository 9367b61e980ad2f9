#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "holoseg/core.hpp"
#include "holoseg/special_functions.hpp"

namespace holoseg {

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct FeatureConfig {
    int patch_radius = 3;  // input window half-size
    bool use_coords = true;

    int input_dim() const {
        int side = 2 * patch_radius + 1;
        return 3 * side * side + (use_coords ? 2 : 0);
    }
    void validate() const {
        if (patch_radius < 0) throw ConfigError("feature: patch_radius must be >= 0");
    }
    bool operator==(const FeatureConfig&) const = default;
};

enum class Activation : uint8_t { Softplus = 0, Exp = 1 };

inline std::string activation_name(Activation a) {
    return a == Activation::Softplus ? "softplus" : "exp";
}
inline Activation activation_from_name(const std::string& n) {
    if (n == "softplus") return Activation::Softplus;
    if (n == "exp") return Activation::Exp;
    throw ConfigError("unknown activation: " + n);
}

struct ArchSpec {
    int K = 6;
    int K_st = 3;
    int F = 8;
    std::vector<int> trunk_widths{64, 64};
    FeatureConfig feature;
    Activation activation = Activation::Softplus;

    void validate() const {
        feature.validate();
        if (K < 2 || K_st < 1 || K_st >= K) throw ConfigError("arch: need K > K_st >= 1");
        if (F < 2) throw ConfigError("arch: embedding size F must be >= 2");
        if (trunk_widths.empty()) throw ConfigError("arch: trunk must have at least one layer");
        for (int w : trunk_widths)
            if (w < 1) throw ConfigError("arch: trunk widths must be >= 1");
    }
};

template <typename S>
struct AffineLayer {
    MatrixX<S> W;  // out x in
    VectorX<S> b;  // out
};

/// Trunk (tanh MLP over per-pixel patches) plus four heads. Head input wiring:
///   head_sem:       trunk
///   head_center:    trunk ++ sem_logits
///   head_embed:     trunk ++ center_pre ++ sem_logits
///   head_proto_mu:  trunk ++ center_pre
///   head_proto_var: trunk ++ center_pre
/// Concatenated cross-branch inputs carry no gradient (see losses).
template <typename S>
struct ModelParamsT {
    std::vector<AffineLayer<S>> trunk;
    AffineLayer<S> head_sem;
    AffineLayer<S> head_center;
    AffineLayer<S> head_embed;
    AffineLayer<S> head_proto_mu;
    AffineLayer<S> head_proto_var;
    int K = 0;
    int K_st = 0;
    int F = 0;
    FeatureConfig feature;
    Activation activation = Activation::Softplus;

    int trunk_out() const { return static_cast<int>(trunk.back().W.rows()); }

    ArchSpec arch() const {
        ArchSpec a;
        a.K = K;
        a.K_st = K_st;
        a.F = F;
        a.feature = feature;
        a.activation = activation;
        a.trunk_widths.clear();
        for (const auto& layer : trunk) a.trunk_widths.push_back(static_cast<int>(layer.W.rows()));
        return a;
    }

    /// Visits every parameter block in the fixed serialization order.
    template <typename Fn>
    void for_each_layer(Fn&& fn) {
        for (auto& layer : trunk) fn(layer);
        fn(head_sem);
        fn(head_center);
        fn(head_embed);
        fn(head_proto_mu);
        fn(head_proto_var);
    }
    template <typename Fn>
    void for_each_layer(Fn&& fn) const {
        for (const auto& layer : trunk) fn(layer);
        fn(head_sem);
        fn(head_center);
        fn(head_embed);
        fn(head_proto_mu);
        fn(head_proto_var);
    }

    size_t param_count() const {
        size_t n = 0;
        for_each_layer([&](const AffineLayer<S>& l) { n += l.W.size() + l.b.size(); });
        return n;
    }

    /// Flattens parameters in serialization order (weights row-major, then bias).
    std::vector<S> flatten() const {
        std::vector<S> out;
        out.reserve(param_count());
        for_each_layer([&](const AffineLayer<S>& l) {
            for (Eigen::Index r = 0; r < l.W.rows(); ++r)
                for (Eigen::Index c = 0; c < l.W.cols(); ++c) out.push_back(l.W(r, c));
            for (Eigen::Index i = 0; i < l.b.size(); ++i) out.push_back(l.b(i));
        });
        return out;
    }

    void unflatten(const std::vector<S>& flat) {
        if (flat.size() != param_count())
            throw ConfigError("unflatten: parameter count mismatch");
        size_t i = 0;
        for_each_layer([&](AffineLayer<S>& l) {
            for (Eigen::Index r = 0; r < l.W.rows(); ++r)
                for (Eigen::Index c = 0; c < l.W.cols(); ++c) l.W(r, c) = flat[i++];
            for (Eigen::Index j = 0; j < l.b.size(); ++j) l.b(j) = flat[i++];
        });
    }

    /// Same shapes, all parameters zero. Gradient buffers use this.
    ModelParamsT zeros_like() const {
        ModelParamsT z = *this;
        z.for_each_layer([](AffineLayer<S>& l) {
            l.W.setZero();
            l.b.setZero();
        });
        return z;
    }
};

using ModelParams = ModelParamsT<float>;

template <typename S>
ModelParamsT<S> init_params(const ArchSpec& arch, uint64_t seed) {
    arch.validate();
    ModelParamsT<S> p;
    p.K = arch.K;
    p.K_st = arch.K_st;
    p.F = arch.F;
    p.feature = arch.feature;
    p.activation = arch.activation;

    int in = arch.feature.input_dim();
    for (int w : arch.trunk_widths) {
        p.trunk.push_back({MatrixX<S>(w, in), VectorX<S>::Zero(w)});
        in = w;
    }
    const int T = in;
    p.head_sem = {MatrixX<S>(arch.K, T), VectorX<S>::Zero(arch.K)};
    p.head_center = {MatrixX<S>(1, T + arch.K), VectorX<S>::Zero(1)};
    p.head_embed = {MatrixX<S>(arch.F, T + 1 + arch.K), VectorX<S>::Zero(arch.F)};
    p.head_proto_mu = {MatrixX<S>(arch.F, T + 1), VectorX<S>::Zero(arch.F)};
    p.head_proto_var = {MatrixX<S>(1, T + 1), VectorX<S>::Zero(1)};

    Rng rng(seed);
    p.for_each_layer([&](AffineLayer<S>& l) {
        const double bound = std::sqrt(6.0 / static_cast<double>(l.W.rows() + l.W.cols()));
        for (Eigen::Index r = 0; r < l.W.rows(); ++r)
            for (Eigen::Index c = 0; c < l.W.cols(); ++c)
                l.W(r, c) = static_cast<S>(rng.uniform(-bound, bound));
    });
    return p;
}

/// Per-pixel dense outputs over a full image.
template <typename S>
struct DensePredictionT {
    Field<S> sem_logits;  // H x W x K
    Field<S> evidence;    // softplus/exp of logits, >= 0
    Field<S> alpha;       // evidence + 1
    Grid<S> center_hat;   // sigmoid of center head, in [0,1]
    Field<S> embed;       // H x W x F
    Field<S> proto_mu;    // H x W x F
    Grid<S> proto_var;    // softplus of pre-variance, > 0
    int K = 0;
    int F = 0;
};

using DensePrediction = DensePredictionT<float>;

/// Cross-branch values injected into head inputs. Training treats them as
/// constants; substituting frozen copies here turns the loss into the exact
/// function whose gradient the analytic backward pass computes.
template <typename S>
struct BranchTaps {
    const MatrixX<S>* sem_logits = nullptr;  // N x K
    const VectorX<S>* center_pre = nullptr;  // N
};

/// Activations retained for the backward pass. Pixels are addressed by a list
/// of linear indices (row * W + col) into the source image.
template <typename S>
struct ForwardCache {
    std::vector<int> pixels;              // linear pixel indices
    int image_rows = 0, image_cols = 0;
    MatrixX<S> input;                     // N x D
    std::vector<MatrixX<S>> trunk_pre;    // per layer, N x width
    std::vector<MatrixX<S>> trunk_act;    // tanh(pre)
    MatrixX<S> sem_logits;                // N x K
    VectorX<S> center_pre;                // N
    VectorX<S> center_hat;                // N
    MatrixX<S> embed;                     // N x F
    MatrixX<S> proto_mu;                  // N x F
    VectorX<S> proto_var_pre;             // N
    VectorX<S> proto_var;                 // N

    int count() const { return static_cast<int>(pixels.size()); }
    int find_pixel(int linear) const {
        for (int i = 0; i < count(); ++i)
            if (pixels[i] == linear) return i;
        return -1;
    }
};

namespace detail {

/// Flattened RGB patch around (r, c) with clamp-to-border padding, channels
/// innermost, plus normalized (row/H, col/W) when enabled.
template <typename S>
void fill_patch_row(const Field<uint8_t>& image, int r, int c, const FeatureConfig& cfg,
                    MatrixX<S>& X, int row) {
    const int R = cfg.patch_radius;
    int j = 0;
    for (int dr = -R; dr <= R; ++dr) {
        int rr = std::clamp(r + dr, 0, image.rows - 1);
        for (int dc = -R; dc <= R; ++dc) {
            int cc = std::clamp(c + dc, 0, image.cols - 1);
            const uint8_t* px = image.pixel(rr, cc);
            X(row, j++) = static_cast<S>(px[0]) / S(255);
            X(row, j++) = static_cast<S>(px[1]) / S(255);
            X(row, j++) = static_cast<S>(px[2]) / S(255);
        }
    }
    if (cfg.use_coords) {
        X(row, j++) = static_cast<S>(r) / static_cast<S>(image.rows);
        X(row, j++) = static_cast<S>(c) / static_cast<S>(image.cols);
    }
}

template <typename S>
MatrixX<S> affine(const AffineLayer<S>& l, const MatrixX<S>& in) {
    return (in * l.W.transpose()).rowwise() + l.b.transpose();
}

template <typename S>
MatrixX<S> concat_cols(const MatrixX<S>& a, const MatrixX<S>& b) {
    MatrixX<S> out(a.rows(), a.cols() + b.cols());
    out.leftCols(a.cols()) = a;
    out.rightCols(b.cols()) = b;
    return out;
}

}  // namespace detail

/// Forward pass over an explicit pixel subset. Pure function of
/// (params, image, cfg, taps).
template <typename S>
ForwardCache<S> forward_pixels(const ModelParamsT<S>& params, const Field<uint8_t>& image,
                               const FeatureConfig& cfg, std::vector<int> pixel_list,
                               const BranchTaps<S>& taps = {}) {
    if (cfg != params.feature) throw ConfigError("forward: feature config mismatch");
    const int D = cfg.input_dim();
    if (params.trunk.front().W.cols() != D)
        throw ConfigError("forward: input dim does not match trunk");

    ForwardCache<S> cache;
    cache.pixels = std::move(pixel_list);
    cache.image_rows = image.rows;
    cache.image_cols = image.cols;
    const int N = cache.count();
    cache.input.resize(N, D);
    for (int i = 0; i < N; ++i)
        detail::fill_patch_row(image, cache.pixels[i] / image.cols, cache.pixels[i] % image.cols,
                               cfg, cache.input, i);

    const MatrixX<S>* act = &cache.input;
    for (const auto& layer : params.trunk) {
        cache.trunk_pre.push_back(detail::affine(layer, *act));
        cache.trunk_act.push_back(cache.trunk_pre.back().array().tanh().matrix());
        act = &cache.trunk_act.back();
    }
    const MatrixX<S>& h = *act;

    cache.sem_logits = detail::affine(params.head_sem, h);
    const MatrixX<S>& sem_tap = taps.sem_logits ? *taps.sem_logits : cache.sem_logits;

    cache.center_pre = detail::affine(params.head_center, detail::concat_cols(h, sem_tap)).col(0);
    const VectorX<S>* center_tap_vec = taps.center_pre ? taps.center_pre : &cache.center_pre;
    MatrixX<S> center_tap = *center_tap_vec;

    cache.center_hat.resize(N);
    for (int i = 0; i < N; ++i) cache.center_hat(i) = sigmoid(cache.center_pre(i));

    MatrixX<S> h_c = detail::concat_cols(h, center_tap);
    cache.embed = detail::affine(params.head_embed, detail::concat_cols(h_c, sem_tap));
    cache.proto_mu = detail::affine(params.head_proto_mu, h_c);
    cache.proto_var_pre = detail::affine(params.head_proto_var, h_c).col(0);
    cache.proto_var.resize(N);
    for (int i = 0; i < N; ++i) {
        S v = softplus(cache.proto_var_pre(i));
        cache.proto_var(i) = v > S(0) ? v : std::numeric_limits<S>::min();
    }

    // Contract: all activations finite.
    for (int i = 0; i < N; ++i) {
        bool finite = std::isfinite(static_cast<double>(cache.center_pre(i))) &&
                      std::isfinite(static_cast<double>(cache.proto_var_pre(i)));
        for (int k = 0; k < params.K && finite; ++k)
            finite = std::isfinite(static_cast<double>(cache.sem_logits(i, k)));
        for (int f = 0; f < params.F && finite; ++f)
            finite = std::isfinite(static_cast<double>(cache.embed(i, f))) &&
                     std::isfinite(static_cast<double>(cache.proto_mu(i, f)));
        if (!finite)
            throw NumericError("forward: non-finite activation at pixel (row " +
                               std::to_string(cache.pixels[i] / image.cols) + ", col " +
                               std::to_string(cache.pixels[i] % image.cols) + ")");
    }
    return cache;
}

template <typename S>
std::vector<int> all_pixels(const Field<uint8_t>& image) {
    std::vector<int> px(static_cast<size_t>(image.rows) * image.cols);
    for (size_t i = 0; i < px.size(); ++i) px[i] = static_cast<int>(i);
    return px;
}

template <typename S>
S apply_evidence_activation(Activation a, S logit) {
    return a == Activation::Softplus ? softplus(logit) : std::exp(logit);
}

template <typename S>
DensePredictionT<S> forward(const ModelParamsT<S>& params, const Field<uint8_t>& image,
                            const FeatureConfig& cfg) {
    ForwardCache<S> cache = forward_pixels(params, image, cfg, all_pixels<S>(image));
    const int H = image.rows, W = image.cols, K = params.K, F = params.F;
    DensePredictionT<S> out;
    out.K = K;
    out.F = F;
    out.sem_logits = Field<S>(H, W, K);
    out.evidence = Field<S>(H, W, K);
    out.alpha = Field<S>(H, W, K);
    out.center_hat = Grid<S>(H, W);
    out.embed = Field<S>(H, W, F);
    out.proto_mu = Field<S>(H, W, F);
    out.proto_var = Grid<S>(H, W);
    for (int i = 0; i < cache.count(); ++i) {
        for (int k = 0; k < K; ++k) {
            S logit = cache.sem_logits(i, k);
            S ev = apply_evidence_activation(params.activation, logit);
            out.sem_logits.data[static_cast<size_t>(i) * K + k] = logit;
            out.evidence.data[static_cast<size_t>(i) * K + k] = ev;
            out.alpha.data[static_cast<size_t>(i) * K + k] = ev + S(1);
        }
        out.center_hat.data[i] = cache.center_hat(i);
        for (int f = 0; f < F; ++f) {
            out.embed.data[static_cast<size_t>(i) * F + f] = cache.embed(i, f);
            out.proto_mu.data[static_cast<size_t>(i) * F + f] = cache.proto_mu(i, f);
        }
        out.proto_var.data[i] = cache.proto_var(i);
    }
    return out;
}

template <typename S>
DensePredictionT<S> forward(const ModelParamsT<S>& params, const Field<uint8_t>& image) {
    return forward(params, image, params.feature);
}

// ---------------------------------------------------------------------------
// Checkpoint file: magic "U3HS", format version u16, little-endian header
// (K, K_st, F, patch_radius, use_coords, activation, trunk widths), payload of
// 32-bit little-endian floats in declaration order.
// ---------------------------------------------------------------------------

namespace detail {

constexpr uint16_t kCheckpointVersion = 1;

template <typename T>
void write_le(std::ostream& out, T value) {
    uint8_t bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));  // little-endian host assumed
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    uint8_t bytes[sizeof(T)];
    in.read(reinterpret_cast<char*>(bytes), sizeof(T));
    if (!in) throw IoError("checkpoint: unexpected end of file");
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const ModelParamsT<S>& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write("U3HS", 4);
    detail::write_le<uint16_t>(out, detail::kCheckpointVersion);
    detail::write_le<uint32_t>(out, static_cast<uint32_t>(params.K));
    detail::write_le<uint32_t>(out, static_cast<uint32_t>(params.K_st));
    detail::write_le<uint32_t>(out, static_cast<uint32_t>(params.F));
    detail::write_le<uint32_t>(out, static_cast<uint32_t>(params.feature.patch_radius));
    detail::write_le<uint8_t>(out, params.feature.use_coords ? 1 : 0);
    detail::write_le<uint8_t>(out, static_cast<uint8_t>(params.activation));
    detail::write_le<uint32_t>(out, static_cast<uint32_t>(params.trunk.size()));
    for (const auto& layer : params.trunk)
        detail::write_le<uint32_t>(out, static_cast<uint32_t>(layer.W.rows()));
    std::vector<S> flat = params.flatten();
    detail::write_le<uint64_t>(out, static_cast<uint64_t>(flat.size()));
    for (S v : flat) detail::write_le<float>(out, static_cast<float>(v));
    if (!out) throw IoError("checkpoint write failed: " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "U3HS", 4) != 0)
        throw IoError("checkpoint: bad magic bytes in " + path);
    uint16_t version = detail::read_le<uint16_t>(in);
    if (version != detail::kCheckpointVersion)
        throw IoError("checkpoint: unsupported format version " + std::to_string(version));

    ArchSpec arch;
    arch.K = static_cast<int>(detail::read_le<uint32_t>(in));
    arch.K_st = static_cast<int>(detail::read_le<uint32_t>(in));
    arch.F = static_cast<int>(detail::read_le<uint32_t>(in));
    arch.feature.patch_radius = static_cast<int>(detail::read_le<uint32_t>(in));
    arch.feature.use_coords = detail::read_le<uint8_t>(in) != 0;
    arch.activation = static_cast<Activation>(detail::read_le<uint8_t>(in));
    uint32_t n_layers = detail::read_le<uint32_t>(in);
    if (n_layers == 0 || n_layers > 64) throw IoError("checkpoint: implausible trunk layer count");
    arch.trunk_widths.clear();
    for (uint32_t i = 0; i < n_layers; ++i)
        arch.trunk_widths.push_back(static_cast<int>(detail::read_le<uint32_t>(in)));
    arch.validate();

    ModelParams params = init_params<float>(arch, 0);
    uint64_t count = detail::read_le<uint64_t>(in);
    if (count != params.param_count())
        throw IoError("checkpoint: payload count does not match header dims");
    std::vector<float> flat(count);
    for (uint64_t i = 0; i < count; ++i) flat[i] = detail::read_le<float>(in);
    params.unflatten(flat);
    return params;
}

/// Startup compatibility check between a loaded checkpoint and the run config.
inline void require_arch(const ModelParams& params, const ArchSpec& expected) {
    const ArchSpec got = params.arch();
    if (got.K != expected.K || got.K_st != expected.K_st || got.F != expected.F ||
        !(got.feature == expected.feature) || got.trunk_widths != expected.trunk_widths ||
        got.activation != expected.activation)
        throw ConfigError("checkpoint dimensions do not match the configured architecture");
}

}  // namespace holoseg
