#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <cmath>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace holoseg {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DomainError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};

/// Dense row-major H x W grid.
template <typename T>
struct Grid {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    const T& at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return data.size(); }
    bool same_shape(const Grid& o) const { return rows == o.rows && cols == o.cols; }
};

/// Dense row-major H x W x C field (channels innermost).
template <typename T>
struct Field {
    int rows = 0;
    int cols = 0;
    int channels = 0;
    std::vector<T> data;

    Field() = default;
    Field(int r, int c, int ch, T fill = T{})
        : rows(r), cols(c), channels(ch), data(static_cast<size_t>(r) * c * ch, fill) {}

    T& at(int r, int c, int k) { return data[(static_cast<size_t>(r) * cols + c) * channels + k]; }
    const T& at(int r, int c, int k) const {
        return data[(static_cast<size_t>(r) * cols + c) * channels + k];
    }
    T* pixel(int r, int c) { return data.data() + (static_cast<size_t>(r) * cols + c) * channels; }
    const T* pixel(int r, int c) const {
        return data.data() + (static_cast<size_t>(r) * cols + c) * channels;
    }
    size_t pixel_count() const { return static_cast<size_t>(rows) * cols; }
};

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Derives an independent stream seed from a base seed and a stream index.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    uint64_t s = base ^ (0x2545f4914f6cdd1dULL * (stream + 1));
    splitmix64(s);
    return splitmix64(s);
}

/// Deterministic RNG: std::mt19937_64 engine (bit-identical across platforms)
/// with hand-rolled transforms, since the std distributions are
/// implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), n >= 1, by rejection on masked bits.
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) throw DomainError("uniform_int: n must be >= 1");
        uint64_t mask = ~uint64_t{0};
        uint64_t limit = n - 1;
        int bits = 0;
        while (limit >> bits) ++bits;
        mask = bits >= 64 ? mask : ((uint64_t{1} << bits) - 1);
        for (;;) {
            uint64_t v = engine_() & mask;
            if (v < n) return v;
        }
    }

    int uniform_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(uniform_int(static_cast<uint64_t>(hi - lo + 1)));
    }

    /// Standard normal via Box-Muller, pair cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_int(static_cast<uint64_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

/// Fixed-order pairwise summation; bit-stable regardless of how callers
/// parallelize the production of the addends.
inline double pairwise_sum(const double* x, size_t n) {
    if (n <= 16) {
        double s = 0.0;
        for (size_t i = 0; i < n; ++i) s += x[i];
        return s;
    }
    size_t half = n / 2;
    return pairwise_sum(x, half) + pairwise_sum(x + half, n - half);
}

inline double pairwise_sum(std::span<const double> x) { return pairwise_sum(x.data(), x.size()); }

/// Worker count: explicit request, else HOLOSEG_THREADS, else hardware (0 = auto).
inline int thread_budget(int requested = 0) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("HOLOSEG_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs fn(i) for i in [0, n). Work items must be independent; callers that
/// reduce must do so in fixed index order after the join.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn, int workers = 0) {
    int w = thread_budget(workers);
    if (w <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    w = static_cast<int>(std::min<size_t>(w, n));
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    pool.reserve(w);
    for (int t = 0; t < w; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= n || failed.load()) return;
                try {
                    fn(i);
                } catch (...) {
                    if (!failed.exchange(true)) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failed.load()) std::rethrow_exception(error);
}

}  // namespace holoseg
