#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtqn {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowX = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

// Single-run working precision. Gradient checks instantiate the templated
// core with double instead.
using real = float;

// One environment emission: fixed-length vector, discrete codes stored as
// their numeric value, real-valued features as-is.
using Observation = std::vector<float>;

// Shape contract between an environment and the network: a fixed number of
// features, each either a discrete code with a per-feature vocabulary or a
// real value (vocab 0).
struct ObsSpec {
    std::vector<int> vocab;

    int features() const { return static_cast<int>(vocab.size()); }
    bool discrete(int f) const { return vocab[static_cast<size_t>(f)] > 0; }
    int embed_width(int embed_per_feature) const {
        int w = 0;
        for (int v : vocab) w += v > 0 ? embed_per_feature : 1;
        return w;
    }
};

// Bad configuration (shapes, unknown ids, malformed config files).
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (acting after done, empty input...).
struct contract_error : std::logic_error {
    using std::logic_error::logic_error;
};

// Operation needs state that is not there yet (e.g. sampling an empty buffer).
struct not_ready_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical failure worth aborting a run over (non-finite loss/grads).
struct diagnostic_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic RNG used everywhere. Wraps mt19937_64 but generates
// uniform ints/reals itself so draws do not depend on libstdc++'s
// distribution implementations.
class Rng {
public:
    Rng() : Rng(0x9e3779b97f4a7c15ULL) {}
    explicit Rng(uint64_t seed) : engine_(seed), seed_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, n). n >= 1.
    int uniform_int(int n) {
        if (n <= 0) throw contract_error("Rng::uniform_int: n must be >= 1");
        const uint64_t bound = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return static_cast<int>(x % bound);
    }

    // Uniform in [0, 1).
    double uniform_real() { return (engine_() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform_real(double lo, double hi) { return lo + (hi - lo) * uniform_real(); }

    bool bernoulli(double p) { return uniform_real() < p; }

    // Independent stream keyed by the original seed plus a tag; does not
    // depend on how many draws the parent has made.
    Rng derive(uint64_t tag) const {
        uint64_t x = seed_ ^ (tag + 0x9e3779b97f4a7c15ULL);
        x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27; x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return Rng(x);
    }

    void save(std::ostream& os) const {
        os << engine_ << "\n" << seed_ << "\n";
    }
    void load(std::istream& is) {
        is >> engine_ >> seed_;
        is.ignore();
    }

private:
    std::mt19937_64 engine_;
    uint64_t seed_ = 0;
};

// FNV-1a, used for checkpoint integrity.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace dtqn
