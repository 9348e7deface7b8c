#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pbkd {

// Raised when tensor shapes do not line up for an operation.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Dense 4-D array in N-C-H-W order with an optional gradient buffer.
// float carries training state; double is used by the gradient checker.
template <typename T>
struct Tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> data;
    std::vector<T> grad;  // empty until ensure_grad()

    Tensor4() = default;
    Tensor4(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), data(checked_volume(n_, c_, h_, w_), T(0)) {}

    // Validates before any allocation is sized, so bad dims cannot overflow
    // into a giant vector request.
    static size_t checked_volume(int n, int c, int h, int w) {
        if (n <= 0 || c <= 0 || h <= 0 || w <= 0)
            throw ShapeError("Tensor4: all dims must be positive, got (" + std::to_string(n) +
                             "," + std::to_string(c) + "," + std::to_string(h) + "," +
                             std::to_string(w) + ")");
        return static_cast<size_t>(n) * c * h * w;
    }

    size_t size() const { return data.size(); }

    size_t idx(int i, int j, int y, int x) const {
        return ((static_cast<size_t>(i) * c + j) * h + y) * w + x;
    }
    T& at(int i, int j, int y, int x) { return data[idx(i, j, y, x)]; }
    const T& at(int i, int j, int y, int x) const { return data[idx(i, j, y, x)]; }

    bool same_shape(const Tensor4& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    std::string shape_str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) grad.assign(grad.size(), T(0));
    }
    void drop_grad() { grad.clear(); }
};

using Tensor = Tensor4<float>;

template <typename To, typename From>
Tensor4<To> tensor_cast(const Tensor4<From>& src) {
    Tensor4<To> out(src.n, src.c, src.h, src.w);
    for (size_t i = 0; i < src.data.size(); ++i) out.data[i] = static_cast<To>(src.data[i]);
    return out;
}

inline void require_same_shape(const char* what, int an, int ac, int ah, int aw,
                               int bn, int bc, int bh, int bw) {
    if (an != bn || ac != bc || ah != bh || aw != bw)
        throw ShapeError(std::string(what) + ": shape (" + std::to_string(an) + "," +
                         std::to_string(ac) + "," + std::to_string(ah) + "," + std::to_string(aw) +
                         ") vs (" + std::to_string(bn) + "," + std::to_string(bc) + "," +
                         std::to_string(bh) + "," + std::to_string(bw) + ")");
}

// 64-bit FNV-1a over raw bytes; used for weight-file identity checks.
inline uint64_t fnv1a64(const void* bytes, size_t len, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    uint64_t hash = seed;
    for (size_t i = 0; i < len; ++i) {
        hash ^= p[i];
        hash *= 0x100000001b3ull;
    }
    return hash;
}

// splitmix64; used to derive independent per-task RNG seeds.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace pbkd
