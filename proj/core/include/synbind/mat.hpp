#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "synbind/rng.hpp"

namespace synbind {

// Row-major throughout: rows are pixels / tokens / samples, columns are
// channels. Keeps im2col gathers and per-row ops cache friendly.
template <class T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using VecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Mat  = MatT<float>;
using Vec  = VecT<float>;
using MatD = MatT<double>;

template <class T>
MatT<T> randn_mat(int rows, int cols, Rng& rng, T stddev = T(1)) {
    MatT<T> m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            m(i, j) = static_cast<T>(rng.normal()) * stddev;
    return m;
}

// FNV-1a over bytes; used for config hashes in run manifests.
inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

std::string hex64(uint64_t v);

// Raw little-endian float32 array files (the dump / checkpoint payload format).
void write_f32_file(const std::string& path, const float* data, size_t count);
std::vector<float> read_f32_file(const std::string& path);
void write_f32_mat(const std::string& path, const Mat& m);
Mat read_f32_mat(const std::string& path, int rows, int cols);

// Write to <path>.tmp then rename, so partially written artifacts never
// appear under the final name.
void atomic_write_text(const std::string& path, const std::string& content);

}  // namespace synbind
