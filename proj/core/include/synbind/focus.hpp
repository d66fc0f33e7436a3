#pragma once

#include <limits>
#include <string>
#include <vector>

#include "synbind/errors.hpp"
#include "synbind/mat.hpp"
#include "synbind/syntax.hpp"

namespace synbind {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

// One recorded cross-attention map: rows are pixels of an (h x w) grid in
// row-major order, columns are prompt tokens. Maps are head-averaged, so
// every row sums to 1.
struct AttentionEntry {
    int layer    = 0;
    int timestep = 0;
    int h = 0, w = 0;
    Mat map;  // (h*w) x n
};

struct AttentionRecord {
    std::vector<AttentionEntry> entries;

    int token_count() const { return entries.empty() ? 0 : static_cast<int>(entries[0].map.cols()); }
};

struct AveragedAttention {
    Mat a_star;  // (H*W) x n
    int h = 0, w = 0;
};

struct FocusMask {
    Mat mask;  // (h*w) x n, entries are 0 or -inf
    int h = 0, w = 0;
    float threshold_used = 0.f;
};

// Separable cubic-convolution resampling (Keys kernel, a = -0.5) with
// half-pixel sample centers and clamped borders. `channel` is h x w.
Mat resize_bicubic(const Mat& channel, int out_h, int out_w);

// Reshape every map to its grid, resize each token channel to the largest
// recorded grid, and average all entries with equal weight.
AveragedAttention aggregate_attention(const AttentionRecord& record);

// B = A* D^T; per token column j, normalize B over pixels to [0,1] and
// mask cells below the threshold. Columns of tokens with no dependencies
// (all-zero D rows) are left fully unmasked, as is a column whose min and
// max coincide.
FocusMask compute_focus_mask(const AveragedAttention& a_star, const DependencyMatrix& dep, float threshold);

// softmax((F_mask + Q K^T) / sqrt(d)) V with the softmax over tokens per
// query row. Masked cells get exactly zero weight. Throws if a query row
// has every token forbidden.
Mat focused_attention(const Mat& queries, const Mat& keys, const Mat& values, const FocusMask& mask);

// Plain scaled dot-product cross-attention (the unmasked baseline).
Mat cross_attention(const Mat& queries, const Mat& keys, const Mat& values);

// Max-pool each token channel down to (out_h, out_w); a target cell is
// unmasked when any covered source cell is unmasked. Target dims must
// divide the source dims.
FocusMask project_mask(const FocusMask& mask, int out_h, int out_w);

// Attention dump directory: manifest.json plus one raw little-endian
// float32 file per map.
struct AttentionDump {
    std::vector<std::string> token_strings;
    AttentionRecord record;
    AveragedAttention averaged;       // empty a_star when absent
    FocusMask mask;                   // empty mask when absent
    bool has_averaged = false;
    bool has_mask     = false;
};

void write_attention_dump(const std::string& dir, const AttentionDump& dump);
AttentionDump read_attention_dump(const std::string& dir);

}  // namespace synbind
