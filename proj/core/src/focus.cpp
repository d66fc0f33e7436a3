#include "synbind/focus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace synbind {

using nlohmann::json;

// Keys cubic convolution kernel with a = -0.5.
static float cubic_weight(float x) {
    constexpr float a = -0.5f;
    x = std::fabs(x);
    if (x < 1.f) return ((a + 2.f) * x - (a + 3.f)) * x * x + 1.f;
    if (x < 2.f) return ((a * x - 5.f * a) * x + 8.f * a) * x - 4.f * a;
    return 0.f;
}

// One axis of the separable pass: resample `len_in` samples to `len_out`
// with half-pixel centers; returns per-output (base index, 4 weights).
namespace {
struct CubicTaps {
    std::vector<int> base;
    std::vector<std::array<float, 4>> weights;
};
}  // namespace

static CubicTaps make_taps(int len_in, int len_out) {
    CubicTaps taps;
    taps.base.resize(len_out);
    taps.weights.resize(len_out);
    const float scale = static_cast<float>(len_in) / static_cast<float>(len_out);
    for (int o = 0; o < len_out; ++o) {
        float src = (o + 0.5f) * scale - 0.5f;
        int i0    = static_cast<int>(std::floor(src)) - 1;
        taps.base[o] = i0;
        for (int k = 0; k < 4; ++k) taps.weights[o][k] = cubic_weight(src - (i0 + k));
    }
    return taps;
}

static int clamp_index(int i, int len) { return std::clamp(i, 0, len - 1); }

Mat resize_bicubic(const Mat& channel, int out_h, int out_w) {
    const int in_h = static_cast<int>(channel.rows());
    const int in_w = static_cast<int>(channel.cols());
    if (in_h <= 0 || in_w <= 0 || out_h <= 0 || out_w <= 0)
        throw ShapeError("resize_bicubic: empty input or output grid");
    if (in_h == out_h && in_w == out_w) return channel;

    CubicTaps tx = make_taps(in_w, out_w);
    Mat horiz(in_h, out_w);
    for (int y = 0; y < in_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            float acc = 0.f;
            for (int k = 0; k < 4; ++k)
                acc += tx.weights[x][k] * channel(y, clamp_index(tx.base[x] + k, in_w));
            horiz(y, x) = acc;
        }

    CubicTaps ty = make_taps(in_h, out_h);
    Mat out(out_h, out_w);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            float acc = 0.f;
            for (int k = 0; k < 4; ++k)
                acc += ty.weights[y][k] * horiz(clamp_index(ty.base[y] + k, in_h), x);
            out(y, x) = acc;
        }
    return out;
}

AveragedAttention aggregate_attention(const AttentionRecord& record) {
    if (record.entries.empty()) throw ParamError("aggregate_attention: empty attention record");
    const int n = static_cast<int>(record.entries[0].map.cols());
    int H = 0, W = 0;
    for (const auto& e : record.entries) {
        if (e.map.cols() != n)
            throw ShapeError("aggregate_attention: inconsistent token count across entries (" +
                             std::to_string(e.map.cols()) + " vs " + std::to_string(n) + ")");
        if (e.map.rows() != static_cast<Eigen::Index>(e.h) * e.w)
            throw ShapeError("aggregate_attention: map rows do not match the spatial dims");
        if (static_cast<long>(e.h) * e.w > static_cast<long>(H) * W) {
            H = e.h;
            W = e.w;
        }
    }

    AveragedAttention avg;
    avg.h      = H;
    avg.w      = W;
    avg.a_star = Mat::Zero(H * W, n);
    Mat chan(H, W);
    for (const auto& e : record.entries) {
        for (int j = 0; j < n; ++j) {
            // column j as an (h, w) grid
            Mat grid(e.h, e.w);
            for (int y = 0; y < e.h; ++y)
                for (int x = 0; x < e.w; ++x)
                    grid(y, x) = e.map(y * e.w + x, j);
            chan = resize_bicubic(grid, H, W);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    avg.a_star(y * W + x, j) += chan(y, x);
        }
    }
    avg.a_star /= static_cast<float>(record.entries.size());
    return avg;
}

// Serial accumulation everywhere: the mask is exact-compare checked against
// a naive evaluation, so summation order is part of the contract.
FocusMask compute_focus_mask(const AveragedAttention& a_star, const DependencyMatrix& dep, float threshold) {
    if (threshold < 0.f || threshold > 1.f)
        throw ParamError("focus mask threshold must lie in [0,1], got " + std::to_string(threshold));
    const int pixels = static_cast<int>(a_star.a_star.rows());
    const int n      = static_cast<int>(a_star.a_star.cols());
    if (dep.n() != n)
        throw ShapeError("focus mask: dependency matrix is " + std::to_string(dep.n()) +
                         " tokens, attention has " + std::to_string(n));
    for (int i = 0; i < pixels; ++i)
        for (int j = 0; j < n; ++j)
            if (std::isnan(a_star.a_star(i, j)))
                throw DataError("focus mask: NaN in averaged attention at pixel " + std::to_string(i) +
                                ", token " + std::to_string(j));

    FocusMask fm;
    fm.h = a_star.h;
    fm.w = a_star.w;
    fm.threshold_used = threshold;
    fm.mask = Mat::Zero(pixels, n);

    std::vector<float> column(pixels);
    for (int j = 0; j < n; ++j) {
        bool has_dependency = false;
        for (int k = 0; k < n; ++k)
            if (dep.d(j, k) != 0.f) has_dependency = true;
        if (!has_dependency) continue;  // unconstrained token, leave unmasked

        // column j of A* D^T
        for (int i = 0; i < pixels; ++i) {
            float acc = 0.f;
            for (int k = 0; k < n; ++k) acc += a_star.a_star(i, k) * dep.d(j, k);
            column[i] = acc;
        }
        float lo = column[0], hi = column[0];
        for (int i = 1; i < pixels; ++i) {
            lo = std::min(lo, column[i]);
            hi = std::max(hi, column[i]);
        }
        if (hi == lo) continue;  // uniform map carries no localization signal

        for (int i = 0; i < pixels; ++i) {
            float normalized = (column[i] - lo) / (hi - lo);
            if (normalized < threshold) fm.mask(i, j) = kNegInf;
        }
    }
    return fm;
}

Mat cross_attention(const Mat& queries, const Mat& keys, const Mat& values) {
    FocusMask none;
    none.mask = Mat::Zero(queries.rows(), keys.rows());
    none.h    = static_cast<int>(queries.rows());
    none.w    = 1;
    return focused_attention(queries, keys, values, none);
}

Mat focused_attention(const Mat& queries, const Mat& keys, const Mat& values, const FocusMask& mask) {
    const int d = static_cast<int>(queries.cols());
    if (keys.cols() != d) throw ShapeError("focused_attention: query/key feature dims differ");
    if (values.rows() != keys.rows()) throw ShapeError("focused_attention: key/value token counts differ");
    if (mask.mask.rows() != queries.rows() || mask.mask.cols() != keys.rows())
        throw ShapeError("focused_attention: mask is " + std::to_string(mask.mask.rows()) + "x" +
                         std::to_string(mask.mask.cols()) + ", expected " + std::to_string(queries.rows()) +
                         "x" + std::to_string(keys.rows()));

    const float inv_sqrt_d = 1.f / std::sqrt(static_cast<float>(d));
    Mat logits = (mask.mask + queries * keys.transpose()) * inv_sqrt_d;

    for (int i = 0; i < logits.rows(); ++i) {
        float row_max = kNegInf;
        for (int j = 0; j < logits.cols(); ++j) row_max = std::max(row_max, logits(i, j));
        if (std::isinf(row_max))
            throw ParamError("focused_attention: mask forbids every token for query row " + std::to_string(i));
        float sum = 0.f;
        for (int j = 0; j < logits.cols(); ++j) {
            float e = std::exp(logits(i, j) - row_max);  // exp(-inf) == 0 exactly
            logits(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < logits.cols(); ++j) logits(i, j) /= sum;
    }
    return logits * values;
}

FocusMask project_mask(const FocusMask& mask, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw ShapeError("project_mask: empty target grid");
    if (out_h > mask.h || out_w > mask.w)
        throw ShapeError("project_mask: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " exceeds source " + std::to_string(mask.h) + "x" + std::to_string(mask.w));
    if (mask.h % out_h != 0 || mask.w % out_w != 0)
        throw ShapeError("project_mask: target dims must divide source dims");

    const int fy = mask.h / out_h;
    const int fx = mask.w / out_w;
    const int n  = static_cast<int>(mask.mask.cols());

    FocusMask out;
    out.h = out_h;
    out.w = out_w;
    out.threshold_used = mask.threshold_used;
    out.mask = Mat::Constant(out_h * out_w, n, kNegInf);
    for (int j = 0; j < n; ++j)
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) {
                float best = kNegInf;
                for (int sy = y * fy; sy < (y + 1) * fy; ++sy)
                    for (int sx = x * fx; sx < (x + 1) * fx; ++sx)
                        best = std::max(best, mask.mask(sy * mask.w + sx, j));
                out.mask(y * out_w + x, j) = best;
            }
    return out;
}

// ------------------------------------------------------------ dump format

void write_attention_dump(const std::string& dir, const AttentionDump& dump) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    json manifest;
    manifest["tokens"] = dump.token_strings;
    manifest["n"]      = dump.record.token_count();
    json entries       = json::array();
    for (size_t i = 0; i < dump.record.entries.size(); ++i) {
        const auto& e    = dump.record.entries[i];
        std::string file = "map_" + std::to_string(i) + ".f32";
        write_f32_mat((fs::path(dir) / file).string(), e.map);
        entries.push_back({{"layer", e.layer}, {"t", e.timestep}, {"h", e.h}, {"w", e.w}, {"file", file}});
    }
    manifest["entries"] = entries;
    if (dump.has_averaged) {
        write_f32_mat((fs::path(dir) / "a_star.f32").string(), dump.averaged.a_star);
        manifest["a_star"] = {{"h", dump.averaged.h}, {"w", dump.averaged.w}, {"file", "a_star.f32"}};
    }
    if (dump.has_mask) {
        // -inf serializes fine as a float bit pattern in the raw file
        write_f32_mat((fs::path(dir) / "mask.f32").string(), dump.mask.mask);
        manifest["mask"] = {{"h", dump.mask.h},
                            {"w", dump.mask.w},
                            {"file", "mask.f32"},
                            {"threshold", dump.mask.threshold_used}};
    }
    atomic_write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2));
}

AttentionDump read_attention_dump(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw DataError("attention dump: missing manifest.json in " + dir);
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("attention dump manifest: ") + e.what());
    }

    AttentionDump dump;
    dump.token_strings = manifest.value("tokens", std::vector<std::string>{});
    int n              = manifest.value("n", 0);
    if (n <= 0) throw SchemaError("attention dump manifest: field 'n' missing or not positive");
    for (const auto& e : manifest["entries"]) {
        AttentionEntry entry;
        entry.layer    = e.at("layer").get<int>();
        entry.timestep = e.at("t").get<int>();
        entry.h        = e.at("h").get<int>();
        entry.w        = e.at("w").get<int>();
        entry.map = read_f32_mat((fs::path(dir) / e.at("file").get<std::string>()).string(),
                                 entry.h * entry.w, n);
        dump.record.entries.push_back(std::move(entry));
    }
    if (manifest.contains("a_star")) {
        const auto& a    = manifest["a_star"];
        dump.averaged.h  = a.at("h").get<int>();
        dump.averaged.w  = a.at("w").get<int>();
        dump.averaged.a_star =
            read_f32_mat((fs::path(dir) / a.at("file").get<std::string>()).string(),
                         dump.averaged.h * dump.averaged.w, n);
        dump.has_averaged = true;
    }
    if (manifest.contains("mask")) {
        const auto& m = manifest["mask"];
        dump.mask.h   = m.at("h").get<int>();
        dump.mask.w   = m.at("w").get<int>();
        dump.mask.threshold_used = m.at("threshold").get<float>();
        dump.mask.mask = read_f32_mat((fs::path(dir) / m.at("file").get<std::string>()).string(),
                                      dump.mask.h * dump.mask.w, n);
        dump.has_mask = true;
    }
    return dump;
}

}  // namespace synbind
