#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "synbind/mat.hpp"

namespace synbind {

using Rgb = std::array<float, 3>;

// Interleaved RGB, float in [0,1], row-major from the top-left corner.
struct Image {
    int width  = 0;
    int height = 0;
    std::vector<float> pixels;  // size = width * height * 3

    Image() = default;
    Image(int w, int h, Rgb fill = {0.f, 0.f, 0.f});

    float* at(int x, int y) { return &pixels[3 * (static_cast<size_t>(y) * width + x)]; }
    const float* at(int x, int y) const { return &pixels[3 * (static_cast<size_t>(y) * width + x)]; }

    void set(int x, int y, const Rgb& c) {
        float* p = at(x, y);
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    }
    Rgb get(int x, int y) const {
        const float* p = at(x, y);
        return {p[0], p[1], p[2]};
    }

    // (H*W) x 3 matrix in [-1,1], the denoiser's pixel-space layout.
    Mat to_mat_pm1() const;
    static Image from_mat_pm1(const Mat& m, int width, int height);
};

void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// Rasterizers for the synthetic corpus: all shapes are filled, centered at
// (cx, cy) with half-extent r, drawn over whatever is already in the image.
void draw_square(Image& img, float cx, float cy, float r, const Rgb& color);
void draw_circle(Image& img, float cx, float cy, float r, const Rgb& color);
void draw_triangle(Image& img, float cx, float cy, float r, const Rgb& color);
void draw_cross(Image& img, float cx, float cy, float r, const Rgb& color);

// Viridis-like colormap for attention heatmaps; v clamped to [0,1].
Rgb colormap(float v);

// Nearest-neighbor upscale by an integer factor.
Image upscale(const Image& img, int factor);

// Lay out equally sized tiles left to right with a 1px separator.
Image hstack_tiles(const std::vector<Image>& tiles, Rgb separator = {1.f, 1.f, 1.f});
Image vstack_tiles(const std::vector<Image>& tiles, Rgb separator = {1.f, 1.f, 1.f});

// Minimal line plot: one polyline per series over shared x values.
struct PlotSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    Rgb color = {0.12f, 0.35f, 0.80f};
};
Image render_line_plot(const std::vector<PlotSeries>& series, int width = 480, int height = 320);

}  // namespace synbind
