#include "synbind/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>

#include "synbind/errors.hpp"

namespace synbind {

Image::Image(int w, int h, Rgb fill) : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3) {
    for (size_t i = 0; i < pixels.size(); i += 3) {
        pixels[i]     = fill[0];
        pixels[i + 1] = fill[1];
        pixels[i + 2] = fill[2];
    }
}

Mat Image::to_mat_pm1() const {
    Mat m(width * height, 3);
    for (int i = 0; i < width * height; ++i)
        for (int c = 0; c < 3; ++c)
            m(i, c) = pixels[3 * static_cast<size_t>(i) + c] * 2.f - 1.f;
    return m;
}

Image Image::from_mat_pm1(const Mat& m, int width, int height) {
    if (m.rows() != width * height || m.cols() != 3)
        throw ShapeError("pixel matrix is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                         ", expected " + std::to_string(width * height) + "x3");
    Image img(width, height);
    for (int i = 0; i < width * height; ++i)
        for (int c = 0; c < 3; ++c)
            img.pixels[3 * static_cast<size_t>(i) + c] = std::clamp(m(i, c) * 0.5f + 0.5f, 0.f, 1.f);
    return img;
}

static uint8_t to_u8(float v) {
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

void write_png(const std::string& path, const Image& img) {
    std::string tmp = path + ".tmp";
    FILE* fp = std::fopen(tmp.c_str(), "wb");
    if (!fp) throw DataError("cannot open for write: " + tmp);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info  = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw DataError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw DataError("libpng write failed: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<uint8_t> row(static_cast<size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const float* p = img.at(x, y);
            row[3 * x]     = to_u8(p[0]);
            row[3 * x + 1] = to_u8(p[1]);
            row[3 * x + 2] = to_u8(p[2]);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    std::filesystem::rename(tmp, path);
}

Image read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw DataError("cannot open: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info  = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw DataError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw DataError("libpng read failed: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_uint_32 w = 0, h = 0;
    int bit_depth = 0, color_type = 0;
    png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);

    // normalize everything to 8-bit RGB
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    Image img(static_cast<int>(w), static_cast<int>(h));
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x) {
            img.set(static_cast<int>(x), static_cast<int>(y),
                    {row[3 * x] / 255.f, row[3 * x + 1] / 255.f, row[3 * x + 2] / 255.f});
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

// Rasterize by per-pixel-center inclusion tests.
void draw_square(Image& img, float cx, float cy, float r, const Rgb& color) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float dx = x + 0.5f - cx, dy = y + 0.5f - cy;
            if (std::fabs(dx) <= r && std::fabs(dy) <= r) img.set(x, y, color);
        }
}

void draw_circle(Image& img, float cx, float cy, float r, const Rgb& color) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float dx = x + 0.5f - cx, dy = y + 0.5f - cy;
            if (dx * dx + dy * dy <= r * r) img.set(x, y, color);
        }
}

void draw_triangle(Image& img, float cx, float cy, float r, const Rgb& color) {
    // upward-pointing isoceles triangle inscribed in the 2r box
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float dx = x + 0.5f - cx, dy = y + 0.5f - cy;
            if (dy < -r || dy > r) continue;
            float half_width = r * (dy + r) / (2.f * r);  // 0 at apex, r at base
            if (std::fabs(dx) <= half_width) img.set(x, y, color);
        }
}

void draw_cross(Image& img, float cx, float cy, float r, const Rgb& color) {
    float arm = r / 3.f;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float dx = x + 0.5f - cx, dy = y + 0.5f - cy;
            bool horiz = std::fabs(dy) <= arm && std::fabs(dx) <= r;
            bool vert  = std::fabs(dx) <= arm && std::fabs(dy) <= r;
            if (horiz || vert) img.set(x, y, color);
        }
}

Rgb colormap(float v) {
    v = std::clamp(v, 0.f, 1.f);
    // piecewise-linear approximation of viridis
    static const float stops[5][3] = {
        {0.267f, 0.005f, 0.329f},
        {0.229f, 0.322f, 0.546f},
        {0.127f, 0.566f, 0.551f},
        {0.369f, 0.789f, 0.383f},
        {0.993f, 0.906f, 0.144f},
    };
    float t  = v * 4.f;
    int seg  = std::min(3, static_cast<int>(t));
    float fr = t - seg;
    return {stops[seg][0] + fr * (stops[seg + 1][0] - stops[seg][0]),
            stops[seg][1] + fr * (stops[seg + 1][1] - stops[seg][1]),
            stops[seg][2] + fr * (stops[seg + 1][2] - stops[seg][2])};
}

Image upscale(const Image& img, int factor) {
    Image out(img.width * factor, img.height * factor);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            out.set(x, y, img.get(x / factor, y / factor));
    return out;
}

Image hstack_tiles(const std::vector<Image>& tiles, Rgb separator) {
    if (tiles.empty()) return {};
    int h = tiles[0].height;
    int w = 0;
    for (const auto& t : tiles) w += t.width;
    w += static_cast<int>(tiles.size()) - 1;
    Image out(w, h, separator);
    int xo = 0;
    for (const auto& t : tiles) {
        for (int y = 0; y < t.height && y < h; ++y)
            for (int x = 0; x < t.width; ++x)
                out.set(xo + x, y, t.get(x, y));
        xo += t.width + 1;
    }
    return out;
}

Image vstack_tiles(const std::vector<Image>& tiles, Rgb separator) {
    if (tiles.empty()) return {};
    int w = tiles[0].width;
    int h = 0;
    for (const auto& t : tiles) h += t.height;
    h += static_cast<int>(tiles.size()) - 1;
    Image out(w, h, separator);
    int yo = 0;
    for (const auto& t : tiles) {
        for (int y = 0; y < t.height; ++y)
            for (int x = 0; x < t.width && x < w; ++x)
                out.set(x, yo + y, t.get(x, y));
        yo += t.height + 1;
    }
    return out;
}

Image render_line_plot(const std::vector<PlotSeries>& series, int width, int height) {
    Image img(width, height, {1.f, 1.f, 1.f});
    if (series.empty()) return img;

    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series) {
        for (double v : s.x) { xmin = std::min(xmin, v); xmax = std::max(xmax, v); }
        for (double v : s.y) { ymin = std::min(ymin, v); ymax = std::max(ymax, v); }
    }
    if (xmax <= xmin) xmax = xmin + 1;
    if (ymax <= ymin) ymax = ymin + 1;
    ymin -= 0.05 * (ymax - ymin);
    ymax += 0.05 * (ymax - ymin);

    const int ml = 40, mr = 10, mt = 10, mb = 25;  // margins
    auto px = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * (width - ml - mr); };
    auto py = [&](double v) { return height - mb - (v - ymin) / (ymax - ymin) * (height - mt - mb); };

    Rgb axis = {0.1f, 0.1f, 0.1f};
    for (int x = ml; x < width - mr; ++x) img.set(x, height - mb, axis);
    for (int y = mt; y <= height - mb; ++y) img.set(ml, y, axis);
    // ticks at min/max
    for (int d = 0; d < 4; ++d) {
        img.set(ml - 1 - d, static_cast<int>(py(ymin + 0.05 * (ymax - ymin))), axis);
        img.set(ml - 1 - d, static_cast<int>(py(ymax - 0.05 * (ymax - ymin))), axis);
    }

    auto draw_line = [&](double x0, double y0, double x1, double y1, const Rgb& c) {
        int steps = static_cast<int>(std::max(std::fabs(x1 - x0), std::fabs(y1 - y0))) + 1;
        for (int i = 0; i <= steps; ++i) {
            double t  = static_cast<double>(i) / steps;
            int xi    = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
            int yi    = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
            if (xi >= 0 && xi < width && yi >= 0 && yi < height) img.set(xi, yi, c);
        }
    };

    for (const auto& s : series) {
        for (size_t i = 0; i + 1 < s.x.size(); ++i)
            draw_line(px(s.x[i]), py(s.y[i]), px(s.x[i + 1]), py(s.y[i + 1]), s.color);
        for (size_t i = 0; i < s.x.size(); ++i) {
            int xi = static_cast<int>(px(s.x[i])), yi = static_cast<int>(py(s.y[i]));
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if (xi + dx >= 0 && xi + dx < width && yi + dy >= 0 && yi + dy < height)
                        img.set(xi + dx, yi + dy, s.color);
        }
    }
    return img;
}

}  // namespace synbind
