#include "synbind/mat.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "synbind/errors.hpp"

namespace synbind {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

void write_f32_file(const std::string& path, const float* data, size_t count) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot open for write: " + tmp);
        // target platforms are little endian; raw dump is the format
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
        if (!out) throw DataError("short write: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::vector<float> read_f32_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw DataError("cannot open: " + path);
    auto bytes = static_cast<size_t>(in.tellg());
    if (bytes % sizeof(float) != 0) throw DataError("not a float32 array: " + path);
    std::vector<float> v(bytes / sizeof(float));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw DataError("short read: " + path);
    return v;
}

void write_f32_mat(const std::string& path, const Mat& m) {
    write_f32_file(path, m.data(), static_cast<size_t>(m.size()));
}

Mat read_f32_mat(const std::string& path, int rows, int cols) {
    auto v = read_f32_file(path);
    if (v.size() != static_cast<size_t>(rows) * static_cast<size_t>(cols))
        throw ShapeError("array in " + path + " has " + std::to_string(v.size()) +
                         " floats, expected " + std::to_string(rows) + "x" + std::to_string(cols));
    Mat m(rows, cols);
    std::copy(v.begin(), v.end(), m.data());
    return m;
}

void atomic_write_text(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot open for write: " + tmp);
        out << content;
        if (!out) throw DataError("short write: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace synbind
