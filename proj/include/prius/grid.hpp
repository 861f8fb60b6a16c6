#ifndef PRIUS_GRID_HPP
#define PRIUS_GRID_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace prius {

struct PixelIndex {
    int row = 0;
    int col = 0;

    friend bool operator==(const PixelIndex&, const PixelIndex&) = default;
    friend auto operator<=>(const PixelIndex&, const PixelIndex&) = default;
};

struct UnitVector2 {
    double dy = 0.0;
    double dx = 1.0;
};

/// Row-major 2D field. Pixel (r, c) lives at index r * width + c.
template <typename T>
class Grid {
public:
    using value_type = T;

    Grid() = default;

    Grid(int height, int width, T fill = T{}) : height_(height), width_(width) {
        if (height <= 0 || width <= 0)
            throw std::invalid_argument("grid dimensions must be positive, got " + std::to_string(height) + "x" +
                                        std::to_string(width));
        values_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
    }

    Grid(int height, int width, std::vector<T> values) : height_(height), width_(width), values_(std::move(values)) {
        if (height <= 0 || width <= 0)
            throw std::invalid_argument("grid dimensions must be positive");
        if (values_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
            throw std::invalid_argument("grid value count does not match height*width");
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    std::size_t index(int r, int c) const noexcept {
        return static_cast<std::size_t>(r) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(c);
    }
    std::size_t index(PixelIndex p) const noexcept { return index(p.row, p.col); }

    bool contains(int r, int c) const noexcept { return r >= 0 && c >= 0 && r < height_ && c < width_; }
    bool contains(PixelIndex p) const noexcept { return contains(p.row, p.col); }

    T& operator()(int r, int c) noexcept { return values_[index(r, c)]; }
    const T& operator()(int r, int c) const noexcept { return values_[index(r, c)]; }
    T& operator[](PixelIndex p) noexcept { return values_[index(p)]; }
    const T& operator[](PixelIndex p) const noexcept { return values_[index(p)]; }

    /// Nearest valid pixel: coordinates outside the grid clamp to the border.
    const T& clamped(int r, int c) const noexcept {
        return (*this)(std::clamp(r, 0, height_ - 1), std::clamp(c, 0, width_ - 1));
    }

    PixelIndex pixel(std::size_t linear) const noexcept {
        return {static_cast<int>(linear / static_cast<std::size_t>(width_)),
                static_cast<int>(linear % static_cast<std::size_t>(width_))};
    }

    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }

    bool same_shape(const auto& other) const noexcept {
        return height_ == other.height() && width_ == other.width();
    }

    friend bool operator==(const Grid&, const Grid&) = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<T> values_;
};

class ScalarGrid : public Grid<double> {
public:
    using Grid<double>::Grid;

    bool all_finite() const noexcept {
        return std::all_of(values().begin(), values().end(), [](double v) { return std::isfinite(v); });
    }

    ScalarGrid transposed() const {
        ScalarGrid out(width(), height());
        for (int r = 0; r < height(); ++r)
            for (int c = 0; c < width(); ++c) out(c, r) = (*this)(r, c);
        return out;
    }
};

class LabelGrid : public Grid<std::uint8_t> {
public:
    LabelGrid() = default;

    LabelGrid(int height, int width, int num_classes, std::uint8_t fill = 0)
        : Grid<std::uint8_t>(height, width, fill), num_classes_(num_classes) {
        validate();
    }

    LabelGrid(int height, int width, int num_classes, std::vector<std::uint8_t> labels)
        : Grid<std::uint8_t>(height, width, std::move(labels)), num_classes_(num_classes) {
        validate();
    }

    int num_classes() const noexcept { return num_classes_; }

    int label(int r, int c) const noexcept { return (*this)(r, c); }
    int label(PixelIndex p) const noexcept { return (*this)[p]; }

    std::size_t count(int k) const noexcept {
        return static_cast<std::size_t>(
            std::count(values().begin(), values().end(), static_cast<std::uint8_t>(k)));
    }

    bool is_uniform() const noexcept {
        return std::adjacent_find(values().begin(), values().end(), std::not_equal_to<>()) == values().end();
    }

    /// Rebinds the class count; throws if any label is not below it.
    LabelGrid with_num_classes(int num_classes) const {
        return LabelGrid(height(), width(), num_classes, std::vector<std::uint8_t>(values().begin(), values().end()));
    }

    friend bool operator==(const LabelGrid&, const LabelGrid&) = default;

private:
    void validate() const {
        if (num_classes_ < 2 || num_classes_ > 255)
            throw std::invalid_argument("class count must lie in [2, 255], got " + std::to_string(num_classes_));
        for (std::uint8_t v : values())
            if (v >= num_classes_)
                throw std::invalid_argument("label " + std::to_string(v) + " is not below class count " +
                                            std::to_string(num_classes_));
    }

    int num_classes_ = 2;
};

// ---------------------------------------------------------------------------
// Binary grid format:
//   "PRGD" | kind u8 (0 scalar f32, 1 label u8) | height u32 LE | width u32 LE | payload
// ---------------------------------------------------------------------------

class GridFormatError : public std::runtime_error {
public:
    GridFormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

namespace detail {

inline constexpr std::array<char, 4> kGridMagic{'P', 'R', 'G', 'D'};
inline constexpr std::size_t kGridHeaderBytes = 4 + 1 + 4 + 4;
// Largest pixel count accepted on load; keeps height*width*4 well inside size_t on every platform.
inline constexpr std::uint64_t kMaxGridPixels = std::uint64_t{1} << 30;

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>((v >> (8 * b)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
           (std::uint32_t{p[3]} << 24);
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::vector<unsigned char> grid_header(std::uint8_t kind, int height, int width) {
    std::vector<unsigned char> out(kGridMagic.begin(), kGridMagic.end());
    out.push_back(kind);
    put_u32(out, static_cast<std::uint32_t>(height));
    put_u32(out, static_cast<std::uint32_t>(width));
    return out;
}

}  // namespace detail

/// Serializes to the PRGD byte layout. Scalars narrow to f32.
inline std::vector<unsigned char> encode_grid(const ScalarGrid& grid) {
    if (grid.empty()) throw std::invalid_argument("refusing to encode an empty grid");
    auto out = detail::grid_header(0, grid.height(), grid.width());
    out.reserve(out.size() + grid.size() * 4);
    for (double v : grid.values()) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof bits);
        detail::put_u32(out, bits);
    }
    return out;
}

inline std::vector<unsigned char> encode_grid(const LabelGrid& grid) {
    if (grid.empty()) throw std::invalid_argument("refusing to encode an empty grid");
    auto out = detail::grid_header(1, grid.height(), grid.width());
    out.insert(out.end(), grid.values().begin(), grid.values().end());
    return out;
}

using AnyGrid = std::variant<ScalarGrid, LabelGrid>;

/// Parses PRGD bytes. Label grids come back with class count max(2, max label + 1).
inline AnyGrid decode_grid(std::span<const unsigned char> bytes) {
    using detail::kGridHeaderBytes;
    if (bytes.size() < 4) throw GridFormatError("truncated magic", bytes.size());
    for (std::size_t i = 0; i < 4; ++i)
        if (bytes[i] != static_cast<unsigned char>(detail::kGridMagic[i]))
            throw GridFormatError("bad magic, expected \"PRGD\"", i);
    if (bytes.size() < 5) throw GridFormatError("truncated header: missing kind byte", bytes.size());
    const std::uint8_t kind = bytes[4];
    if (kind > 1) throw GridFormatError("unknown grid kind " + std::to_string(kind), 4);
    if (bytes.size() < kGridHeaderBytes) throw GridFormatError("truncated header: missing dimensions", bytes.size());
    const std::uint32_t height = detail::get_u32(bytes.data() + 5);
    const std::uint32_t width = detail::get_u32(bytes.data() + 9);
    if (height == 0) throw GridFormatError("zero height", 5);
    if (width == 0) throw GridFormatError("zero width", 9);
    if (height > static_cast<std::uint32_t>(std::numeric_limits<int>::max()) ||
        width > static_cast<std::uint32_t>(std::numeric_limits<int>::max()) ||
        std::uint64_t{height} * width > detail::kMaxGridPixels)
        throw GridFormatError("dimension overflow: " + std::to_string(height) + "x" + std::to_string(width), 5);

    const std::uint64_t pixels = std::uint64_t{height} * width;
    const std::uint64_t payload = pixels * (kind == 0 ? 4 : 1);
    const std::uint64_t available = bytes.size() - kGridHeaderBytes;
    if (available < payload)
        throw GridFormatError("truncated payload: expected " + std::to_string(payload) + " bytes, found " +
                                  std::to_string(available),
                              bytes.size());
    if (available > payload) throw GridFormatError("trailing bytes after payload", kGridHeaderBytes + payload);

    const unsigned char* p = bytes.data() + kGridHeaderBytes;
    if (kind == 0) {
        std::vector<double> values(pixels);
        for (std::size_t i = 0; i < pixels; ++i) {
            const std::uint32_t bits = detail::get_u32(p + 4 * i);
            float f;
            std::memcpy(&f, &bits, sizeof f);
            if (!std::isfinite(f)) throw GridFormatError("non-finite scalar value", kGridHeaderBytes + 4 * i);
            values[i] = f;
        }
        return ScalarGrid(static_cast<int>(height), static_cast<int>(width), std::move(values));
    }
    std::vector<std::uint8_t> labels(p, p + pixels);
    const int max_label = *std::max_element(labels.begin(), labels.end());
    return LabelGrid(static_cast<int>(height), static_cast<int>(width), std::max(2, max_label + 1), std::move(labels));
}

inline void save_grid(const ScalarGrid& grid, const std::filesystem::path& path) {
    detail::write_file(path, encode_grid(grid));
}

inline void save_grid(const LabelGrid& grid, const std::filesystem::path& path) {
    detail::write_file(path, encode_grid(grid));
}

inline AnyGrid load_grid(const std::filesystem::path& path) { return decode_grid(detail::read_file(path)); }

inline ScalarGrid load_scalar_grid(const std::filesystem::path& path) {
    auto g = load_grid(path);
    if (auto* s = std::get_if<ScalarGrid>(&g)) return std::move(*s);
    throw GridFormatError(path.string() + " holds a label grid, expected scalar", 4);
}

inline LabelGrid load_label_grid(const std::filesystem::path& path, int num_classes) {
    auto g = load_grid(path);
    if (auto* l = std::get_if<LabelGrid>(&g)) return l->with_num_classes(num_classes);
    throw GridFormatError(path.string() + " holds a scalar grid, expected labels", 4);
}

/// Lossy P5 export for eyeballing maps; min-max normalized to [0, 255].
inline void export_pgm(const ScalarGrid& grid, const std::filesystem::path& path) {
    const auto [lo_it, hi_it] = std::minmax_element(grid.values().begin(), grid.values().end());
    const double lo = *lo_it;
    const double span = *hi_it - lo;
    std::string header = "P5\n" + std::to_string(grid.width()) + " " + std::to_string(grid.height()) + "\n255\n";
    std::vector<unsigned char> bytes(header.begin(), header.end());
    for (double v : grid.values()) {
        const double t = span > 0.0 ? (v - lo) / span : 0.0;
        bytes.push_back(static_cast<unsigned char>(std::lround(t * 255.0)));
    }
    detail::write_file(path, bytes);
}

}  // namespace prius

#endif  // PRIUS_GRID_HPP
