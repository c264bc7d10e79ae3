#include "dkn/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dkn {

static_assert(std::endian::native == std::endian::little,
              "DKT1 writer assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'D', 'K', 'T', '1'};

template <typename T>
void save_dkt1_impl(const std::filesystem::path& path, const Tensor<T>& t, std::uint8_t dtype) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(kMagic, 4);
    f.put(static_cast<char>(dtype));
    const std::uint32_t rank = static_cast<std::uint32_t>(t.shape.size());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (int d : t.shape) {
        const std::uint32_t u = static_cast<std::uint32_t>(d);
        f.write(reinterpret_cast<const char*>(&u), 4);
    }
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(T)));
    if (!f) throw IoError("write failed: " + path.string());
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& payload) {
    put_be32(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const auto crc =
        crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

void save_dkt1(const std::filesystem::path& path, const Tensor<float>& t) {
    save_dkt1_impl(path, t, 0);
}
void save_dkt1(const std::filesystem::path& path, const Tensor<double>& t) {
    save_dkt1_impl(path, t, 1);
}

template <typename T>
Tensor<T> load_dkt1(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not a DKT1 file: " + path.string());
    const int dtype = f.get();
    if (dtype != 0 && dtype != 1) throw IoError("unknown DKT1 dtype in " + path.string());
    std::uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 4);
    if (!f || rank > 8) throw IoError("bad DKT1 rank in " + path.string());
    std::vector<int> shape(rank);
    for (auto& d : shape) {
        std::uint32_t u = 0;
        f.read(reinterpret_cast<char*>(&u), 4);
        d = static_cast<int>(u);
    }
    const std::size_t n = shape_numel(shape);
    Tensor<T> t(shape, T(0));
    if (dtype == (std::is_same_v<T, float> ? 0 : 1)) {
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(n * sizeof(T)));
    } else if (dtype == 0) {
        std::vector<float> buf(n);
        f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
        for (std::size_t i = 0; i < n; ++i) t.data[i] = static_cast<T>(buf[i]);
    } else {
        std::vector<double> buf(n);
        f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 8));
        for (std::size_t i = 0; i < n; ++i) t.data[i] = static_cast<T>(buf[i]);
    }
    if (!f) throw IoError("truncated DKT1 file: " + path.string());
    return t;
}

void write_gray_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                    int width, int height) {
    if (pixels.size() != static_cast<std::size_t>(width) * height)
        throw ShapeError("write_gray_png: pixel count mismatch");
    // Raw scanlines, each prefixed with filter byte 0.
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(height) * (width + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels.begin() + static_cast<std::size_t>(y) * width,
                   pixels.begin() + static_cast<std::size_t>(y + 1) * width);
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> zdata(zlen);
    if (compress2(zdata.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw IoError("zlib compression failed");
    zdata.resize(zlen);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(width));
    put_be32(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", zdata);
    put_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

template <typename T>
void write_image_png(const std::filesystem::path& path, const Tensor<T>& img) {
    int H = 0, W = 0;
    if (img.rank() == 2) {
        H = img.dim(0);
        W = img.dim(1);
    } else if (img.rank() == 3 && img.dim(2) == 1) {
        H = img.dim(0);
        W = img.dim(1);
    } else {
        throw ShapeError("write_image_png expects a single-channel 2D image, got " +
                         shape_str(img.shape));
    }
    double lo = static_cast<double>(img.data[0]), hi = lo;
    for (const T& v : img.data) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
    }
    const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
    std::vector<std::uint8_t> px(img.size());
    for (std::size_t i = 0; i < img.size(); ++i)
        px[i] = static_cast<std::uint8_t>((static_cast<double>(img.data[i]) - lo) * scale + 0.5);
    write_gray_png(path, px, W, H);
    std::ostringstream side;
    side << "min " << lo << "\nmax " << hi << "\n";
    write_text_file(path.string() + ".scale.txt", side.str());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << content;
    if (!f) throw IoError("write failed: " + path.string());
}

template Tensor<float> load_dkt1<float>(const std::filesystem::path&);
template Tensor<double> load_dkt1<double>(const std::filesystem::path&);
template void write_image_png<float>(const std::filesystem::path&, const Tensor<float>&);
template void write_image_png<double>(const std::filesystem::path&, const Tensor<double>&);

}  // namespace dkn
