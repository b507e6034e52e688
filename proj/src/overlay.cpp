#include "brainparc/overlay.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "brainparc/errors.hpp"

namespace brainparc {

namespace fs = std::filesystem;

std::array<uint8_t, 3> class_color(int64_t cls) {
    static const std::array<std::array<uint8_t, 3>, 16> palette = {{
        {230, 25, 75},   // red
        {60, 180, 75},   // green
        {255, 225, 25},  // yellow
        {0, 130, 200},   // blue
        {245, 130, 48},  // orange
        {145, 30, 180},  // purple
        {70, 240, 240},  // cyan
        {240, 50, 230},  // magenta
        {210, 245, 60},  // lime
        {250, 190, 212}, // pink
        {0, 128, 128},   // teal
        {220, 190, 255}, // lavender
        {170, 110, 40},  // brown
        {255, 250, 200}, // beige
        {128, 0, 0},     // maroon
        {170, 255, 195}, // mint
    }};
    if (cls <= 0) return {0, 0, 0};
    return palette[static_cast<size_t>((cls - 1) % 16)];
}

namespace {

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4],
               const std::vector<uint8_t>& data) {
    put_u32_be(out, static_cast<uint32_t>(data.size()));
    const size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
    put_u32_be(out, crc);
}

} // namespace

std::vector<uint8_t> encode_png_rgb(const std::vector<uint8_t>& rgb, int64_t width,
                                    int64_t height) {
    if (width <= 0 || height <= 0)
        throw DataError("png dimensions must be positive, got " + std::to_string(width) + "x" +
                        std::to_string(height));
    if (rgb.size() != static_cast<size_t>(width * height * 3))
        throw DataError("png payload size mismatch: expected " +
                        std::to_string(width * height * 3) + " bytes, got " +
                        std::to_string(rgb.size()));

    // Filter byte 0 in front of every row, then one zlib stream.
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(height * (1 + width * 3)));
    for (int64_t y = 0; y < height; ++y) {
        raw.push_back(0);
        const auto* row = rgb.data() + y * width * 3;
        raw.insert(raw.end(), row, row + width * 3);
    }
    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_size);
    if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6) !=
        Z_OK)
        throw IoError("zlib compression failed for png payload");
    comp.resize(comp_size);

    std::vector<uint8_t> png = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<uint8_t> ihdr;
    put_u32_be(ihdr, static_cast<uint32_t>(width));
    put_u32_be(ihdr, static_cast<uint32_t>(height));
    ihdr.push_back(8); // bit depth
    ihdr.push_back(2); // color type: truecolor RGB
    ihdr.push_back(0); // compression
    ihdr.push_back(0); // filter
    ihdr.push_back(0); // interlace
    put_chunk(png, "IHDR", ihdr);
    put_chunk(png, "IDAT", comp);
    put_chunk(png, "IEND", {});
    return png;
}

void write_png_rgb(const std::string& path, const torch::Tensor& image) {
    if (image.dim() != 3 || image.size(2) != 3 || image.scalar_type() != torch::kUInt8)
        throw DataError("png image must be (H,W,3) uint8");
    auto c = image.contiguous();
    std::vector<uint8_t> rgb(c.data_ptr<uint8_t>(), c.data_ptr<uint8_t>() + c.numel());
    auto png = encode_png_rgb(rgb, image.size(1), image.size(0));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write(reinterpret_cast<const char*>(png.data()),
              static_cast<std::streamsize>(png.size()));
    if (!out) throw IoError("write failed: " + path);
}

torch::Tensor overlay_slice(const torch::Tensor& intensity, const torch::Tensor& labels) {
    if (intensity.dim() != 2 || labels.dim() != 2 || intensity.sizes() != labels.sizes())
        throw DataError("overlay_slice expects matching (H,W) intensity and labels");
    auto img = intensity.to(torch::kFloat64);
    const double lo = img.min().item<double>();
    const double hi = img.max().item<double>();
    auto gray = (hi > lo) ? (img - lo) / (hi - lo) : torch::zeros_like(img);

    const int64_t h = intensity.size(0), w = intensity.size(1);
    auto out = torch::empty({h, w, 3}, torch::kUInt8);
    auto gray_a = gray.accessor<double, 2>();
    auto lbl = labels.to(torch::kInt64).contiguous();
    auto lbl_a = lbl.accessor<int64_t, 2>();
    auto out_a = out.accessor<uint8_t, 3>();
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const double g = 255.0 * gray_a[y][x];
            const auto color = class_color(lbl_a[y][x]);
            for (int64_t ch = 0; ch < 3; ++ch) {
                const double v = (lbl_a[y][x] > 0) ? 0.5 * g + 0.5 * color[static_cast<size_t>(ch)]
                                                   : g;
                out_a[y][x][ch] = static_cast<uint8_t>(std::min(255.0, std::max(0.0, v + 0.5)));
            }
        }
    }
    return out;
}

std::vector<std::string> save_prediction_overlays(const VolumeBundle& vol,
                                                  const torch::Tensor& pred, int64_t axis,
                                                  const std::string& out_dir, int64_t stride) {
    vol.validate();
    if (axis < 0 || axis > 2)
        throw ConfigError("overlay axis must be 0, 1, or 2, got " + std::to_string(axis));
    if (stride < 1)
        throw ConfigError("overlay stride must be >= 1, got " + std::to_string(stride));
    if (pred.sizes() != vol.labels.sizes())
        throw DataError("prediction shape does not match volume labels");

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output dir " + out_dir + ": " + ec.message());

    std::vector<std::string> written;
    const int64_t extent = vol.dims()[static_cast<size_t>(axis)];
    for (int64_t c = 0; c < extent; c += stride) {
        auto intensity = vol.intensities.select(axis, c);
        auto gt = overlay_slice(intensity, vol.labels.select(axis, c));
        auto pr = overlay_slice(intensity, pred.select(axis, c));
        auto gutter = torch::full({gt.size(0), 2, 3}, 255, torch::kUInt8);
        auto panel = torch::cat({gt, gutter, pr}, 1).contiguous();

        char name[32];
        std::snprintf(name, sizeof(name), "slice_%04lld.png", static_cast<long long>(c));
        const std::string path = (fs::path(out_dir) / name).string();
        write_png_rgb(path, panel);
        written.push_back(path);
    }
    return written;
}

} // namespace brainparc
