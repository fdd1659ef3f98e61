#include "luxmix/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace luxmix {

static_assert(std::endian::native == std::endian::little, "raw float formats assume a little-endian host");

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const void* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::uint8_t quantize(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

constexpr char kLxhdMagic[4] = {'L', 'X', 'H', 'D'};

}  // namespace

void write_pfm(const std::filesystem::path& path, const HdrImage& img) {
    std::ostringstream header;
    header << "PF\n" << img.width() << ' ' << img.height() << "\n-1.0\n";
    std::string bytes = header.str();
    const std::size_t row_bytes = std::size_t(img.width()) * 3 * sizeof(float);
    const std::size_t offset = bytes.size();
    bytes.resize(offset + row_bytes * img.height());
    for (int y = 0; y < img.height(); ++y) {
        const int src_row = img.height() - 1 - y;
        std::memcpy(bytes.data() + offset + row_bytes * y, img.pixels().data() + img.index(0, src_row) * 3, row_bytes);
    }
    write_file(path, bytes.data(), bytes.size());
}

HdrImage read_pfm(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
        return t;
    };
    if (token() != "PF") throw std::runtime_error(path.string() + ": not an RGB portable float map");
    const int width = std::stoi(token());
    const int height = std::stoi(token());
    const double scale = std::stod(token());
    if (scale >= 0) throw std::runtime_error(path.string() + ": big-endian PFM is not supported");
    ++pos;  // single whitespace after the scale
    const std::size_t row_bytes = std::size_t(width) * 3 * sizeof(float);
    if (bytes.size() < pos + row_bytes * height) throw std::runtime_error(path.string() + ": truncated PFM");
    HdrImage img(width, height);
    for (int y = 0; y < height; ++y) {
        std::memcpy(img.pixels().data() + img.index(0, height - 1 - y) * 3, bytes.data() + pos + row_bytes * y, row_bytes);
    }
    return img;
}

std::vector<std::uint8_t> encode_lxhd(const HdrImage& img) {
    std::vector<std::uint8_t> out(12 + std::size_t(img.pixel_count()) * 3 * sizeof(float));
    const std::uint32_t w = static_cast<std::uint32_t>(img.width());
    const std::uint32_t h = static_cast<std::uint32_t>(img.height());
    std::memcpy(out.data(), kLxhdMagic, 4);
    std::memcpy(out.data() + 4, &w, 4);
    std::memcpy(out.data() + 8, &h, 4);
    std::memcpy(out.data() + 12, img.pixels().data(), out.size() - 12);
    return out;
}

HdrImage decode_lxhd(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kLxhdMagic, 4) != 0)
        throw std::runtime_error("not an LXHD image");
    std::uint32_t w = 0, h = 0;
    std::memcpy(&w, bytes.data() + 4, 4);
    std::memcpy(&h, bytes.data() + 8, 4);
    const std::size_t payload = std::size_t(w) * h * 3 * sizeof(float);
    if (bytes.size() != 12 + payload) throw std::runtime_error("LXHD payload size mismatch");
    HdrImage img(static_cast<int>(w), static_cast<int>(h));
    std::memcpy(img.pixels().data(), bytes.data() + 12, payload);
    return img;
}

void write_lxhd(const std::filesystem::path& path, const HdrImage& img) {
    const auto bytes = encode_lxhd(img);
    write_file(path, bytes.data(), bytes.size());
}

HdrImage read_lxhd(const std::filesystem::path& path) { return decode_lxhd(read_file(path)); }

HdrImage read_hdr(const std::filesystem::path& path) {
    if (path.extension() == ".pfm") return read_pfm(path);
    return read_lxhd(path);
}

void write_hdr(const std::filesystem::path& path, const HdrImage& img) {
    if (path.extension() == ".pfm") {
        write_pfm(path, img);
    } else {
        write_lxhd(path, img);
    }
}

namespace {

std::vector<std::uint8_t> encode_png_raw(const std::uint8_t* data, int width, int height, bool gray, int compression) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (compression <= 1) image.flags |= PNG_IMAGE_FLAG_FAST;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, data, 0, nullptr))
        throw std::runtime_error(std::string("png encode: ") + image.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, data, 0, nullptr))
        throw std::runtime_error(std::string("png encode: ") + image.message);
    out.resize(size);
    return out;
}

std::vector<std::uint8_t> decode_png_raw(const std::filesystem::path& path, bool gray, int& width, int& height) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw std::runtime_error(path.string() + ": " + image.message);
    image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw std::runtime_error(path.string() + ": " + image.message);
    }
    width = static_cast<int>(image.width);
    height = static_cast<int>(image.height);
    return buffer;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const LdrImage& img, int compression) {
    std::vector<std::uint8_t> rgb(std::size_t(img.pixel_count()) * 3);
    const float* src = img.pixels().data();
    for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = quantize(src[i]);
    return encode_png_raw(rgb.data(), img.width(), img.height(), false, compression);
}

void write_png(const std::filesystem::path& path, const LdrImage& img) {
    const auto bytes = encode_png(img, 6);
    write_file(path, bytes.data(), bytes.size());
}

LdrImage read_png(const std::filesystem::path& path) {
    int w = 0, h = 0;
    const auto buffer = decode_png_raw(path, false, w, h);
    LdrImage img(w, h);
    float* dst = img.pixels().data();
    for (std::size_t i = 0; i < buffer.size(); ++i) dst[i] = buffer[i] / 255.0f;
    return img;
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
    std::vector<std::uint8_t> gray(std::size_t(mask.size()));
    const bool* src = mask.data();
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = src[i] ? 255 : 0;
    const auto bytes = encode_png_raw(gray.data(), int(mask.cols()), int(mask.rows()), true, 6);
    write_file(path, bytes.data(), bytes.size());
}

Mask read_mask_png(const std::filesystem::path& path) {
    int w = 0, h = 0;
    const auto buffer = decode_png_raw(path, true, w, h);
    Mask mask(h, w);
    bool* dst = mask.data();
    for (std::size_t i = 0; i < buffer.size(); ++i) dst[i] = buffer[i] != 0;
    return mask;
}

}  // namespace luxmix
