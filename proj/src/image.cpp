#include "fact/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "fact/errors.hpp"

namespace fact {

FaceImage make_image(int height, int width, int channels) {
    if (height <= 0 || width <= 0 || channels <= 0) throw InvalidInput("image dimensions must be positive");
    FaceImage img;
    img.height = height;
    img.width = width;
    img.channels = channels;
    img.pixels.assign(std::size_t(height) * width * channels, 0.0f);
    img.mask.assign(std::size_t(height) * width, 0.0f);
    return img;
}

void validate(const FaceImage& image) {
    const std::size_t hw = std::size_t(image.height) * image.width;
    if (image.pixels.size() != hw * image.channels) throw InvalidInput("pixel buffer does not match H*W*C");
    if (image.mask.size() != hw) throw InvalidInput("face mask shape does not match pixel spatial shape");
    for (float m : image.mask)
        if (m != 0.0f && m != 1.0f) throw InvalidInput("face mask must be binary");
}

FaceImage mask_face_region(const FaceImage& image) {
    validate(image);
    FaceImage out = image;
    const std::size_t hw = std::size_t(image.height) * image.width;
    for (std::size_t i = 0; i < hw; ++i)
        for (int c = 0; c < image.channels; ++c) out.pixels[i * image.channels + c] *= image.mask[i];
    return out;
}

namespace {

std::uint32_t png_format(int channels) {
    switch (channels) {
    case 1: return PNG_FORMAT_GRAY;
    case 3: return PNG_FORMAT_RGB;
    case 4: return PNG_FORMAT_RGBA;
    default: throw InvalidInput("PNG supports 1, 3 or 4 channels");
    }
}

}  // namespace

void write_png(const std::filesystem::path& path, int height, int width, int channels, const std::vector<float>& pixels) {
    if (pixels.size() != std::size_t(height) * width * channels) throw InvalidInput("write_png: buffer size mismatch");
    std::vector<std::uint8_t> bytes(pixels.size());
    std::transform(pixels.begin(), pixels.end(), bytes.begin(), [](float v) {
        return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    });
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(width);
    img.height = static_cast<png_uint_32>(height);
    img.format = png_format(channels);
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
        throw Error("failed to write PNG " + path.string() + ": " + img.message);
    }
}

std::vector<float> read_png(const std::filesystem::path& path, int& height, int& width, int& channels) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
        throw LoadError("cannot read PNG " + path.string() + ": " + img.message);
    }
    channels = (img.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
    img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
        throw LoadError("cannot decode PNG " + path.string() + ": " + img.message);
    }
    height = static_cast<int>(img.height);
    width = static_cast<int>(img.width);
    std::vector<float> out(bytes.size());
    std::transform(bytes.begin(), bytes.end(), out.begin(), [](std::uint8_t b) { return b / 255.0f; });
    return out;
}

void write_raw_image(const std::filesystem::path& path, int height, int width, int channels,
                     const std::vector<float>& pixels) {
    if (pixels.size() != std::size_t(height) * width * channels) throw InvalidInput("raw image: buffer size mismatch");
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(pixels.data()), std::streamsize(pixels.size() * sizeof(float)));
    if (!out) throw Error("failed to write " + path.string());
    nlohmann::json sidecar = {{"shape", {height, width, channels}}, {"dtype", "float32"}};
    std::ofstream(path.string() + ".json") << sidecar.dump(2) << "\n";
}

std::vector<float> read_raw_image(const std::filesystem::path& path, int& height, int& width, int& channels) {
    std::ifstream meta(path.string() + ".json");
    if (!meta) throw LoadError("missing JSON sidecar for " + path.string());
    nlohmann::json sidecar;
    try {
        meta >> sidecar;
        auto shape = sidecar.at("shape");
        height = shape.at(0).get<int>();
        width = shape.at(1).get<int>();
        channels = shape.at(2).get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("bad sidecar for " + path.string() + ": " + e.what());
    }
    std::vector<float> pixels(std::size_t(height) * width * channels);
    std::ifstream in(path, std::ios::binary);
    in.read(reinterpret_cast<char*>(pixels.data()), std::streamsize(pixels.size() * sizeof(float)));
    if (!in || in.gcount() != std::streamsize(pixels.size() * sizeof(float))) {
        throw LoadError("truncated raw image " + path.string());
    }
    return pixels;
}

FaceImage load_face_image(const std::filesystem::path& pixels, const std::filesystem::path& mask) {
    FaceImage img;
    if (pixels.extension() == ".png") {
        img.pixels = read_png(pixels, img.height, img.width, img.channels);
    } else {
        img.pixels = read_raw_image(pixels, img.height, img.width, img.channels);
    }
    if (mask.empty()) {
        img.mask.assign(std::size_t(img.height) * img.width, 1.0f);
    } else {
        int mh = 0, mw = 0, mc = 0;
        auto m = read_png(mask, mh, mw, mc);
        if (mh != img.height || mw != img.width) throw InvalidInput("mask size differs from image size");
        img.mask.resize(std::size_t(mh) * mw);
        for (std::size_t i = 0; i < img.mask.size(); ++i) img.mask[i] = m[i * mc] >= 0.5f ? 1.0f : 0.0f;
    }
    return img;
}

}  // namespace fact
