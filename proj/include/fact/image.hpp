#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace fact {

// HWC float pixels in [0, 1] plus a binary (H, W) face mask.
struct FaceImage {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> pixels;
    std::vector<float> mask;

    float& at(int y, int x, int c) { return pixels[(std::size_t(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return pixels[(std::size_t(y) * width + x) * channels + c]; }
    float mask_at(int y, int x) const { return mask[std::size_t(y) * width + x]; }
};

FaceImage make_image(int height, int width, int channels);

// Checks pixel/mask sizes and that the mask is binary. Throws InvalidInput.
void validate(const FaceImage& image);

// Zeroes every pixel outside the face mask. The mask is carried through unchanged.
FaceImage mask_face_region(const FaceImage& image);

// 8-bit RGB/gray PNG I/O. Pixels are clamped to [0, 1] on write.
void write_png(const std::filesystem::path& path, int height, int width, int channels, const std::vector<float>& pixels);
std::vector<float> read_png(const std::filesystem::path& path, int& height, int& width, int& channels);

// Raw little-endian float32 pixels with a JSON sidecar `<path>.json` holding {"shape": [H, W, C]}.
void write_raw_image(const std::filesystem::path& path, int height, int width, int channels,
                     const std::vector<float>& pixels);
std::vector<float> read_raw_image(const std::filesystem::path& path, int& height, int& width, int& channels);

// Loads pixels from either format (by extension: .png, otherwise raw) and a mask PNG, if given.
FaceImage load_face_image(const std::filesystem::path& pixels, const std::filesystem::path& mask = {});

}  // namespace fact
