#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dkn/tensor.hpp"

namespace dkn {

// DKT1 tensor file: magic "DKT1", u8 dtype (0=f32, 1=f64), u32 rank,
// u32 dims[rank], little-endian payload.
void save_dkt1(const std::filesystem::path& path, const Tensor<float>& t);
void save_dkt1(const std::filesystem::path& path, const Tensor<double>& t);

// Loads either dtype and converts to the requested element type.
template <typename T>
Tensor<T> load_dkt1(const std::filesystem::path& path);

// 8-bit grayscale PNG, one byte per pixel, rows top to bottom.
void write_gray_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                    int width, int height);

// Min-max normalises an image tensor to 8-bit, writes the PNG plus a
// sidecar <path>.scale.txt recording the mapping so the image stays
// quantitative.
template <typename T>
void write_image_png(const std::filesystem::path& path, const Tensor<T>& img);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& content);

extern template Tensor<float> load_dkt1<float>(const std::filesystem::path&);
extern template Tensor<double> load_dkt1<double>(const std::filesystem::path&);

}  // namespace dkn
