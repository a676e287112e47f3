/*
 *  Copyright 2026 The MSEDenseNet Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 */

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace msed {

/// 8-bit interleaved RGB image, row-major HWC.
struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  static constexpr std::size_t kChannels = 3;
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
};

/// Reads an 8-bit RGB PNG or a binary PPM (P6, maxval 255). The format is
/// chosen from the file signature; anything else is rejected.
RawImage read_image(const std::string& path);
RawImage read_png(const std::string& path);
RawImage read_ppm(const std::string& path);

void write_ppm(const std::string& path, const RawImage& image);
void write_png(const std::string& path, const RawImage& image);

}  // namespace msed
