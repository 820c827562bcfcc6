#pragma once

#include <string>

#include "cfm/image.hpp"

namespace cfm {

// Binary PGM (P5, grayscale) and PPM (P6, RGB) with maxval 255. Pixels load
// as v/255; saving clamps to [0,1] and rounds. save(load(f)) is bit-identical
// for well-formed inputs.
Image load_image(const std::string& path);
void save_image(const Image& image, const std::string& path);

}  // namespace cfm
