#pragma once

#include <cstdint>
#include <filesystem>

#include "infobfr/image.hpp"

namespace infobfr {

/// Procedural face-like RGB image: background gradient, hair, head ellipse,
/// eyes, brows, nose and mouth, with smooth texture noise. Pure function of
/// (seed, size).
Image generate_toy_face(uint64_t seed, int size = 64);

/// Writes face_00000.png ... into `dir`.
void write_toy_set(const std::filesystem::path& dir, int count, int size, uint64_t seed);

}  // namespace infobfr
