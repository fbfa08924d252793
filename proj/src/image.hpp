#pragma once

#include <string>

#include "tensor.hpp"

namespace pbflow {

// Reads a binary (P5) grayscale PGM into a rank-2 [H, W] tensor of raw
// sample values. Maxval up to 255 reads one byte per pixel, larger maxvals
// two big-endian bytes. Malformed headers, truncation, and trailing bytes
// all raise IoError.
Tensor read_pgm(const std::string& path);

// Writes a rank-2 tensor as an 8-bit binary PGM. Values are clamped to
// [0, 255] and rounded. The file appears atomically (temp file + rename).
void write_pgm(const Tensor& image, const std::string& path);

}  // namespace pbflow
