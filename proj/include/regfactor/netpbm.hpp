#pragma once

#include <string>
#include <string_view>

#include "regfactor/tensor.hpp"

namespace regfactor {

// Binary netpbm with maxval 255. Samples are round-half-up of 255*v after clamping to [0,1].

uint8_t quantize_byte(double v);

/// [H,W] -> "P5\n<w> <h>\n255\n" + H*W bytes.
std::string encode_pgm(const Tensor& image);
/// [3,H,W] planar RGB -> "P6\n<w> <h>\n255\n" + interleaved bytes.
std::string encode_ppm(const Tensor& rgb);

/// Parses P5 (header comments allowed). Throws FormatError on a malformed header,
/// truncated payload or maxval other than 255.
Tensor decode_pgm(std::string_view bytes);
/// Parses P6 into [3,H,W].
Tensor decode_ppm(std::string_view bytes);

void write_pgm(const Tensor& image, const std::string& path);
void write_ppm(const Tensor& rgb, const std::string& path);
Tensor read_pgm(const std::string& path);
Tensor read_ppm(const std::string& path);

// Whole-file helpers; throw FormatError naming the path on I/O failure.
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace regfactor
