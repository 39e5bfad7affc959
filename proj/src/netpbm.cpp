#include "regfactor/netpbm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "regfactor/errors.hpp"

namespace regfactor {

namespace {

struct Header {
    int64_t width = 0;
    int64_t height = 0;
    size_t payload = 0;  // offset of the first sample byte
};

Header parse_header(std::string_view bytes, std::string_view magic) {
    if (bytes.substr(0, 2) != magic) {
        throw FormatError("netpbm: expected magic " + std::string(magic));
    }
    size_t pos = 2;
    auto next_token = [&]() -> int64_t {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            throw FormatError("netpbm: malformed header");
        }
        int64_t v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + (bytes[pos] - '0');
            if (v > (int64_t{1} << 31)) throw FormatError("netpbm: header value out of range");
            ++pos;
        }
        return v;
    };
    Header h;
    h.width = next_token();
    h.height = next_token();
    const int64_t maxval = next_token();
    if (h.width <= 0 || h.height <= 0) throw FormatError("netpbm: non-positive image size");
    if (maxval != 255) {
        throw FormatError("netpbm: unsupported maxval " + std::to_string(maxval) + " (only 255 is supported)");
    }
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        throw FormatError("netpbm: missing whitespace after maxval");
    }
    h.payload = pos + 1;
    return h;
}

std::string header(std::string_view magic, int64_t w, int64_t h) {
    return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

}  // namespace

uint8_t quantize_byte(double v) {
    if (!std::isfinite(v)) throw NumericError("quantize_byte: non-finite sample");
    return static_cast<uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
}

std::string encode_pgm(const Tensor& image) {
    if (image.rank() != 2) throw ShapeError("encode_pgm: expected [H,W], got " + shape_str(image.shape()));
    std::string out = header("P5", image.dim(1), image.dim(0));
    out.reserve(out.size() + image.numel());
    for (double v : image.data()) out.push_back(static_cast<char>(quantize_byte(v)));
    return out;
}

std::string encode_ppm(const Tensor& rgb) {
    if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("encode_ppm: expected [3,H,W], got " + shape_str(rgb.shape()));
    const int64_t h = rgb.dim(1), w = rgb.dim(2);
    const auto plane = static_cast<size_t>(h * w);
    std::string out = header("P6", w, h);
    out.reserve(out.size() + 3 * plane);
    for (size_t i = 0; i < plane; ++i)
        for (size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(quantize_byte(rgb[c * plane + i])));
    return out;
}

Tensor decode_pgm(std::string_view bytes) {
    const Header h = parse_header(bytes, "P5");
    const auto n = static_cast<size_t>(h.width * h.height);
    if (bytes.size() - h.payload < n) throw FormatError("netpbm: truncated payload");
    Tensor img(Shape{h.height, h.width});
    for (size_t i = 0; i < n; ++i) img[i] = static_cast<unsigned char>(bytes[h.payload + i]) / 255.0;
    return img;
}

Tensor decode_ppm(std::string_view bytes) {
    const Header h = parse_header(bytes, "P6");
    const auto plane = static_cast<size_t>(h.width * h.height);
    if (bytes.size() - h.payload < 3 * plane) throw FormatError("netpbm: truncated payload");
    Tensor rgb(Shape{3, h.height, h.width});
    for (size_t i = 0; i < plane; ++i)
        for (size_t c = 0; c < 3; ++c) rgb[c * plane + i] = static_cast<unsigned char>(bytes[h.payload + 3 * i + c]) / 255.0;
    return rgb;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for '" + path + "'");
}

void write_pgm(const Tensor& image, const std::string& path) { write_file(path, encode_pgm(image)); }
void write_ppm(const Tensor& rgb, const std::string& path) { write_file(path, encode_ppm(rgb)); }

Tensor read_pgm(const std::string& path) {
    const std::string bytes = read_file(path);
    try {
        return decode_pgm(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
}

Tensor read_ppm(const std::string& path) {
    const std::string bytes = read_file(path);
    try {
        return decode_ppm(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
}

}  // namespace regfactor
