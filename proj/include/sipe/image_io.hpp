#pragma once

// Binary PPM (P6) / PGM (P5) with maxval 255, plus atomic file output.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sipe {

struct RasterImage {
    std::size_t width = 0, height = 0, channels = 0;  // channels: 3 for PPM, 1 for PGM
    std::vector<std::uint8_t> pixels;                  // interleaved, row-major
};

/// Write `bytes` to `path` through a sibling temporary file and a rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp.string());
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline std::string encode_pnm(const RasterImage& img) {
    if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("encode_pnm: 1 or 3 channels required");
    if (img.pixels.size() != img.width * img.height * img.channels)
        throw std::invalid_argument("encode_pnm: pixel buffer size mismatch");
    std::string out = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " +
                      std::to_string(img.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
    return out;
}

/// Parse a P5/P6 byte string; `name` is used in error messages.
inline RasterImage decode_pnm(const std::string& bytes, const std::string& name) {
    std::size_t pos = 0;
    auto fail = [&](const std::string& what) {
        return std::runtime_error(name + ": " + what + " at byte " + std::to_string(pos));
    };
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&] {
        skip_space();
        if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) throw fail("expected a number");
        std::size_t v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
            if (v > (1u << 20)) throw fail("number too large");
            ++pos;
        }
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) throw fail("not a binary PGM/PPM");
    RasterImage img;
    img.channels = bytes[1] == '6' ? 3 : 1;
    pos = 2;
    img.width = number();
    img.height = number();
    std::size_t maxval = number();
    if (maxval != 255) throw fail("unsupported maxval " + std::to_string(maxval));
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw fail("missing header terminator");
    ++pos;
    const std::size_t need = img.width * img.height * img.channels;
    if (bytes.size() - pos < need) {
        pos = bytes.size();
        throw fail("truncated pixel data (need " + std::to_string(need) + " bytes)");
    }
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
    return img;
}

inline RasterImage read_pnm(const std::filesystem::path& path) { return decode_pnm(read_file(path), path.string()); }

inline void write_pnm(const std::filesystem::path& path, const RasterImage& img) {
    write_file_atomic(path, encode_pnm(img));
}

}  // namespace sipe
