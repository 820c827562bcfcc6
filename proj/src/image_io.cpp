#include "cfm/image_io.hpp"

#include <cmath>
#include <fstream>
#include <vector>

namespace cfm {

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in, const std::string& path) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty()) throw DataError("'" + path + "': truncated header");
    return tok;
}

std::int64_t parse_dim(const std::string& tok, const std::string& path) {
    try {
        const std::int64_t v = std::stoll(tok);
        if (v <= 0) throw DataError("'" + path + "': non-positive dimension");
        return v;
    } catch (const std::invalid_argument&) {
        throw DataError("'" + path + "': malformed header token '" + tok + "'");
    }
}

}  // namespace

Image load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image '" + path + "'");

    const std::string magic = next_token(in, path);
    std::int64_t channels;
    if (magic == "P5") {
        channels = 1;
    } else if (magic == "P6") {
        channels = 3;
    } else {
        throw DataError("'" + path + "': unsupported format '" + magic + "' (want binary P5/P6)");
    }

    const std::int64_t width = parse_dim(next_token(in, path), path);
    const std::int64_t height = parse_dim(next_token(in, path), path);
    const std::int64_t maxval = parse_dim(next_token(in, path), path);
    if (maxval != 255) throw DataError("'" + path + "': only maxval 255 is supported");
    // the single whitespace byte after maxval was consumed by next_token

    const std::int64_t count = channels * height * width;
    std::vector<unsigned char> raw(static_cast<std::size_t>(count));
    in.read(reinterpret_cast<char*>(raw.data()), count);
    if (in.gcount() != count) throw DataError("'" + path + "': truncated pixel data");

    Image img(channels, height, width);
    // interleaved file order -> planar
    for (std::int64_t i = 0; i < height; ++i)
        for (std::int64_t j = 0; j < width; ++j)
            for (std::int64_t c = 0; c < channels; ++c)
                img.at(c, i, j) =
                    static_cast<double>(raw[static_cast<std::size_t>((i * width + j) * channels + c)]) /
                    255.0;
    return img;
}

void save_image(const Image& image, const std::string& path) {
    if (image.channels != 1 && image.channels != 3) {
        throw DataError("save_image: only 1- or 3-channel images are supported");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write image '" + path + "'");
    out << (image.channels == 1 ? "P5" : "P6") << "\n"
        << image.width << " " << image.height << "\n255\n";

    std::vector<unsigned char> raw(static_cast<std::size_t>(image.numel()));
    for (std::int64_t i = 0; i < image.height; ++i)
        for (std::int64_t j = 0; j < image.width; ++j)
            for (std::int64_t c = 0; c < image.channels; ++c) {
                double v = image.at(c, i, j);
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                raw[static_cast<std::size_t>((i * image.width + j) * image.channels + c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size()));
    if (!out) throw DataError("write failed for image '" + path + "'");
}

}  // namespace cfm
