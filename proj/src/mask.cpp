#include "tatl/mask.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace tatl {

char attribute_code(attribute a) {
    switch (a) {
        case attribute::globules: return 'G';
        case attribute::milia_like_cysts: return 'M';
        case attribute::negative_network: return 'N';
        case attribute::pigment_network: return 'P';
        case attribute::streaks: return 'S';
    }
    throw range_error("attribute_code: invalid attribute value");
}

std::string attribute_name(attribute a) {
    switch (a) {
        case attribute::globules: return "globules";
        case attribute::milia_like_cysts: return "milia_like_cysts";
        case attribute::negative_network: return "negative_network";
        case attribute::pigment_network: return "pigment_network";
        case attribute::streaks: return "streaks";
    }
    throw range_error("attribute_name: invalid attribute value");
}

attribute attribute_from_code(char code) {
    switch (code) {
        case 'G': return attribute::globules;
        case 'M': return attribute::milia_like_cysts;
        case 'N': return attribute::negative_network;
        case 'P': return attribute::pigment_network;
        case 'S': return attribute::streaks;
    }
    throw data_error(std::string("attribute_from_code: unknown code '") + code + "'");
}

binary_mask binary_mask::from_bytes(std::size_t height, std::size_t width,
                                    std::vector<std::uint8_t> bytes) {
    if (bytes.size() != height * width) {
        throw dimension_error("binary_mask::from_bytes: expected " + std::to_string(height) +
                              "x" + std::to_string(width) + " = " +
                              std::to_string(height * width) + " bytes, got " +
                              std::to_string(bytes.size()));
    }
    for (std::uint8_t b : bytes) {
        if (b > 1) {
            throw data_error("binary_mask::from_bytes: element not 0 or 1");
        }
    }
    binary_mask m;
    m.height_ = height;
    m.width_ = width;
    m.bits_ = std::move(bytes);
    return m;
}

std::size_t binary_mask::count() const {
    return static_cast<std::size_t>(
        std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

binary_mask union_mask(const attribute_mask_set& masks) {
    const binary_mask* reference = nullptr;
    for (const auto& [attr, mask] : masks.attributes) {
        (void)attr;
        reference = &mask;
        break;
    }
    if (reference == nullptr && masks.lesion) reference = &*masks.lesion;
    if (reference == nullptr) {
        throw dimension_error("union_mask: empty mask set has no dimensions");
    }

    binary_mask out(reference->height(), reference->width());
    for (const auto& [attr, mask] : masks.attributes) {
        if (mask.height() != out.height() || mask.width() != out.width()) {
            throw dimension_error("union_mask: mask for attribute " + attribute_name(attr) +
                                  " is " + std::to_string(mask.height()) + "x" +
                                  std::to_string(mask.width()) + ", expected " +
                                  std::to_string(out.height()) + "x" +
                                  std::to_string(out.width()));
        }
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (mask.bits()[i]) out.set(i / out.width(), i % out.width(), true);
        }
    }
    return out;
}

crop_box lesion_bbox(const binary_mask& mask, std::size_t offset) {
    if (mask.empty()) throw dimension_error("lesion_bbox: empty mask");

    std::size_t row_lo = mask.height(), row_hi = 0;
    std::size_t col_lo = mask.width(), col_hi = 0;
    bool any = false;
    for (std::size_t r = 0; r < mask.height(); ++r) {
        for (std::size_t c = 0; c < mask.width(); ++c) {
            if (!mask.at(r, c)) continue;
            any = true;
            row_lo = std::min(row_lo, r);
            row_hi = std::max(row_hi, r);
            col_lo = std::min(col_lo, c);
            col_hi = std::max(col_hi, c);
        }
    }
    if (!any) {
        // Nothing to anchor the box to; fall back to the whole image.
        return crop_box{0, mask.height(), 0, mask.width()};
    }
    crop_box box;
    box.row_begin = row_lo > offset ? row_lo - offset : 0;
    box.col_begin = col_lo > offset ? col_lo - offset : 0;
    box.row_end = std::min(mask.height(), row_hi + offset + 1);
    box.col_end = std::min(mask.width(), col_hi + offset + 1);
    return box;
}

namespace {

void check_box(const crop_box& box, std::size_t height, std::size_t width,
               const char* caller) {
    if (box.row_begin >= box.row_end || box.col_begin >= box.col_end) {
        throw dimension_error(std::string(caller) + ": degenerate crop box");
    }
    if (box.row_end > height || box.col_end > width) {
        throw dimension_error(std::string(caller) + ": box [" + std::to_string(box.row_begin) +
                          "," + std::to_string(box.row_end) + ")x[" +
                          std::to_string(box.col_begin) + "," + std::to_string(box.col_end) +
                          ") exceeds " + std::to_string(height) + "x" + std::to_string(width));
    }
}

}  // namespace

binary_mask crop(const binary_mask& mask, const crop_box& box) {
    check_box(box, mask.height(), mask.width(), "crop");
    binary_mask out(box.height(), box.width());
    for (std::size_t r = 0; r < box.height(); ++r) {
        for (std::size_t c = 0; c < box.width(); ++c) {
            out.set(r, c, mask.at(box.row_begin + r, box.col_begin + c) != 0);
        }
    }
    return out;
}

tensor_f crop(const tensor_f& image, const crop_box& box) {
    if (image.rank() != 3) {
        throw dimension_error("crop: image must be rank 3 (c,h,w), got rank " +
                              std::to_string(image.rank()));
    }
    check_box(box, image.extent(1), image.extent(2), "crop");
    tensor_f out({image.extent(0), box.height(), box.width()});
    for (std::size_t ch = 0; ch < image.extent(0); ++ch) {
        for (std::size_t r = 0; r < box.height(); ++r) {
            for (std::size_t c = 0; c < box.width(); ++c) {
                out.at3(ch, r, c) = image.at3(ch, box.row_begin + r, box.col_begin + c);
            }
        }
    }
    return out;
}

binary_mask resize_mask(const binary_mask& mask, std::size_t new_height, std::size_t new_width) {
    if (mask.empty()) throw dimension_error("resize_mask: empty mask");
    if (new_height == 0 || new_width == 0) {
        throw range_error("resize_mask: target dimensions must be positive");
    }
    binary_mask out(new_height, new_width);
    for (std::size_t r = 0; r < new_height; ++r) {
        const std::size_t src_r = r * mask.height() / new_height;
        for (std::size_t c = 0; c < new_width; ++c) {
            const std::size_t src_c = c * mask.width() / new_width;
            out.set(r, c, mask.at(src_r, src_c) != 0);
        }
    }
    return out;
}

binary_mask binarize(const tensor_f& probabilities, double threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
        throw range_error("binarize: threshold " + std::to_string(threshold) +
                          " outside [0,1]");
    }
    std::size_t height = 0, width = 0;
    if (probabilities.rank() == 2) {
        height = probabilities.extent(0);
        width = probabilities.extent(1);
    } else if (probabilities.rank() == 3 && probabilities.extent(0) == 1) {
        height = probabilities.extent(1);
        width = probabilities.extent(2);
    } else {
        throw dimension_error("binarize: expected shape (h,w) or (1,h,w), got " +
                              shape_string(probabilities.shape()));
    }
    binary_mask out(height, width);
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        const double p = probabilities[i];
        if (!(p >= 0.0 && p <= 1.0)) {
            throw range_error("binarize: probability outside [0,1]");
        }
        out.set(i / width, i % width, p >= threshold);
    }
    return out;
}

void write_pgm(const binary_mask& mask, const std::filesystem::path& path) {
    if (mask.empty()) throw dimension_error("write_pgm: empty mask");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("write_pgm: cannot open " + path.string());
    out << "P5\n" << mask.width() << " " << mask.height() << "\n255\n";
    std::vector<std::uint8_t> row(mask.width());
    for (std::size_t r = 0; r < mask.height(); ++r) {
        for (std::size_t c = 0; c < mask.width(); ++c) {
            row[c] = mask.at(r, c) ? 255 : 0;
        }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw io_error("write_pgm: write failed for " + path.string());
}

namespace {

// Reads the next whitespace-delimited token, skipping '#' comment lines as
// the PGM grammar allows between header fields.
std::string next_pgm_token(std::istream& in) {
    std::string token;
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (std::isspace(ch)) {
            ch = in.get();
        } else {
            break;
        }
    }
    while (ch != EOF && !std::isspace(ch) && ch != '#') {
        token.push_back(static_cast<char>(ch));
        ch = in.get();
    }
    if (ch == '#') in.unget();
    return token;
}

std::size_t parse_pgm_number(const std::string& token, const std::filesystem::path& path,
                             const char* field) {
    if (token.empty() || token.find_first_not_of("0123456789") != std::string::npos) {
        throw data_error("read_pgm: bad " + std::string(field) + " in " + path.string());
    }
    return static_cast<std::size_t>(std::stoull(token));
}

}  // namespace

binary_mask read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("read_pgm: cannot open " + path.string());

    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '5') {
        throw data_error("read_pgm: not a P5 file: " + path.string());
    }
    const std::size_t width = parse_pgm_number(next_pgm_token(in), path, "width");
    const std::size_t height = parse_pgm_number(next_pgm_token(in), path, "height");
    const std::size_t maxval = parse_pgm_number(next_pgm_token(in), path, "maxval");
    if (width == 0 || height == 0) {
        throw data_error("read_pgm: zero dimension in " + path.string());
    }
    if (maxval == 0 || maxval > 255) {
        throw data_error("read_pgm: unsupported maxval " + std::to_string(maxval) + " in " +
                         path.string());
    }
    // Exactly one whitespace byte separates the header from the raster.
    std::vector<std::uint8_t> raw(height * width);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw data_error("read_pgm: truncated raster in " + path.string());
    }
    binary_mask out(height, width);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        out.set(i / width, i % width, raw[i] != 0);
    }
    return out;
}

}  // namespace tatl
