#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tatl/errors.hpp"
#include "tatl/tensor.hpp"

namespace tatl {

// The five dermoscopic attributes, in the fixed order used for reports and
// serialized outputs.  Single-letter codes key mask files and manifests.
enum class attribute : std::uint8_t {
    globules,
    milia_like_cysts,
    negative_network,
    pigment_network,
    streaks,
};

inline constexpr std::array<attribute, 5> all_attributes = {
    attribute::globules,        attribute::milia_like_cysts, attribute::negative_network,
    attribute::pigment_network, attribute::streaks,
};

char attribute_code(attribute a);
std::string attribute_name(attribute a);
attribute attribute_from_code(char code);  // throws data_error on unknown code

// Binary image stored one byte per pixel; every element is exactly 0 or 1.
class binary_mask {
public:
    binary_mask() = default;

    binary_mask(std::size_t height, std::size_t width, std::uint8_t fill = 0)
        : height_(height), width_(width), bits_(height * width, fill ? 1 : 0) {}

    static binary_mask from_bytes(std::size_t height, std::size_t width,
                                  std::vector<std::uint8_t> bytes);

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t size() const { return bits_.size(); }
    bool empty() const { return bits_.empty(); }

    std::uint8_t at(std::size_t row, std::size_t col) const {
        return bits_[row * width_ + col];
    }
    void set(std::size_t row, std::size_t col, bool value) {
        bits_[row * width_ + col] = value ? 1 : 0;
    }

    const std::vector<std::uint8_t>& bits() const { return bits_; }

    // Number of set pixels.
    std::size_t count() const;

    bool operator==(const binary_mask& other) const = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<std::uint8_t> bits_;
};

// Per-sample ground truth: masks for whichever attributes are present
// (absent attributes are implicitly all-zero) plus an optional lesion mask.
struct attribute_mask_set {
    std::map<attribute, binary_mask> attributes;
    std::optional<binary_mask> lesion;
};

// Half-open pixel rectangle [row_begin, row_end) x [col_begin, col_end).
struct crop_box {
    std::size_t row_begin = 0;
    std::size_t row_end = 0;
    std::size_t col_begin = 0;
    std::size_t col_end = 0;

    std::size_t height() const { return row_end - row_begin; }
    std::size_t width() const { return col_end - col_begin; }

    bool operator==(const crop_box& other) const = default;
};

// Pixelwise OR of every mask present in the set (lesion excluded).  All
// present masks must share dimensions; absent attributes contribute zeros.
// With no attribute masks at all, the lesion mask (if present) fixes the
// output dimensions; a fully empty set has no well-defined size and throws.
binary_mask union_mask(const attribute_mask_set& masks);

// Tight bounding box of the set pixels, grown by `offset` pixels on all four
// sides and clamped to the image bounds.  An all-zero mask has no box to
// grow, so the whole image is returned.
crop_box lesion_bbox(const binary_mask& mask, std::size_t offset);

// Extract the boxed region.  The box must be non-degenerate and lie inside
// the operand.
binary_mask crop(const binary_mask& mask, const crop_box& box);
tensor_f crop(const tensor_f& image, const crop_box& box);  // image is (c,h,w)

// Nearest-neighbour resampling; source index = floor(dst * src_len / dst_len).
// Upscaling by an integer factor replicates pixels in blocks, and scaling
// down by the same factor restores the original mask exactly.
binary_mask resize_mask(const binary_mask& mask, std::size_t new_height, std::size_t new_width);

// Threshold a probability map of shape (h,w) or (1,h,w) into a mask;
// values >= threshold map to 1.  Probabilities must be finite and the
// threshold must lie in [0,1].
binary_mask binarize(const tensor_f& probabilities, double threshold = 0.5);

// Binary PGM (P5, maxval 255): set pixels are written as 255, clear as 0.
// Reading accepts any P5 file and maps nonzero bytes to 1.
void write_pgm(const binary_mask& mask, const std::filesystem::path& path);
binary_mask read_pgm(const std::filesystem::path& path);

}  // namespace tatl
