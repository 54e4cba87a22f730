#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tatl/mask.hpp"
#include "tatl/tensor.hpp"

namespace tatl {

// Blob placement ranges for one attribute's procedural pattern.
struct blob_range {
    std::size_t count_min = 1;
    std::size_t count_max = 3;
    double radius_min = 2.0;
    double radius_max = 5.0;
};

// Configuration of the synthetic dataset generator.  Presence probabilities
// follow the class-rate presets; every attribute draws its presence
// independently per sample.
struct gen_config {
    std::size_t n_samples = 100;
    std::size_t image_size = 32;  // square, power of two
    std::map<attribute, double> presence;
    std::map<attribute, blob_range> blobs;
    double noise_level = 0.03;
    std::uint64_t seed = 0;
    std::string preset = "custom";

    void validate() const;
};

// Named presence presets: "isic2018", "isic2017" (class rates of the two
// challenge datasets; globules absent in 2017), and "uniform" (all 0.5).
gen_config preset_config(const std::string& name);

// One dataset element: a single-channel image (1,h,w) plus its masks.
struct sample {
    std::string id;
    tensor_f image;
    attribute_mask_set masks;
};

using dataset = std::vector<sample>;

// Procedurally generates n_samples images: an elliptical lesion (darker than
// the surrounding skin) over a noisy background, with per-attribute textured
// blobs placed inside the lesion (dots, ridges, rings, speckle, mesh — one
// texture per attribute).  The lesion mask is always present; an attribute
// mask exists iff the attribute was drawn present, and is then nonempty and
// a subset of the lesion.  Deterministic under seed.
dataset generate_dataset(const gen_config& cfg);

// Manifest record; paths are relative to the manifest file's directory.
struct manifest_record {
    std::string id;
    std::string image;
    std::map<attribute, std::string> masks;
    std::optional<std::string> lesion;
};

using manifest = std::vector<manifest_record>;

// JSON-lines serialization, one record per line:
//   {"id":..., "image":..., "masks":{"G":...}, "lesion":...}
void write_manifest(const manifest& records, const std::filesystem::path& path);
manifest read_manifest(const std::filesystem::path& path);

// Writes images (tensor files), masks (PGM), and manifest.jsonl under `dir`;
// returns the manifest. Layout: images/<id>.tatlt, masks/<id>_<CODE>.pgm,
// lesions/<id>.pgm.
manifest save_dataset(const dataset& ds, const std::filesystem::path& dir);

// Loads a dataset from its manifest; missing attribute masks stay absent
// (downstream code treats them as all-zero targets).
dataset load_dataset(const std::filesystem::path& manifest_path);

// Bilinear resampling of a (c,h,w) tensor.  Sample centers are aligned:
// source coordinate = (dst + 0.5) * src/dst - 0.5, clamped to the valid
// range, so constant images stay constant and values never leave the input
// range.
tensor_f resize_image(const tensor_f& image, std::size_t new_height, std::size_t new_width);

// Raw tensor file: magic "TATLT", u8 rank, u32 little-endian extents, then
// IEEE-754 64-bit little-endian values in row-major order.
void write_tensor(const tensor_f& t, const std::filesystem::path& path);
tensor_f read_tensor(const std::filesystem::path& path);

}  // namespace tatl
