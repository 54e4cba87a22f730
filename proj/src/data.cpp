#include "tatl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tatl/errors.hpp"

namespace tatl {

namespace {

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

}  // namespace

void gen_config::validate() const {
    if (n_samples == 0) throw range_error("gen_config: n_samples must be positive");
    if (image_size < 8 || !is_power_of_two(image_size)) {
        throw range_error("gen_config: image_size must be a power of two >= 8, got " +
                          std::to_string(image_size));
    }
    for (const auto& [attr, p] : presence) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw range_error("gen_config: presence probability for " + attribute_name(attr) +
                              " outside [0,1]");
        }
    }
    for (const auto& [attr, b] : blobs) {
        if (b.count_min == 0 || b.count_max < b.count_min) {
            throw range_error("gen_config: bad blob count range for " + attribute_name(attr));
        }
        if (!(b.radius_min > 0.0) || b.radius_max < b.radius_min) {
            throw range_error("gen_config: bad blob radius range for " + attribute_name(attr));
        }
    }
    if (!(noise_level >= 0.0)) throw range_error("gen_config: noise_level must be >= 0");
}

gen_config preset_config(const std::string& name) {
    gen_config cfg;
    cfg.preset = name;
    for (attribute a : all_attributes) cfg.blobs[a] = blob_range{};
    if (name == "isic2018") {
        cfg.presence = {{attribute::streaks, 0.0386},
                        {attribute::negative_network, 0.0732},
                        {attribute::globules, 0.2321},
                        {attribute::milia_like_cysts, 0.2625},
                        {attribute::pigment_network, 0.5867}};
    } else if (name == "isic2017") {
        cfg.presence = {{attribute::streaks, 0.0798},
                        {attribute::negative_network, 0.0862},
                        {attribute::milia_like_cysts, 0.3355},
                        {attribute::pigment_network, 0.7903},
                        {attribute::globules, 0.0}};
    } else if (name == "uniform") {
        for (attribute a : all_attributes) cfg.presence[a] = 0.5;
    } else {
        throw data_error("preset_config: unknown preset '" + name + "'");
    }
    return cfg;
}

namespace {

struct ellipse {
    double cy, cx;      // center
    double ry, rx;      // semi-axes
    double cos_t, sin_t;

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double u = dx * cos_t + dy * sin_t;
        const double v = -dx * sin_t + dy * cos_t;
        return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
    }
};

// The five textures, one per attribute in Y order.  Each returns the
// intensity shift for a pixel inside a blob; `rng` is consulted only by the
// speckle texture (painted in a fixed scan order, so still deterministic).
double texture_shift(attribute a, std::size_t r, std::size_t c, double dist_to_center,
                     std::mt19937_64& rng) {
    switch (a) {
        case attribute::globules:  // dots on a coarse lattice
            return (r % 3 == 0 && c % 3 == 0) ? 0.35 : 0.06;
        case attribute::milia_like_cysts:  // dark diagonal ridges
            return ((r + c) % 5 < 2) ? -0.30 : -0.06;
        case attribute::negative_network: {  // concentric rings
            const auto band = static_cast<std::size_t>(dist_to_center);
            return (band % 4 < 2) ? 0.32 : 0.08;
        }
        case attribute::pigment_network: {  // bright-biased speckle
            std::uniform_real_distribution<double> d(-0.10, 0.34);
            return d(rng);
        }
        case attribute::streaks:  // axis-aligned mesh
            return (r % 4 == 0 || c % 4 == 0) ? 0.40 : 0.10;
    }
    throw range_error("texture_shift: invalid attribute");
}

}  // namespace

dataset generate_dataset(const gen_config& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const std::size_t n = cfg.image_size;
    const auto fn = static_cast<double>(n);

    dataset ds;
    ds.reserve(cfg.n_samples);
    for (std::size_t si = 0; si < cfg.n_samples; ++si) {
        sample s;
        {
            std::ostringstream id;
            id << "sample_" << std::setw(5) << std::setfill('0') << si;
            s.id = id.str();
        }

        std::uniform_real_distribution<double> center_d(0.40 * fn, 0.60 * fn);
        std::uniform_real_distribution<double> radius_d(0.18 * fn, 0.32 * fn);
        std::uniform_real_distribution<double> angle_d(0.0, 3.14159265358979323846);
        ellipse les{};
        les.cy = center_d(rng);
        les.cx = center_d(rng);
        les.ry = radius_d(rng);
        les.rx = radius_d(rng);
        const double theta = angle_d(rng);
        les.cos_t = std::cos(theta);
        les.sin_t = std::sin(theta);

        binary_mask lesion(n, n);
        std::vector<std::pair<std::size_t, std::size_t>> lesion_pixels;
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
                if (les.contains(static_cast<double>(r), static_cast<double>(c))) {
                    lesion.set(r, c, true);
                    lesion_pixels.emplace_back(r, c);
                }
            }
        }
        // The ellipse ranges keep the center well inside the frame, so this
        // only guards pathological configs.
        if (lesion_pixels.empty()) {
            const std::size_t mid = n / 2;
            lesion.set(mid, mid, true);
            lesion_pixels.emplace_back(mid, mid);
        }

        std::uniform_real_distribution<double> skin_d(0.75, 0.90);
        std::uniform_real_distribution<double> lesion_d(0.35, 0.55);
        const double skin_tone = skin_d(rng);
        const double lesion_tone = lesion_d(rng);

        s.image = tensor_f({1, n, n}, skin_tone);
        for (const auto& [r, c] : lesion_pixels) s.image.at3(0, r, c) = lesion_tone;

        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (attribute a : all_attributes) {
            const auto pit = cfg.presence.find(a);
            const double p = pit == cfg.presence.end() ? 0.0 : pit->second;
            const bool present = unit(rng) < p;
            if (!present) continue;

            const auto bit = cfg.blobs.find(a);
            const blob_range br = bit == cfg.blobs.end() ? blob_range{} : bit->second;
            std::uniform_int_distribution<std::size_t> count_d(br.count_min, br.count_max);
            std::uniform_real_distribution<double> rad_d(br.radius_min, br.radius_max);
            std::uniform_int_distribution<std::size_t> pick(0, lesion_pixels.size() - 1);

            binary_mask m(n, n);
            const std::size_t blobs = count_d(rng);
            for (std::size_t bi = 0; bi < blobs; ++bi) {
                // Anchoring the center on a lesion pixel guarantees a
                // nonempty mask and keeps blobs inside the lesion.
                const auto [bcy, bcx] = lesion_pixels[pick(rng)];
                const double radius = rad_d(rng);
                const auto r_lo = bcy > static_cast<std::size_t>(radius)
                                      ? bcy - static_cast<std::size_t>(radius)
                                      : 0;
                const auto c_lo = bcx > static_cast<std::size_t>(radius)
                                      ? bcx - static_cast<std::size_t>(radius)
                                      : 0;
                const auto r_hi = std::min(n - 1, bcy + static_cast<std::size_t>(radius));
                const auto c_hi = std::min(n - 1, bcx + static_cast<std::size_t>(radius));
                for (std::size_t r = r_lo; r <= r_hi; ++r) {
                    for (std::size_t c = c_lo; c <= c_hi; ++c) {
                        const double dy = static_cast<double>(r) - static_cast<double>(bcy);
                        const double dx = static_cast<double>(c) - static_cast<double>(bcx);
                        const double dist = std::sqrt(dy * dy + dx * dx);
                        if (dist > radius || !lesion.at(r, c)) continue;
                        m.set(r, c, true);
                        s.image.at3(0, r, c) += texture_shift(a, r, c, dist, rng);
                    }
                }
            }
            s.masks.attributes[a] = std::move(m);
        }

        if (cfg.noise_level > 0.0) {
            std::normal_distribution<double> noise(0.0, cfg.noise_level);
            for (double& v : s.image.values()) v += noise(rng);
        }
        for (double& v : s.image.values()) v = std::clamp(v, 0.0, 1.0);

        s.masks.lesion = std::move(lesion);
        ds.push_back(std::move(s));
    }
    return ds;
}

// ---- tensor file -------------------------------------------------------------

namespace {

constexpr char tensor_magic[5] = {'T', 'A', 'T', 'L', 'T'};

}  // namespace

void write_tensor(const tensor_f& t, const std::filesystem::path& path) {
    if (t.rank() == 0) throw dimension_error("write_tensor: rank-0 tensor");
    if (t.rank() > 255) throw dimension_error("write_tensor: rank too large");
    std::string buf;
    buf.append(tensor_magic, sizeof(tensor_magic));
    buf.push_back(static_cast<char>(t.rank()));
    for (std::size_t e : t.shape()) {
        if (e > 0xffffffffull) throw dimension_error("write_tensor: extent too large");
        auto v = static_cast<std::uint32_t>(e);
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    for (double d : t.values()) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("write_tensor: cannot open " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw io_error("write_tensor: write failed for " + path.string());
}

tensor_f read_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("read_tensor: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::size_t pos = 0;
    auto need = [&](std::size_t k) {
        if (pos + k > bytes.size()) {
            throw data_error("read_tensor: truncated tensor file " + path.string());
        }
    };
    need(sizeof(tensor_magic));
    if (std::memcmp(bytes.data(), tensor_magic, sizeof(tensor_magic)) != 0) {
        throw data_error("read_tensor: bad magic in " + path.string());
    }
    pos += sizeof(tensor_magic);
    need(1);
    const auto rank = static_cast<std::uint8_t>(bytes[pos++]);
    if (rank == 0) throw data_error("read_tensor: rank 0 in " + path.string());
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
        need(4);
        std::uint32_t v = 0;
        for (int b = 3; b >= 0; --b) {
            v = (v << 8) | static_cast<std::uint8_t>(bytes[pos + static_cast<std::size_t>(b)]);
        }
        pos += 4;
        if (v == 0) throw data_error("read_tensor: zero extent in " + path.string());
        shape[i] = v;
        count *= v;
    }
    std::vector<double> values(count);
    for (double& d : values) {
        need(8);
        std::uint64_t bits = 0;
        for (int b = 7; b >= 0; --b) {
            bits = (bits << 8) | static_cast<std::uint8_t>(bytes[pos + static_cast<std::size_t>(b)]);
        }
        pos += 8;
        std::memcpy(&d, &bits, 8);
    }
    if (pos != bytes.size()) {
        throw data_error("read_tensor: trailing bytes in " + path.string());
    }
    return tensor_f::from_data(std::move(shape), std::move(values));
}

// ---- manifest ----------------------------------------------------------------

void write_manifest(const manifest& records, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("write_manifest: cannot open " + path.string());
    for (const manifest_record& rec : records) {
        nlohmann::json j;
        j["id"] = rec.id;
        j["image"] = rec.image;
        nlohmann::json masks = nlohmann::json::object();
        for (const auto& [attr, rel] : rec.masks) {
            masks[std::string(1, attribute_code(attr))] = rel;
        }
        j["masks"] = masks;
        if (rec.lesion) j["lesion"] = *rec.lesion;
        out << j.dump() << "\n";
    }
    if (!out) throw io_error("write_manifest: write failed for " + path.string());
}

manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("read_manifest: cannot open " + path.string());

    manifest records;
    std::set<std::string> ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error("read_manifest: bad JSON at " + path.string() + ":" +
                             std::to_string(line_no) + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("id") || !j.contains("image")) {
            throw data_error("read_manifest: record missing id/image at " + path.string() + ":" +
                             std::to_string(line_no));
        }
        manifest_record rec;
        rec.id = j.at("id").get<std::string>();
        rec.image = j.at("image").get<std::string>();
        if (!ids.insert(rec.id).second) {
            throw data_error("read_manifest: duplicate id '" + rec.id + "' in " + path.string());
        }
        if (j.contains("masks")) {
            for (const auto& [key, value] : j.at("masks").items()) {
                if (key.size() != 1) {
                    throw data_error("read_manifest: bad attribute key '" + key + "' in " +
                                     path.string());
                }
                rec.masks[attribute_from_code(key[0])] = value.get<std::string>();
            }
        }
        if (j.contains("lesion") && !j.at("lesion").is_null()) {
            rec.lesion = j.at("lesion").get<std::string>();
        }
        records.push_back(std::move(rec));
    }
    return records;
}

manifest save_dataset(const dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    fs::create_directories(dir / "masks", ec);
    fs::create_directories(dir / "lesions", ec);
    if (!fs::is_directory(dir / "images") || !fs::is_directory(dir / "masks") ||
        !fs::is_directory(dir / "lesions")) {
        throw io_error("save_dataset: cannot create directories under " + dir.string());
    }

    manifest records;
    records.reserve(ds.size());
    for (const sample& s : ds) {
        manifest_record rec;
        rec.id = s.id;
        rec.image = "images/" + s.id + ".tatlt";
        write_tensor(s.image, dir / rec.image);
        for (const auto& [attr, m] : s.masks.attributes) {
            const std::string rel =
                "masks/" + s.id + "_" + std::string(1, attribute_code(attr)) + ".pgm";
            write_pgm(m, dir / rel);
            rec.masks[attr] = rel;
        }
        if (s.masks.lesion) {
            rec.lesion = "lesions/" + s.id + ".pgm";
            write_pgm(*s.masks.lesion, dir / *rec.lesion);
        }
        records.push_back(std::move(rec));
    }
    write_manifest(records, dir / "manifest.jsonl");
    return records;
}

dataset load_dataset(const std::filesystem::path& manifest_path) {
    const manifest records = read_manifest(manifest_path);
    const std::filesystem::path base = manifest_path.parent_path();

    dataset ds;
    ds.reserve(records.size());
    for (const manifest_record& rec : records) {
        sample s;
        s.id = rec.id;
        s.image = read_tensor(base / rec.image);
        for (const auto& [attr, rel] : rec.masks) {
            s.masks.attributes[attr] = read_pgm(base / rel);
        }
        if (rec.lesion) s.masks.lesion = read_pgm(base / *rec.lesion);
        ds.push_back(std::move(s));
    }
    return ds;
}

tensor_f resize_image(const tensor_f& image, std::size_t new_height, std::size_t new_width) {
    if (image.rank() != 3) {
        throw dimension_error("resize_image: expected rank 3 (c,h,w), got " +
                              shape_string(image.shape()));
    }
    if (new_height == 0 || new_width == 0) {
        throw range_error("resize_image: target dimensions must be positive");
    }
    const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
    if (new_height == h && new_width == w) return image;

    tensor_f out({c, new_height, new_width});
    const double sy = static_cast<double>(h) / static_cast<double>(new_height);
    const double sx = static_cast<double>(w) / static_cast<double>(new_width);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t r = 0; r < new_height; ++r) {
            double fy = (static_cast<double>(r) + 0.5) * sy - 0.5;
            fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
            const auto y0 = static_cast<std::size_t>(fy);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const double wy = fy - static_cast<double>(y0);
            for (std::size_t col = 0; col < new_width; ++col) {
                double fx = (static_cast<double>(col) + 0.5) * sx - 0.5;
                fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
                const auto x0 = static_cast<std::size_t>(fx);
                const std::size_t x1 = std::min(x0 + 1, w - 1);
                const double wx = fx - static_cast<double>(x0);
                const double top = image.at3(ch, y0, x0) * (1.0 - wx) + image.at3(ch, y0, x1) * wx;
                const double bot = image.at3(ch, y1, x0) * (1.0 - wx) + image.at3(ch, y1, x1) * wx;
                out.at3(ch, r, col) = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    return out;
}

}  // namespace tatl
