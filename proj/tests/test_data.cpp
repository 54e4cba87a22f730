#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "tatl/data.hpp"
#include "tatl/errors.hpp"
#include "tatl/mask.hpp"

using namespace tatl;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

bool masks_equal(const attribute_mask_set& a, const attribute_mask_set& b) {
    if (a.attributes.size() != b.attributes.size()) return false;
    for (const auto& [attr, mask] : a.attributes) {
        const auto it = b.attributes.find(attr);
        if (it == b.attributes.end() || !(it->second == mask)) return false;
    }
    if (a.lesion.has_value() != b.lesion.has_value()) return false;
    if (a.lesion && !(*a.lesion == *b.lesion)) return false;
    return true;
}

}  // namespace

TEST_CASE("generation is deterministic under the seed") {
    gen_config cfg = preset_config("uniform");
    cfg.n_samples = 12;
    cfg.image_size = 32;
    cfg.seed = 42;
    const dataset a = generate_dataset(cfg);
    const dataset b = generate_dataset(cfg);
    REQUIRE(a.size() == 12);
    REQUIRE(b.size() == 12);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].id == b[i].id);
        CHECK(a[i].image == b[i].image);
        CHECK(masks_equal(a[i].masks, b[i].masks));
    }

    gen_config other = cfg;
    other.seed = 43;
    const dataset c = generate_dataset(other);
    CHECK_FALSE(a[0].image == c[0].image);
}

TEST_CASE("generated samples are well-formed") {
    gen_config cfg = preset_config("uniform");
    cfg.n_samples = 20;
    cfg.image_size = 32;
    cfg.seed = 7;
    const dataset ds = generate_dataset(cfg);
    for (const sample& s : ds) {
        REQUIRE(s.image.shape() == std::vector<std::size_t>{1, 32, 32});
        for (std::size_t i = 0; i < s.image.size(); ++i) {
            CHECK(s.image[i] >= 0.0);
            CHECK(s.image[i] <= 1.0);
        }
        REQUIRE(s.masks.lesion.has_value());
        const binary_mask& lesion = *s.masks.lesion;
        CHECK(lesion.count() > 0);
        for (const auto& [attr, mask] : s.masks.attributes) {
            CHECK(mask.count() > 0);  // present implies nonempty
            for (std::size_t r = 0; r < 32; ++r) {
                for (std::size_t c = 0; c < 32; ++c) {
                    if (mask.at(r, c)) CHECK(lesion.at(r, c));  // subset of lesion
                }
            }
        }
    }
}

TEST_CASE("presence rates track the configured probabilities") {
    // chi-squared test per attribute at significance 0.01, 1 degree of freedom
    gen_config cfg = preset_config("isic2018");
    cfg.n_samples = 5000;
    cfg.image_size = 16;
    cfg.seed = 11;
    const dataset ds = generate_dataset(cfg);
    const double crit = 6.6348966010212145;
    for (const auto& [attr, p] : cfg.presence) {
        std::size_t hits = 0;
        for (const sample& s : ds) hits += s.masks.attributes.count(attr);
        const double expected = p * 5000.0;
        const double expected_miss = (1.0 - p) * 5000.0;
        const double diff = static_cast<double>(hits) - expected;
        const double chi2 =
            diff * diff / expected + diff * diff / expected_miss;
        INFO("attribute ", attribute_code(attr), " hits ", hits);
        CHECK(chi2 <= crit);
    }
}

TEST_CASE("rarest attribute count falls in its 99 percent binomial interval") {
    // n=1000, p=0.0386: central interval [24, 55]
    gen_config cfg = preset_config("isic2018");
    cfg.n_samples = 1000;
    cfg.image_size = 16;
    cfg.seed = 3;
    const dataset ds = generate_dataset(cfg);
    std::size_t hits = 0;
    for (const sample& s : ds) hits += s.masks.attributes.count(attribute::streaks);
    CHECK(hits >= 24);
    CHECK(hits <= 55);
}

TEST_CASE("zero presence probabilities yield no attribute masks") {
    gen_config cfg = preset_config("uniform");
    cfg.n_samples = 6;
    cfg.image_size = 16;
    for (auto& [attr, p] : cfg.presence) p = 0.0;
    const dataset ds = generate_dataset(cfg);
    for (const sample& s : ds) {
        CHECK(s.masks.attributes.empty());
        CHECK(s.masks.lesion.has_value());
    }
}

TEST_CASE("presets pin the published class rates") {
    const gen_config d18 = preset_config("isic2018");
    CHECK(d18.presence.at(attribute::streaks) == doctest::Approx(0.0386).epsilon(1e-12));
    CHECK(d18.presence.at(attribute::negative_network) == doctest::Approx(0.0732).epsilon(1e-12));
    CHECK(d18.presence.at(attribute::globules) == doctest::Approx(0.2321).epsilon(1e-12));
    CHECK(d18.presence.at(attribute::milia_like_cysts) == doctest::Approx(0.2625).epsilon(1e-12));
    CHECK(d18.presence.at(attribute::pigment_network) == doctest::Approx(0.5867).epsilon(1e-12));

    const gen_config d17 = preset_config("isic2017");
    CHECK(d17.presence.at(attribute::streaks) == doctest::Approx(0.0798).epsilon(1e-12));
    CHECK(d17.presence.at(attribute::negative_network) == doctest::Approx(0.0862).epsilon(1e-12));
    CHECK(d17.presence.at(attribute::milia_like_cysts) == doctest::Approx(0.3355).epsilon(1e-12));
    CHECK(d17.presence.at(attribute::pigment_network) == doctest::Approx(0.7903).epsilon(1e-12));
    CHECK(d17.presence.at(attribute::globules) == 0.0);

    const gen_config uni = preset_config("uniform");
    for (const auto& [attr, p] : uni.presence) CHECK(p == 0.5);

    CHECK_THROWS_AS(preset_config("isic2099"), data_error);
}

TEST_CASE("config validation rejects bad sizes and probabilities") {
    gen_config cfg = preset_config("uniform");
    CHECK_NOTHROW(cfg.validate());
    gen_config bad = cfg;
    bad.image_size = 12;  // not a power of two
    CHECK_THROWS_AS(bad.validate(), range_error);
    bad = cfg;
    bad.image_size = 4;  // below the minimum
    CHECK_THROWS_AS(bad.validate(), range_error);
    bad = cfg;
    bad.presence[attribute::globules] = 1.5;
    CHECK_THROWS_AS(bad.validate(), range_error);
    bad = cfg;
    bad.n_samples = 0;
    CHECK_THROWS_AS(bad.validate(), range_error);
}

TEST_CASE("save and load round-trip a dataset exactly") {
    const fs::path dir = temp_dir("tatl_test_roundtrip");
    gen_config cfg = preset_config("uniform");
    cfg.n_samples = 8;
    cfg.image_size = 16;
    cfg.seed = 9;
    const dataset ds = generate_dataset(cfg);
    const manifest m = save_dataset(ds, dir);
    REQUIRE(m.size() == ds.size());
    CHECK(fs::exists(dir / "manifest.jsonl"));

    const dataset loaded = load_dataset(dir / "manifest.jsonl");
    REQUIRE(loaded.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(loaded[i].id == ds[i].id);
        CHECK(loaded[i].image == ds[i].image);
        CHECK(masks_equal(loaded[i].masks, ds[i].masks));
    }
    fs::remove_all(dir);
}

TEST_CASE("loading reports the missing file by name") {
    const fs::path dir = temp_dir("tatl_test_missing");
    gen_config cfg = preset_config("uniform");
    cfg.n_samples = 3;
    cfg.image_size = 16;
    cfg.seed = 2;
    const dataset ds = generate_dataset(cfg);
    save_dataset(ds, dir);
    const fs::path victim = dir / "images" / (ds[1].id + ".tatlt");
    REQUIRE(fs::exists(victim));
    fs::remove(victim);
    try {
        load_dataset(dir / "manifest.jsonl");
        FAIL("expected io_error");
    } catch (const io_error& e) {
        CHECK(std::string(e.what()).find(ds[1].id) != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("manifests with duplicate ids are rejected") {
    const fs::path dir = temp_dir("tatl_test_dup");
    gen_config cfg = preset_config("uniform");
    cfg.n_samples = 2;
    cfg.image_size = 16;
    const dataset ds = generate_dataset(cfg);
    manifest m = save_dataset(ds, dir);
    m.push_back(m.front());
    write_manifest(m, dir / "manifest.jsonl");
    CHECK_THROWS_AS(load_dataset(dir / "manifest.jsonl"), data_error);
    fs::remove_all(dir);
}

TEST_CASE("manifest text round-trips ids, paths, and optional lesions") {
    const fs::path dir = temp_dir("tatl_test_manifest");
    manifest m;
    manifest_record r1;
    r1.id = "alpha";
    r1.image = "images/alpha.tatlt";
    r1.masks[attribute::globules] = "masks/alpha_G.pgm";
    r1.lesion = "lesions/alpha.pgm";
    manifest_record r2;
    r2.id = "beta";
    r2.image = "images/beta.tatlt";  // no masks, no lesion
    m.push_back(r1);
    m.push_back(r2);
    write_manifest(m, dir / "manifest.jsonl");
    const manifest back = read_manifest(dir / "manifest.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].id == "alpha");
    CHECK(back[0].masks.at(attribute::globules) == "masks/alpha_G.pgm");
    CHECK(back[0].lesion.has_value());
    CHECK(back[1].masks.empty());
    CHECK_FALSE(back[1].lesion.has_value());
    fs::remove_all(dir);
}

TEST_CASE("tensor files round-trip bit-exactly and reject trailing bytes") {
    const fs::path dir = temp_dir("tatl_test_tensor");
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    tensor_f t({2, 3, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
    const fs::path path = dir / "t.tatlt";
    write_tensor(t, path);
    const tensor_f back = read_tensor(path);
    CHECK(back == t);

    {
        std::ofstream out(path, std::ios::binary | std::ios::app);
        out.put(0);
    }
    CHECK_THROWS_AS(read_tensor(path), data_error);
    {
        std::ofstream out(dir / "bad.tatlt", std::ios::binary);
        out.write("WRONG", 5);
    }
    CHECK_THROWS_AS(read_tensor(dir / "bad.tatlt"), data_error);
    CHECK_THROWS_AS(read_tensor(dir / "absent.tatlt"), io_error);
    fs::remove_all(dir);
}

TEST_CASE("bilinear resize interpolates with aligned sample centers") {
    // widening [0, 1] to four columns lands samples at source x = -0.25,
    // 0.25, 0.75, 1.25, clamped to [0, 1]: values 0, 0.25, 0.75, 1.
    const tensor_f img = tensor_f::from_data({1, 2, 2}, {0.0, 1.0, 0.0, 1.0});
    const tensor_f wide = resize_image(img, 2, 4);
    REQUIRE(wide.shape() == std::vector<std::size_t>{1, 2, 4});
    for (std::size_t r = 0; r < 2; ++r) {
        CHECK(wide.at3(0, r, 0) == doctest::Approx(0.0));
        CHECK(wide.at3(0, r, 1) == doctest::Approx(0.25));
        CHECK(wide.at3(0, r, 2) == doctest::Approx(0.75));
        CHECK(wide.at3(0, r, 3) == doctest::Approx(1.0));
    }
}

TEST_CASE("resize is the identity at the same size and preserves constants") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    tensor_f img({2, 5, 7});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = u(rng);
    CHECK(resize_image(img, 5, 7) == img);

    const tensor_f flat({1, 4, 4}, 0.625);
    const tensor_f out = resize_image(flat, 9, 3);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(0.625));

    // values never leave the input range
    const tensor_f up = resize_image(img, 11, 13);
    for (std::size_t i = 0; i < up.size(); ++i) {
        CHECK(up[i] >= 0.0);
        CHECK(up[i] <= 1.0);
    }
}
