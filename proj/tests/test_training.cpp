#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "tatl/data.hpp"
#include "tatl/errors.hpp"
#include "tatl/nnet.hpp"
#include "tatl/training.hpp"

using namespace tatl;

namespace {

param_set scalar_params() {
    param_set p;
    p.add("enc.w", param_tag::encoder, tensor_f({1}, 0.0));
    p.add("dec.w", param_tag::decoder, tensor_f({1}, 0.0));
    return p;
}

void set_unit_grads(param_set& p) {
    for (parameter& item : p.items()) item.grad.fill(1.0);
}

dataset tiny_dataset(std::size_t n, std::uint64_t seed, std::size_t size = 16) {
    gen_config cfg = preset_config("uniform");
    cfg.n_samples = n;
    cfg.image_size = size;
    cfg.seed = seed;
    return generate_dataset(cfg);
}

train_plan tiny_plan() {
    train_plan plan;
    plan.net.depth = 2;
    plan.net.base_channels = 2;
    plan.net.seed = 3;
    plan.opt.max_epochs = 2;
    plan.opt.patience = 2;
    plan.opt.batch_size = 4;
    plan.attributes = {attribute::globules, attribute::pigment_network};
    return plan;
}

}  // namespace

TEST_CASE("optimizer config validation") {
    CHECK_NOTHROW(opt_config{}.validate());
    opt_config bad;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), range_error);
    bad = opt_config{};
    bad.momentum = 1.0;
    CHECK_THROWS_AS(bad.validate(), range_error);
    bad = opt_config{};
    bad.patience = 0;
    CHECK_THROWS_AS(bad.validate(), range_error);
    bad = opt_config{};
    bad.patience = 41;  // exceeds default max_epochs = 40
    CHECK_THROWS_AS(bad.validate(), range_error);
    bad = opt_config{};
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), range_error);
}

TEST_CASE("plan validation rejects bad stages and duplicate attributes") {
    CHECK_NOTHROW(train_plan{}.validate());
    train_plan bad;
    bad.stages = {0, 1};
    CHECK_THROWS_AS(bad.validate(), range_error);
    bad = train_plan{};
    bad.stages = {};
    CHECK_THROWS_AS(bad.validate(), range_error);
    bad = train_plan{};
    bad.attributes = {attribute::globules, attribute::globules};
    CHECK_THROWS_AS(bad.validate(), range_error);
}

TEST_CASE("decaying-step updates follow w -= scale/t * g") {
    param_set p = scalar_params();
    sgd_state state(p);
    opt_config cfg;
    cfg.mode = opt_mode::theory;
    cfg.step_scale = 0.1;

    set_unit_grads(p);
    sgd_step(p, state, 1, cfg);
    CHECK(p.at("dec.w").value[0] == doctest::Approx(-0.1).epsilon(1e-15));
    set_unit_grads(p);
    sgd_step(p, state, 2, cfg);
    CHECK(p.at("dec.w").value[0] == doctest::Approx(-0.15).epsilon(1e-15));
    set_unit_grads(p);
    sgd_step(p, state, 3, cfg);
    CHECK(p.at("dec.w").value[0] == doctest::Approx(-0.15 - 0.1 / 3.0).epsilon(1e-15));

    set_unit_grads(p);
    CHECK_THROWS_AS(sgd_step(p, state, 0, cfg), range_error);
}

TEST_CASE("momentum updates accumulate velocity") {
    param_set p = scalar_params();
    sgd_state state(p);
    opt_config cfg;  // lr 0.01, momentum 0.9

    set_unit_grads(p);
    sgd_step(p, state, 1, cfg);
    CHECK(p.at("enc.w").value[0] == doctest::Approx(-0.01).epsilon(1e-15));
    set_unit_grads(p);
    sgd_step(p, state, 2, cfg);
    // v = 0.9*1 + 1 = 1.9, w = -0.01 - 0.019
    CHECK(p.at("enc.w").value[0] == doctest::Approx(-0.029).epsilon(1e-15));
}

TEST_CASE("freezing the encoder skips its update but still clears gradients") {
    param_set p = scalar_params();
    sgd_state state(p);
    opt_config cfg;
    set_unit_grads(p);
    sgd_step(p, state, 1, cfg, /*freeze_encoder=*/true);
    CHECK(p.at("enc.w").value[0] == 0.0);
    CHECK(p.at("dec.w").value[0] == doctest::Approx(-0.01).epsilon(1e-15));
    for (const parameter& item : p.items()) CHECK(item.grad[0] == 0.0);
}

TEST_CASE("early stopping fires after `patience` non-improving epochs") {
    early_stopper stop(10);
    CHECK_FALSE(stop.observe(0.5));
    CHECK(stop.improved());
    int observations = 1;
    bool fired = false;
    for (int i = 0; i < 10; ++i) {
        fired = stop.observe(0.6);
        ++observations;
        CHECK_FALSE(stop.improved());
        if (i < 9) CHECK_FALSE(fired);
    }
    CHECK(fired);
    CHECK(observations == 11);
    CHECK(stop.best_index() == 0);
    CHECK(stop.best_loss() == 0.5);
}

TEST_CASE("an improvement resets the early-stopping streak") {
    early_stopper stop(2);
    CHECK_FALSE(stop.observe(1.0));
    CHECK_FALSE(stop.observe(1.1));
    CHECK_FALSE(stop.observe(0.9));  // improvement: streak resets
    CHECK(stop.best_index() == 2);
    CHECK_FALSE(stop.observe(0.95));
    CHECK(stop.observe(0.97));
    CHECK(stop.best_loss() == 0.9);
}

TEST_CASE("folds partition the indices with sizes differing by at most one") {
    const fold_split folds = make_folds(11, 5, 1);
    REQUIRE(folds.size() == 5);
    std::vector<std::size_t> sizes;
    std::set<std::size_t> seen;
    for (const auto& fold : folds) {
        sizes.push_back(fold.size());
        for (std::size_t i : fold) CHECK(seen.insert(i).second);
    }
    CHECK(seen.size() == 11);
    CHECK(*seen.rbegin() == 10);
    std::sort(sizes.begin(), sizes.end());
    CHECK(sizes == std::vector<std::size_t>{2, 2, 2, 2, 3});

    CHECK(make_folds(11, 5, 1) == folds);  // deterministic
    CHECK(make_folds(11, 5, 2) != folds);  // seed-dependent assignment
    CHECK_THROWS_AS(make_folds(3, 5, 0), data_error);
}

TEST_CASE("union target is the OR of present masks, empty when none") {
    sample s;
    s.id = "t";
    s.image = tensor_f({1, 2, 2}, 0.5);
    binary_mask g(2, 2);
    g.set(0, 0, 1);
    binary_mask p(2, 2);
    p.set(1, 1, 1);
    s.masks.attributes.emplace(attribute::globules, g);
    s.masks.attributes.emplace(attribute::pigment_network, p);
    const binary_mask u = union_target(s);
    CHECK(u.at(0, 0) == 1);
    CHECK(u.at(1, 1) == 1);
    CHECK(u.count() == 2);

    sample bare;
    bare.id = "b";
    bare.image = tensor_f({1, 3, 3}, 0.5);
    const binary_mask empty = union_target(bare);
    CHECK(empty.height() == 3);
    CHECK(empty.width() == 3);
    CHECK(empty.count() == 0);
}

TEST_CASE("attribute target is the mask when present, all-zero when absent") {
    sample s;
    s.id = "t";
    s.image = tensor_f({1, 2, 2}, 0.5);
    binary_mask g(2, 2);
    g.set(0, 1, 1);
    s.masks.attributes.emplace(attribute::globules, g);
    CHECK(attribute_target(s, attribute::globules) == g);
    const binary_mask absent = attribute_target(s, attribute::streaks);
    CHECK(absent.height() == 2);
    CHECK(absent.count() == 0);
}

TEST_CASE("training is deterministic and rejects empty datasets") {
    const dataset ds = tiny_dataset(8, 21);
    const train_plan plan = tiny_plan();
    const segmenter net(plan.net);
    const param_set init = net.init_params();
    std::vector<labeled_sample> data;
    for (const sample& s : ds) data.push_back({s.image, union_target(s)});

    const train_result a = train_segmenter(data, init, plan.net, plan.opt, plan.loss, false);
    const train_result b = train_segmenter(data, init, plan.net, plan.opt, plan.loss, false);
    CHECK(a.weights.flatten_values() == b.weights.flatten_values());
    REQUIRE(a.history.epochs.size() == b.history.epochs.size());
    for (std::size_t i = 0; i < a.history.epochs.size(); ++i) {
        CHECK(a.history.epochs[i].train_loss == b.history.epochs[i].train_loss);
        CHECK(a.history.epochs[i].val_loss == b.history.epochs[i].val_loss);
    }
    CHECK(a.history.best_epoch < a.history.epochs.size());

    CHECK_THROWS_AS(train_segmenter({}, init, plan.net, plan.opt, plan.loss, false), data_error);
}

TEST_CASE("downstream training starts from the pretext weights exactly") {
    const dataset ds = tiny_dataset(8, 22);
    train_plan plan = tiny_plan();
    const param_set union_init = segmenter(plan.net).init_params();

    // Frozen encoder: after full training the encoder is bit-identical to
    // the initialization it was copied from.
    plan.freeze_encoder = true;
    plan.opt.max_epochs = 5;
    plan.opt.patience = 5;
    const train_result frozen =
        train_downstream(ds, union_init, attribute::globules, plan);
    std::size_t encoder_count = 0;
    bool decoder_changed = false;
    for (const parameter& p : frozen.weights.items()) {
        const parameter& q = union_init.at(p.name);
        if (p.tag == param_tag::encoder) {
            ++encoder_count;
            CHECK(p.value == q.value);
        } else if (!(p.value == q.value)) {
            decoder_changed = true;
        }
    }
    CHECK(encoder_count > 0);
    CHECK(decoder_changed);

    // Without freezing, one epoch already moves encoder parameters.
    plan.freeze_encoder = false;
    plan.opt.max_epochs = 1;
    plan.opt.patience = 1;
    const train_result free =
        train_downstream(ds, union_init, attribute::globules, plan);
    bool encoder_changed = false;
    for (const parameter& p : free.weights.items()) {
        if (p.tag == param_tag::encoder && !(p.value == union_init.at(p.name).value)) {
            encoder_changed = true;
        }
    }
    CHECK(encoder_changed);
}

TEST_CASE("pipeline stage subsets produce exactly the requested artifacts") {
    const dataset ds = tiny_dataset(8, 23);
    train_plan plan = tiny_plan();

    plan.stages = {2};
    const pipeline_result p2 = run_pipeline(ds, plan);
    CHECK_FALSE(p2.segment_weights.has_value());
    CHECK(p2.union_weights.has_value());
    CHECK(p2.target_weights.empty());
    CHECK(p2.crop_boxes.empty());
    REQUIRE(p2.transformed.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(p2.transformed[i].image == ds[i].image);  // stage 1 skipped
    }

    plan.stages = {3};
    const pipeline_result p3 = run_pipeline(ds, plan);
    CHECK_FALSE(p3.union_weights.has_value());
    REQUIRE(p3.target_weights.size() == plan.attributes.size());
    for (attribute a : plan.attributes) {
        CHECK(p3.target_weights.count(a) == 1);
        CHECK(p3.target_histories.count(a) == 1);
    }

    plan.stages = {2, 3};
    const pipeline_result p23 = run_pipeline(ds, plan);
    REQUIRE(p23.union_weights.has_value());
    // Stage 3 initialized from stage 2: reproducible by composing the parts.
    const train_result direct =
        train_downstream(p23.transformed, *p23.union_weights, attribute::globules, plan);
    CHECK(direct.weights.flatten_values() ==
          p23.target_weights.at(attribute::globules).flatten_values());

    const pipeline_result again = run_pipeline(ds, plan);
    CHECK(again.union_weights->flatten_values() == p23.union_weights->flatten_values());
    for (attribute a : plan.attributes) {
        CHECK(again.target_weights.at(a).flatten_values() ==
              p23.target_weights.at(a).flatten_values());
    }
}

TEST_CASE("stage 1 crops every sample and records one box per sample") {
    const dataset ds = tiny_dataset(6, 24);
    train_plan plan = tiny_plan();
    plan.stages = {1, 2};
    plan.opt.max_epochs = 1;
    plan.opt.patience = 1;
    plan.crop_offset = 2;
    const pipeline_result out = run_pipeline(ds, plan);
    CHECK(out.segment_weights.has_value());
    CHECK(out.crop_boxes.size() == ds.size());
    REQUIRE(out.transformed.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(out.transformed[i].image.shape() == ds[i].image.shape());
        const crop_box& box = out.crop_boxes[i];
        CHECK(box.row_end > box.row_begin);
        CHECK(box.col_end > box.col_begin);
        CHECK(box.row_end <= ds[i].image.extent(1));
        CHECK(box.col_end <= ds[i].image.extent(2));
    }
}

TEST_CASE("stage 1 requires lesion masks") {
    dataset ds = tiny_dataset(6, 25);
    for (sample& s : ds) s.masks.lesion.reset();
    train_plan plan = tiny_plan();
    plan.stages = {1, 2, 3};
    CHECK_THROWS_AS(run_pipeline(ds, plan), data_error);
}

TEST_CASE("ensemble prediction is the mean of the two probability maps") {
    net_config cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    const segmenter net(cfg);
    param_set pa = net.init_params();
    param_set pb = net.init_params();
    for (parameter& p : pa.items()) p.value.fill(0.0);
    for (parameter& p : pb.items()) p.value.fill(0.0);
    // With all weights zero the output is sigmoid(head bias) everywhere.
    pa.at("head.conv.b").value.fill(std::log(0.2 / 0.8));
    pb.at("head.conv.b").value.fill(std::log(0.6 / 0.4));

    const tensor_f image({1, 8, 8}, 0.4);
    const tensor_f mean = ensemble_predict(image, net, pa, net, pb);
    REQUIRE(mean.shape() == std::vector<std::size_t>{1, 8, 8});
    for (std::size_t i = 0; i < mean.size(); ++i) {
        CHECK(mean[i] == doctest::Approx(0.4).epsilon(1e-12));
    }
    const tensor_f swapped = ensemble_predict(image, net, pb, net, pa);
    CHECK(swapped == mean);
}

TEST_CASE("predicted boxes cover the whole frame for uninformative nets") {
    net_config cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    const segmenter net(cfg);
    param_set zeros = net.init_params();
    for (parameter& p : zeros.items()) p.value.fill(0.0);

    const tensor_f image({1, 16, 16}, 0.3);
    // All-0.5 probabilities binarize to all ones: the box is the full frame.
    const crop_box full = predicted_crop_box(net, zeros, image, 0);
    CHECK(full == crop_box{0, 16, 0, 16});

    // A net that predicts nothing falls back to the full frame too.
    param_set negative = zeros;
    negative.at("head.conv.b").value.fill(-20.0);
    const crop_box fallback = predicted_crop_box(net, negative, image, 3);
    CHECK(fallback == crop_box{0, 16, 0, 16});
}

TEST_CASE("crop_and_resize keeps shapes and nearest-neighbour mask geometry") {
    sample s;
    s.id = "c";
    s.image = tensor_f({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) s.image[i] = static_cast<double>(i) / 15.0;
    binary_mask g(4, 4);
    g.set(1, 1, 1);
    g.set(2, 2, 1);
    s.masks.attributes.emplace(attribute::globules, g);
    binary_mask lesion(4, 4);
    for (std::size_t r = 1; r < 3; ++r) {
        for (std::size_t c = 1; c < 3; ++c) lesion.set(r, c, 1);
    }
    s.masks.lesion = lesion;

    const sample whole = crop_and_resize(s, {0, 4, 0, 4});
    CHECK(whole.image == s.image);
    CHECK(whole.masks.attributes.at(attribute::globules) == g);

    const sample cropped = crop_and_resize(s, {1, 3, 1, 3});
    CHECK(cropped.image.shape() == s.image.shape());
    CHECK(cropped.masks.lesion->count() == 16);  // the lesion filled the box
    const binary_mask& gz = cropped.masks.attributes.at(attribute::globules);
    // Nearest-neighbour upscale of the 2x2 crop: quadrant (r/2, c/2).
    binary_mask crop2(2, 2);
    crop2.set(0, 0, 1);
    crop2.set(1, 1, 1);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(gz.at(r, c) == crop2.at(r / 2, c / 2));
        }
    }
}

TEST_CASE("frame predictions paste cropped probabilities into the box") {
    net_config cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    const segmenter net(cfg);
    param_set zeros = net.init_params();
    for (parameter& p : zeros.items()) p.value.fill(0.0);

    const tensor_f image({1, 16, 16}, 0.3);
    const tensor_f plain = predict_in_frame(net, zeros, image, nullptr);
    REQUIRE(plain.shape() == image.shape());
    for (std::size_t i = 0; i < plain.size(); ++i) CHECK(plain[i] == 0.5);

    const crop_box box{4, 12, 2, 10};
    const tensor_f framed = predict_in_frame(net, zeros, image, &box);
    REQUIRE(framed.shape() == image.shape());
    for (std::size_t r = 0; r < 16; ++r) {
        for (std::size_t c = 0; c < 16; ++c) {
            const bool inside = r >= 4 && r < 12 && c >= 2 && c < 10;
            CHECK(framed.at3(0, r, c) == (inside ? 0.5 : 0.0));
        }
    }
}
