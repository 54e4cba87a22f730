#include "tatl/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "tatl/errors.hpp"

namespace tatl {

void opt_config::validate() const {
    if (!(learning_rate > 0.0)) throw range_error("opt_config: learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw range_error("opt_config: momentum must lie in [0,1)");
    }
    if (!(step_scale > 0.0)) throw range_error("opt_config: step_scale must be > 0");
    if (max_epochs == 0) throw range_error("opt_config: max_epochs must be positive");
    if (patience == 0 || patience > max_epochs) {
        throw range_error("opt_config: patience must lie in [1, max_epochs]");
    }
    if (batch_size == 0) throw range_error("opt_config: batch_size must be positive");
}

void train_plan::validate() const {
    if (stages.empty()) throw range_error("train_plan: no stages selected");
    for (int s : stages) {
        if (s < 1 || s > 3) {
            throw range_error("train_plan: stage " + std::to_string(s) + " outside {1,2,3}");
        }
    }
    if (attributes.empty()) throw range_error("train_plan: no attributes selected");
    std::set<attribute> seen;
    for (attribute a : attributes) {
        if (!seen.insert(a).second) {
            throw range_error("train_plan: duplicate attribute " + attribute_name(a));
        }
    }
    opt.validate();
    net.validate();
    loss.validate();
}

sgd_state::sgd_state(const param_set& params) {
    velocity_.reserve(params.count());
    for (const parameter& p : params.items()) velocity_.emplace_back(p.value.shape());
}

void sgd_step(param_set& params, sgd_state& state, std::size_t t, const opt_config& cfg,
              bool freeze_encoder) {
    if (state.count() != params.count()) {
        throw dimension_error("sgd_step: optimizer state does not match parameter layout");
    }
    if (cfg.mode == opt_mode::theory && t < 1) {
        throw range_error("sgd_step: theory mode needs step index t >= 1");
    }
    for (std::size_t i = 0; i < params.count(); ++i) {
        parameter& p = params.items()[i];
        if (freeze_encoder && p.tag == param_tag::encoder) {
            p.grad.fill(0.0);
            continue;
        }
        if (cfg.mode == opt_mode::theory) {
            const double step = cfg.step_scale / static_cast<double>(t);
            for (std::size_t j = 0; j < p.value.size(); ++j) p.value[j] -= step * p.grad[j];
        } else {
            tensor_f& v = state.velocity(i);
            for (std::size_t j = 0; j < p.value.size(); ++j) {
                v[j] = cfg.momentum * v[j] + p.grad[j];
                p.value[j] -= cfg.learning_rate * v[j];
            }
        }
        p.grad.fill(0.0);
    }
}

early_stopper::early_stopper(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw range_error("early_stopper: patience must be positive");
}

bool early_stopper::observe(double val_loss) {
    if (!any_ || val_loss < best_loss_) {
        best_loss_ = val_loss;
        best_index_ = seen_;
        bad_streak_ = 0;
        improved_ = true;
        any_ = true;
    } else {
        ++bad_streak_;
        improved_ = false;
    }
    ++seen_;
    return bad_streak_ >= patience_;
}

train_result train_segmenter(const std::vector<labeled_sample>& data, const param_set& init,
                             const net_config& net_cfg, const opt_config& opt,
                             const loss_config& loss, bool freeze_encoder) {
    if (data.empty()) throw data_error("train_segmenter: empty dataset");
    opt.validate();
    loss.validate();
    const segmenter net(net_cfg);

    // Deterministic 80/20 shard: shuffle once, first fifth validates.
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(opt.seed);
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t n_val = data.size() / 5;
    std::vector<std::size_t> val_idx(order.begin(),
                                     order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val),
                                       order.end());
    if (val_idx.empty()) val_idx = train_idx;  // too small to shard

    param_set params = init;
    sgd_state state(params);
    early_stopper stopper(opt.patience);

    train_result result;
    result.weights = params;
    segmenter::cache cache;
    std::size_t t = 0;

    for (std::size_t epoch = 0; epoch < opt.max_epochs; ++epoch) {
        std::shuffle(train_idx.begin(), train_idx.end(), rng);

        double train_loss_sum = 0.0;
        for (std::size_t start = 0; start < train_idx.size(); start += opt.batch_size) {
            const std::size_t stop = std::min(train_idx.size(), start + opt.batch_size);
            params.zero_grads();
            for (std::size_t bi = start; bi < stop; ++bi) {
                const labeled_sample& s = data[train_idx[bi]];
                const tensor_f prob = net.forward(s.image, params, cache);
                loss_result lr = combined_loss(prob, s.target, loss);
                train_loss_sum += lr.value;
                net.backward(lr.grad, cache, params);
            }
            // Backward accumulated a gradient sum; the step uses the mean.
            const double inv_batch = 1.0 / static_cast<double>(stop - start);
            for (parameter& p : params.items()) {
                for (double& g : p.grad.values()) g *= inv_batch;
            }
            ++t;
            sgd_step(params, state, t, opt, freeze_encoder);
        }

        double val_loss_sum = 0.0;
        for (std::size_t vi : val_idx) {
            const labeled_sample& s = data[vi];
            const tensor_f prob = net.forward(s.image, params);
            val_loss_sum += combined_loss(prob, s.target, loss).value;
        }

        epoch_record rec;
        rec.train_loss = train_loss_sum / static_cast<double>(train_idx.size());
        rec.val_loss = val_loss_sum / static_cast<double>(val_idx.size());
        result.history.epochs.push_back(rec);

        const bool stop = stopper.observe(rec.val_loss);
        if (stopper.improved()) result.weights = params;
        if (stop) break;
    }

    result.history.best_epoch = stopper.best_index();
    result.history.best_val_loss = stopper.best_loss();
    return result;
}

namespace {

// Per-attribute / per-stage offsets into the seed space keep every training
// run on its own deterministic shuffle stream.
constexpr std::uint64_t segment_seed_salt = 0x7365676dULL;  // stage 1

std::uint64_t downstream_seed(std::uint64_t base, attribute a) {
    return base + 1 + static_cast<std::uint64_t>(a);
}

void check_sample_shapes(const sample& s) {
    if (s.image.rank() != 3) {
        throw dimension_error("training: sample " + s.id + " image must be rank 3");
    }
    const std::size_t h = s.image.extent(1), w = s.image.extent(2);
    for (const auto& [attr, m] : s.masks.attributes) {
        if (m.height() != h || m.width() != w) {
            throw dimension_error("training: sample " + s.id + " mask " + attribute_name(attr) +
                                  " does not match its image");
        }
    }
    if (s.masks.lesion && (s.masks.lesion->height() != h || s.masks.lesion->width() != w)) {
        throw dimension_error("training: sample " + s.id + " lesion mask does not match image");
    }
}

}  // namespace

binary_mask union_target(const sample& s) {
    if (s.masks.attributes.empty()) {
        return binary_mask(s.image.extent(1), s.image.extent(2));
    }
    attribute_mask_set attrs_only;
    attrs_only.attributes = s.masks.attributes;
    return union_mask(attrs_only);
}

binary_mask attribute_target(const sample& s, attribute a) {
    const auto it = s.masks.attributes.find(a);
    if (it != s.masks.attributes.end()) return it->second;
    return binary_mask(s.image.extent(1), s.image.extent(2));
}

train_result train_pretext(const dataset& ds, const param_set& init, const train_plan& plan) {
    if (ds.empty()) throw data_error("train_pretext: empty dataset");
    plan.validate();
    std::vector<labeled_sample> data;
    data.reserve(ds.size());
    for (const sample& s : ds) {
        check_sample_shapes(s);
        data.push_back({s.image, union_target(s)});
    }
    return train_segmenter(data, init, plan.net, plan.opt, plan.loss, false);
}

train_result train_downstream(const dataset& ds, const param_set& union_init, attribute target,
                              const train_plan& plan) {
    if (ds.empty()) throw data_error("train_downstream: empty dataset");
    plan.validate();
    std::vector<labeled_sample> data;
    data.reserve(ds.size());
    for (const sample& s : ds) {
        check_sample_shapes(s);
        data.push_back({s.image, attribute_target(s, target)});
    }
    opt_config opt = plan.opt;
    opt.seed = downstream_seed(plan.opt.seed, target);
    return train_segmenter(data, union_init, plan.net, opt, plan.loss, plan.freeze_encoder);
}

crop_box predicted_crop_box(const segmenter& net, const param_set& params,
                            const tensor_f& image, std::size_t offset) {
    const tensor_f prob = net.forward(image, params);
    const binary_mask predicted = binarize(prob, 0.5);
    return lesion_bbox(predicted, offset);
}

sample crop_and_resize(const sample& s, const crop_box& box) {
    const std::size_t h = s.image.extent(1), w = s.image.extent(2);
    sample out;
    out.id = s.id;
    out.image = resize_image(crop(s.image, box), h, w);
    for (const auto& [attr, m] : s.masks.attributes) {
        out.masks.attributes[attr] = resize_mask(crop(m, box), h, w);
    }
    if (s.masks.lesion) {
        out.masks.lesion = resize_mask(crop(*s.masks.lesion, box), h, w);
    }
    return out;
}

tensor_f predict_in_frame(const segmenter& net, const param_set& params, const tensor_f& image,
                          const crop_box* box) {
    if (box == nullptr) return net.forward(image, params);
    const std::size_t h = image.extent(1), w = image.extent(2);
    const tensor_f zoomed = resize_image(crop(image, *box), h, w);
    const tensor_f prob = net.forward(zoomed, params);
    const tensor_f prob_in_box = resize_image(prob, box->height(), box->width());

    tensor_f frame({1, h, w});
    for (std::size_t r = 0; r < box->height(); ++r) {
        for (std::size_t c = 0; c < box->width(); ++c) {
            frame.at3(0, box->row_begin + r, box->col_begin + c) = prob_in_box.at3(0, r, c);
        }
    }
    return frame;
}

pipeline_result run_pipeline(const dataset& ds, const train_plan& plan,
                             const param_set* union_init) {
    if (ds.empty()) throw data_error("run_pipeline: empty dataset");
    plan.validate();

    pipeline_result result;
    result.transformed = ds;

    if (plan.stages.count(1)) {
        std::vector<labeled_sample> seg_data;
        seg_data.reserve(ds.size());
        for (const sample& s : ds) {
            check_sample_shapes(s);
            if (!s.masks.lesion) {
                throw data_error("run_pipeline: stage 1 requires lesion masks (sample " + s.id +
                                 " has none)");
            }
            seg_data.push_back({s.image, *s.masks.lesion});
        }
        // The lesion segmenter always uses the concatenating merge.
        net_config seg_cfg = plan.net;
        seg_cfg.merge = merge_mode::concat;
        opt_config seg_opt = plan.opt;
        seg_opt.seed = plan.opt.seed + segment_seed_salt;
        const segmenter seg_net(seg_cfg);
        train_result seg = train_segmenter(seg_data, seg_net.init_params(), seg_cfg, seg_opt,
                                           plan.loss, false);

        result.crop_boxes.reserve(ds.size());
        for (sample& s : result.transformed) {
            const crop_box box =
                predicted_crop_box(seg_net, seg.weights, s.image, plan.crop_offset);
            result.crop_boxes.push_back(box);
            s = crop_and_resize(s, box);
        }
        result.segment_weights = std::move(seg.weights);
        result.segment_history = std::move(seg.history);
    }

    if (plan.stages.count(2)) {
        const segmenter net(plan.net);
        train_result pretext = train_pretext(result.transformed, net.init_params(), plan);
        result.union_weights = std::move(pretext.weights);
        result.union_history = std::move(pretext.history);
    }

    if (plan.stages.count(3)) {
        param_set scratch;
        const param_set* base = nullptr;
        if (result.union_weights) {
            base = &*result.union_weights;
        } else if (union_init != nullptr) {
            base = union_init;
        } else {
            scratch = segmenter(plan.net).init_params();
            base = &scratch;
        }
        for (attribute a : plan.attributes) {
            train_result down = train_downstream(result.transformed, *base, a, plan);
            result.target_weights.emplace(a, std::move(down.weights));
            result.target_histories.emplace(a, std::move(down.history));
        }
    }

    return result;
}

tensor_f ensemble_predict(const tensor_f& image, const segmenter& net_a,
                          const param_set& params_a, const segmenter& net_b,
                          const param_set& params_b) {
    tensor_f pa = net_a.forward(image, params_a);
    const tensor_f pb = net_b.forward(image, params_b);
    if (!pa.same_shape(pb)) {
        throw dimension_error("ensemble_predict: probability maps differ in shape");
    }
    for (std::size_t i = 0; i < pa.size(); ++i) pa[i] = 0.5 * (pa[i] + pb[i]);
    return pa;
}

fold_split make_folds(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k == 0) throw range_error("make_folds: k must be positive");
    if (n < k) {
        throw data_error("make_folds: cannot split " + std::to_string(n) + " samples into " +
                         std::to_string(k) + " folds");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    fold_split folds(k);
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t lo = f * n / k, hi = (f + 1) * n / k;
        folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(lo),
                        order.begin() + static_cast<std::ptrdiff_t>(hi));
    }
    return folds;
}

}  // namespace tatl
