#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "tatl/data.hpp"
#include "tatl/losses.hpp"
#include "tatl/mask.hpp"
#include "tatl/nnet.hpp"

namespace tatl {

enum class opt_mode : std::uint8_t { momentum, theory };

// Optimizer settings.  Momentum mode is the practical configuration
// (v <- mu*v + g; w <- w - eta*v); theory mode uses the decaying step
// alpha_t = step_scale / t with no momentum, matching the assumptions the
// stability module's bound estimator is derived under.
struct opt_config {
    opt_mode mode = opt_mode::momentum;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double step_scale = 0.01;  // theory mode: alpha_t = step_scale / t
    std::size_t max_epochs = 40;
    std::size_t patience = 10;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

// Which pipeline stages run and how downstream training behaves.
struct train_plan {
    std::set<int> stages = {1, 2, 3};
    bool freeze_encoder = false;
    std::vector<attribute> attributes{all_attributes.begin(), all_attributes.end()};
    std::size_t crop_offset = 40;
    opt_config opt;
    net_config net;
    loss_config loss;

    void validate() const;
};

struct epoch_record {
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct train_history {
    std::vector<epoch_record> epochs;
    std::size_t best_epoch = 0;  // index into epochs
    double best_val_loss = 0.0;
};

struct train_result {
    param_set weights;  // checkpoint of the best validation epoch
    train_history history;
};

// Momentum buffers mirroring a parameter set's layout.
class sgd_state {
public:
    explicit sgd_state(const param_set& params);

    tensor_f& velocity(std::size_t i) { return velocity_[i]; }
    std::size_t count() const { return velocity_.size(); }

private:
    std::vector<tensor_f> velocity_;
};

// One optimizer update from the accumulated gradients; `t` is the 1-based
// step index (theory mode divides by it).  Encoder-tagged parameters are
// skipped entirely when freeze_encoder is set.  Gradients are zeroed after
// the update.
void sgd_step(param_set& params, sgd_state& state, std::size_t t, const opt_config& cfg,
              bool freeze_encoder = false);

// Tracks the best validation loss; observe() returns true once the loss has
// failed to improve for `patience` consecutive observations.
class early_stopper {
public:
    explicit early_stopper(std::size_t patience);

    bool observe(double val_loss);
    bool improved() const { return improved_; }  // did the last observation improve
    std::size_t best_index() const { return best_index_; }
    double best_loss() const { return best_loss_; }

private:
    std::size_t patience_;
    std::size_t bad_streak_ = 0;
    std::size_t seen_ = 0;
    std::size_t best_index_ = 0;
    double best_loss_ = 0.0;
    bool improved_ = false;
    bool any_ = false;
};

// One (input, target) training pair.
struct labeled_sample {
    tensor_f image;
    binary_mask target;
};

// The union-of-attributes target of a sample; samples with no attribute
// masks get an all-zero target at the image resolution.
binary_mask union_target(const sample& s);

// One attribute's target; absent masks are all-zero targets.
binary_mask attribute_target(const sample& s, attribute a);

// Shared minibatch-SGD loop: deterministic 80/20 train/validation split
// (validation falls back to the training set when the dataset is too small
// to shard), per-epoch seeded shuffling, early stopping on validation loss,
// and return of the best-validation checkpoint.
train_result train_segmenter(const std::vector<labeled_sample>& data, const param_set& init,
                             const net_config& net, const opt_config& opt,
                             const loss_config& loss, bool freeze_encoder);

// Stage 2: trains against the union of each sample's attribute masks.
train_result train_pretext(const dataset& ds, const param_set& init, const train_plan& plan);

// Stage 3 for one attribute: starts from an exact copy of `union_init`,
// trains against that attribute's mask (absent masks are all-zero targets).
// Each attribute trains on its own deterministic shuffle stream so results
// do not depend on which other attributes run.
train_result train_downstream(const dataset& ds, const param_set& union_init, attribute target,
                              const train_plan& plan);

struct pipeline_result {
    std::optional<param_set> segment_weights;
    train_history segment_history;
    std::optional<param_set> union_weights;
    train_history union_history;
    std::map<attribute, param_set> target_weights;
    std::map<attribute, train_history> target_histories;
    std::vector<crop_box> crop_boxes;  // one per sample when stage 1 ran
    dataset transformed;               // the dataset stages 2/3 actually saw
};

// The full three-stage pipeline over any stage subset:
//   1: train the lesion segmenter (concat merge), then crop every sample to
//      the predicted lesion box grown by crop_offset and resize back;
//   2: train the attribute-agnostic (union-mask) segmenter;
//   3: per-attribute training initialized from stage 2's weights, from
//      `union_init` when given, or from a fresh seeded initialization.
pipeline_result run_pipeline(const dataset& ds, const train_plan& plan,
                             const param_set* union_init = nullptr);

// Mean of the two networks' probability maps (the two-architecture
// inference ensemble).  Symmetric in its arguments.
tensor_f ensemble_predict(const tensor_f& image, const segmenter& net_a,
                          const param_set& params_a, const segmenter& net_b,
                          const param_set& params_b);

// fold_split[f] holds the sample indices of fold f; folds partition 0..n-1
// with sizes differing by at most one.
using fold_split = std::vector<std::vector<std::size_t>>;
fold_split make_folds(std::size_t n, std::size_t k, std::uint64_t seed);

// Stage-1 geometry, shared between training and evaluation:
// the predicted lesion box for an image (probability map -> threshold 0.5 ->
// bounding box grown by offset)…
crop_box predicted_crop_box(const segmenter& net, const param_set& params,
                            const tensor_f& image, std::size_t offset);
// …a sample cropped to a box and resized back to its original resolution
// (bilinear for the image, nearest-neighbour for masks)…
sample crop_and_resize(const sample& s, const crop_box& box);
// …and a prediction mapped back into the original frame: when a box is
// given, the crop is resized to the network resolution, predicted, and the
// probabilities are pasted back into the box (zero outside it).
tensor_f predict_in_frame(const segmenter& net, const param_set& params, const tensor_f& image,
                          const crop_box* box);

}  // namespace tatl
