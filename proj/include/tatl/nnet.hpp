#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tatl/tensor.hpp"

namespace tatl {

// How decoder stages combine the upsampled feature map with the encoder
// skip connection: channel concatenation (U-shape) or elementwise addition
// (Link-shape).  Both variants share an identical encoder layout so encoder
// weights transfer between them unchanged.
enum class merge_mode : std::uint8_t { concat, add };

enum class param_tag : std::uint8_t { encoder = 0, decoder = 1 };

struct net_config {
    std::size_t in_channels = 1;
    std::size_t base_channels = 8;
    std::size_t depth = 3;  // number of 2x pooling steps
    merge_mode merge = merge_mode::concat;
    std::uint64_t seed = 0;

    void validate() const;
};

// One learnable tensor plus its gradient accumulator (same shape, starts at
// zero).  The tag records which half of the network owns it, which drives
// both serialization and encoder freezing.
struct parameter {
    std::string name;
    param_tag tag = param_tag::encoder;
    tensor_f value;
    tensor_f grad;
};

// Ordered collection of named parameters.  Order is the construction order
// and is part of the layout: flattening, serialization, and optimizer state
// all follow it.
class param_set {
public:
    parameter& add(std::string name, param_tag tag, tensor_f value);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    parameter& at(const std::string& name);
    const parameter& at(const std::string& name) const;

    std::vector<parameter>& items() { return params_; }
    const std::vector<parameter>& items() const { return params_; }

    std::size_t count() const { return params_.size(); }
    std::size_t total_values() const;

    void zero_grads();

    // Concatenation of all parameter values (or gradients) in layout order.
    std::vector<double> flatten_values() const;
    std::vector<double> flatten_grads() const;
    void assign_values(std::span<const double> flat);

    // Same names, tags, and shapes in the same order.
    bool same_layout(const param_set& other) const;

private:
    std::vector<parameter> params_;
    std::map<std::string, std::size_t> index_;
};

// Binary weights file: magic "TATLW\0", u16 version (currently 1), then one
// record per parameter in layout order:
//   u16 name length, name bytes, u8 tag, u8 rank, u32 extents, f64 values.
// All integers and doubles are little-endian.
void save_params(const param_set& params, const std::filesystem::path& path);
param_set load_params(const std::filesystem::path& path);

// ---- layer primitives -----------------------------------------------------
// Feature maps are rank-3 tensors (channels, height, width); kernels are
// rank-4 (out_channels, in_channels, k, k) with odd k and zero padding k/2,
// so spatial dimensions are preserved.

tensor_f conv2d_forward(const tensor_f& x, const tensor_f& kernel, const tensor_f& bias);

struct conv2d_grads {
    tensor_f dx;
    tensor_f dkernel;
    tensor_f dbias;
};
conv2d_grads conv2d_backward(const tensor_f& x, const tensor_f& kernel, const tensor_f& dy);

tensor_f relu(const tensor_f& x);
// dy is the gradient at the relu output; x is the pre-activation input.
tensor_f relu_backward(const tensor_f& dy, const tensor_f& x);

tensor_f sigmoid(const tensor_f& x);
// y is the sigmoid output (not the input): d/dx = y * (1 - y).
tensor_f sigmoid_backward(const tensor_f& dy, const tensor_f& y);

// 2x2 max pooling with stride 2; height and width must be even.  When
// `argmax` is given it receives, per output element, the flat index of the
// winning input element (first maximum in row-major window order).
tensor_f maxpool2(const tensor_f& x, std::vector<std::uint32_t>* argmax = nullptr);
tensor_f maxpool2_backward(const tensor_f& dy, const std::vector<std::uint32_t>& argmax,
                           const std::vector<std::size_t>& input_shape);

// Nearest-neighbour 2x upsampling and its adjoint (2x2 block sums).
tensor_f upsample2(const tensor_f& x);
tensor_f upsample2_backward(const tensor_f& dy);

// Combine a skip connection with an upsampled map.  concat stacks channels
// (skip first, then up); add requires equal channel counts.
tensor_f merge_skip(const tensor_f& skip, const tensor_f& up, merge_mode mode);

// ---- encoder/decoder network ----------------------------------------------
//
// Stage layout for depth d and base channels b (concat mode shown):
//   enc<s>  (s = 0..d-1): conv3x3 -> relu -> conv3x3 -> relu, out b*2^s,
//           followed by 2x2 max pooling
//   bott:   two convs at the bottom; out b*2^d (concat) or b*2^(d-1) (add,
//           so the upsampled map matches the skip channels elementwise)
//   dec<s>  (s = d-1..0): upsample, merge with enc<s> skip, two convs;
//           out b*2^s (concat) or b*2^(s-1) with floor at b (add)
//   head:   1x1 conv to a single channel, then sigmoid
//
// Parameters are named "<stage>.conv1.w", "<stage>.conv1.b", ... and
// "head.conv.w"/"head.conv.b".  enc* parameters are tagged encoder;
// bott/dec/head are tagged decoder.  The encoder layout (names, shapes,
// initialization order) does not depend on the merge mode.
class segmenter {
public:
    explicit segmenter(net_config cfg);

    const net_config& config() const { return cfg_; }

    // Fresh Glorot-uniform weights and zero biases, drawn from a generator
    // seeded with cfg.seed.  Encoder parameters are drawn first, so two
    // configs differing only in merge mode produce bitwise-equal encoders.
    param_set init_params() const;

    // Activations recorded during forward, consumed by backward.
    struct cache {
        tensor_f input;
        std::vector<tensor_f> enc_pre1, enc_act1, enc_pre2, enc_act2, enc_pooled;
        std::vector<std::vector<std::uint32_t>> enc_pool_argmax;
        tensor_f bott_pre1, bott_act1, bott_pre2, bott_act2;
        std::vector<tensor_f> dec_up, dec_merged, dec_pre1, dec_act1, dec_pre2, dec_act2;
        tensor_f logits;
        tensor_f prob;
    };

    // image: (in_channels, h, w) with h and w divisible by 2^depth.
    // Returns per-pixel probabilities of shape (1, h, w).
    tensor_f forward(const tensor_f& image, const param_set& params) const;
    tensor_f forward(const tensor_f& image, const param_set& params, cache& cache) const;

    // Accumulates parameter gradients (+=) for d(loss)/d(prob) = dprob.
    void backward(const tensor_f& dprob, const cache& cache, param_set& params) const;

    std::size_t stage_channels(std::size_t stage) const;  // b * 2^stage
    std::size_t min_input_extent() const;                 // 2^depth

private:
    void check_params(const param_set& params) const;

    net_config cfg_;
};

}  // namespace tatl
