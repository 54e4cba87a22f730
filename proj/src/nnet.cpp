#include "tatl/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "tatl/errors.hpp"

namespace tatl {

void net_config::validate() const {
    if (in_channels == 0) throw range_error("net_config: in_channels must be positive");
    if (base_channels == 0) throw range_error("net_config: base_channels must be positive");
    if (depth == 0 || depth > 16) {
        throw range_error("net_config: depth must lie in [1,16], got " + std::to_string(depth));
    }
}

parameter& param_set::add(std::string name, param_tag tag, tensor_f value) {
    if (index_.count(name)) {
        throw data_error("param_set::add: duplicate parameter name " + name);
    }
    parameter p;
    p.name = std::move(name);
    p.tag = tag;
    p.grad = tensor_f(value.shape());
    p.value = std::move(value);
    index_[p.name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back();
}

parameter& param_set::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw data_error("param_set::at: no parameter named " + name);
    return params_[it->second];
}

const parameter& param_set::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw data_error("param_set::at: no parameter named " + name);
    return params_[it->second];
}

std::size_t param_set::total_values() const {
    std::size_t n = 0;
    for (const parameter& p : params_) n += p.value.size();
    return n;
}

void param_set::zero_grads() {
    for (parameter& p : params_) p.grad.fill(0.0);
}

std::vector<double> param_set::flatten_values() const {
    std::vector<double> flat;
    flat.reserve(total_values());
    for (const parameter& p : params_) {
        flat.insert(flat.end(), p.value.values().begin(), p.value.values().end());
    }
    return flat;
}

std::vector<double> param_set::flatten_grads() const {
    std::vector<double> flat;
    flat.reserve(total_values());
    for (const parameter& p : params_) {
        flat.insert(flat.end(), p.grad.values().begin(), p.grad.values().end());
    }
    return flat;
}

void param_set::assign_values(std::span<const double> flat) {
    if (flat.size() != total_values()) {
        throw dimension_error("param_set::assign_values: expected " +
                              std::to_string(total_values()) + " values, got " +
                              std::to_string(flat.size()));
    }
    std::size_t pos = 0;
    for (parameter& p : params_) {
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                  flat.begin() + static_cast<std::ptrdiff_t>(pos + p.value.size()),
                  p.value.values().begin());
        pos += p.value.size();
    }
}

bool param_set::same_layout(const param_set& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const parameter& a = params_[i];
        const parameter& b = other.params_[i];
        if (a.name != b.name || a.tag != b.tag || a.value.shape() != b.value.shape()) {
            return false;
        }
    }
    return true;
}

// ---- weights file ----------------------------------------------------------

namespace {

constexpr char weights_magic[6] = {'T', 'A', 'T', 'L', 'W', '\0'};
constexpr std::uint16_t weights_version = 1;

void put_u16(std::string& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class byte_reader {
public:
    byte_reader(const std::string& bytes, std::string path)
        : bytes_(bytes), path_(std::move(path)) {}

    bool at_end() const { return pos_ == bytes_.size(); }

    std::uint8_t u8() { return take(1)[0]; }

    std::uint16_t u16() {
        const std::uint8_t* p = take(2);
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }

    std::uint32_t u32() {
        const std::uint8_t* p = take(4);
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) |
               (static_cast<std::uint32_t>(p[3]) << 24);
    }

    double f64() {
        const std::uint8_t* p = take(8);
        std::uint64_t bits = 0;
        for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::string raw(std::size_t n) {
        const std::uint8_t* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }

private:
    const std::uint8_t* take(std::size_t n) {
        if (pos_ + n > bytes_.size()) {
            throw data_error("load_params: truncated weights file " + path_);
        }
        const auto* p = reinterpret_cast<const std::uint8_t*>(bytes_.data()) + pos_;
        pos_ += n;
        return p;
    }

    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_params(const param_set& params, const std::filesystem::path& path) {
    std::string buf;
    buf.append(weights_magic, sizeof(weights_magic));
    put_u16(buf, weights_version);
    for (const parameter& p : params.items()) {
        if (p.name.size() > std::numeric_limits<std::uint16_t>::max()) {
            throw data_error("save_params: parameter name too long: " + p.name);
        }
        put_u16(buf, static_cast<std::uint16_t>(p.name.size()));
        buf.append(p.name);
        buf.push_back(static_cast<char>(p.tag));
        const auto& shape = p.value.shape();
        if (shape.size() > 255) throw data_error("save_params: rank too large for " + p.name);
        buf.push_back(static_cast<char>(shape.size()));
        for (std::size_t e : shape) {
            if (e > std::numeric_limits<std::uint32_t>::max()) {
                throw data_error("save_params: extent too large for " + p.name);
            }
            put_u32(buf, static_cast<std::uint32_t>(e));
        }
        for (double v : p.value.values()) put_f64(buf, v);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("save_params: cannot open " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw io_error("save_params: write failed for " + path.string());
}

param_set load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("load_params: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    byte_reader r(bytes, path.string());
    if (bytes.size() < sizeof(weights_magic) ||
        r.raw(sizeof(weights_magic)) != std::string(weights_magic, sizeof(weights_magic))) {
        throw data_error("load_params: bad magic in " + path.string());
    }
    const std::uint16_t version = r.u16();
    if (version != weights_version) {
        throw data_error("load_params: unsupported version " + std::to_string(version) +
                         " in " + path.string());
    }

    param_set params;
    while (!r.at_end()) {
        const std::uint16_t name_len = r.u16();
        const std::string name = r.raw(name_len);
        const std::uint8_t tag_byte = r.u8();
        if (tag_byte > 1) {
            throw data_error("load_params: bad tag for " + name + " in " + path.string());
        }
        const std::uint8_t rank = r.u8();
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (std::uint8_t i = 0; i < rank; ++i) {
            shape[i] = r.u32();
            if (shape[i] == 0) {
                throw data_error("load_params: zero extent for " + name + " in " +
                                 path.string());
            }
            n *= shape[i];
        }
        std::vector<double> values(rank == 0 ? 0 : n);
        for (double& v : values) v = r.f64();
        params.add(name, static_cast<param_tag>(tag_byte),
                   tensor_f::from_data(std::move(shape), std::move(values)));
    }
    return params;
}

// ---- layer primitives -------------------------------------------------------

namespace {

void check_conv_shapes(const tensor_f& x, const tensor_f& kernel, const char* caller) {
    if (x.rank() != 3) {
        throw dimension_error(std::string(caller) + ": input must be rank 3, got " +
                              shape_string(x.shape()));
    }
    if (kernel.rank() != 4) {
        throw dimension_error(std::string(caller) + ": kernel must be rank 4, got " +
                              shape_string(kernel.shape()));
    }
    if (kernel.extent(1) != x.extent(0)) {
        throw dimension_error(std::string(caller) + ": kernel expects " +
                              std::to_string(kernel.extent(1)) + " input channels, image has " +
                              std::to_string(x.extent(0)));
    }
    if (kernel.extent(2) != kernel.extent(3) || kernel.extent(2) % 2 == 0) {
        throw dimension_error(std::string(caller) + ": kernel window must be square and odd, got " +
                              shape_string(kernel.shape()));
    }
}

}  // namespace

tensor_f conv2d_forward(const tensor_f& x, const tensor_f& kernel, const tensor_f& bias) {
    check_conv_shapes(x, kernel, "conv2d_forward");
    const std::size_t cout = kernel.extent(0), cin = kernel.extent(1), k = kernel.extent(2);
    if (bias.rank() != 1 || bias.extent(0) != cout) {
        throw dimension_error("conv2d_forward: bias must have shape (" + std::to_string(cout) +
                              "), got " + shape_string(bias.shape()));
    }
    const std::size_t h = x.extent(1), w = x.extent(2);
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);

    tensor_f y({cout, h, w});
    for (std::size_t co = 0; co < cout; ++co) {
        double* yp = y.data() + co * h * w;
        std::fill(yp, yp + h * w, bias[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xp = x.data() + ci * h * w;
            const double* kp = kernel.data() + (co * cin + ci) * k * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t roff = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::size_t r0 = roff < 0 ? static_cast<std::size_t>(-roff) : 0;
                const std::size_t r1 = roff > 0 ? h - static_cast<std::size_t>(roff) : h;
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::ptrdiff_t coff = static_cast<std::ptrdiff_t>(kx) - pad;
                    const std::size_t c0 = coff < 0 ? static_cast<std::size_t>(-coff) : 0;
                    const std::size_t c1 = coff > 0 ? w - static_cast<std::size_t>(coff) : w;
                    const double wgt = kp[ky * k + kx];
                    for (std::size_t r = r0; r < r1; ++r) {
                        double* yr = yp + r * w;
                        const double* xr = xp + (static_cast<std::ptrdiff_t>(r) + roff) *
                                                    static_cast<std::ptrdiff_t>(w) +
                                           coff;
                        for (std::size_t c = c0; c < c1; ++c) yr[c] += wgt * xr[c];
                    }
                }
            }
        }
    }
    return y;
}

conv2d_grads conv2d_backward(const tensor_f& x, const tensor_f& kernel, const tensor_f& dy) {
    check_conv_shapes(x, kernel, "conv2d_backward");
    const std::size_t cout = kernel.extent(0), cin = kernel.extent(1), k = kernel.extent(2);
    const std::size_t h = x.extent(1), w = x.extent(2);
    if (dy.rank() != 3 || dy.extent(0) != cout || dy.extent(1) != h || dy.extent(2) != w) {
        throw dimension_error("conv2d_backward: dy has shape " + shape_string(dy.shape()) +
                              ", expected (" + std::to_string(cout) + "," + std::to_string(h) +
                              "," + std::to_string(w) + ")");
    }
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);

    conv2d_grads g;
    g.dx = tensor_f(x.shape());
    g.dkernel = tensor_f(kernel.shape());
    g.dbias = tensor_f({cout});

    for (std::size_t co = 0; co < cout; ++co) {
        const double* dyp = dy.data() + co * h * w;
        double db = 0.0;
        for (std::size_t i = 0; i < h * w; ++i) db += dyp[i];
        g.dbias[co] = db;

        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xp = x.data() + ci * h * w;
            double* dxp = g.dx.data() + ci * h * w;
            const double* kp = kernel.data() + (co * cin + ci) * k * k;
            double* dkp = g.dkernel.data() + (co * cin + ci) * k * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t roff = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::size_t r0 = roff < 0 ? static_cast<std::size_t>(-roff) : 0;
                const std::size_t r1 = roff > 0 ? h - static_cast<std::size_t>(roff) : h;
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::ptrdiff_t coff = static_cast<std::ptrdiff_t>(kx) - pad;
                    const std::size_t c0 = coff < 0 ? static_cast<std::size_t>(-coff) : 0;
                    const std::size_t c1 = coff > 0 ? w - static_cast<std::size_t>(coff) : w;
                    const double wgt = kp[ky * k + kx];
                    double acc = 0.0;
                    for (std::size_t r = r0; r < r1; ++r) {
                        const double* dyr = dyp + r * w;
                        const std::ptrdiff_t shift =
                            (static_cast<std::ptrdiff_t>(r) + roff) *
                                static_cast<std::ptrdiff_t>(w) +
                            coff;
                        const double* xr = xp + shift;
                        double* dxr = dxp + shift;
                        for (std::size_t c = c0; c < c1; ++c) {
                            dxr[c] += wgt * dyr[c];
                            acc += xr[c] * dyr[c];
                        }
                    }
                    dkp[ky * k + kx] += acc;
                }
            }
        }
    }
    return g;
}

tensor_f relu(const tensor_f& x) {
    tensor_f y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return y;
}

tensor_f relu_backward(const tensor_f& dy, const tensor_f& x) {
    if (!dy.same_shape(x)) {
        throw dimension_error("relu_backward: shape mismatch " + shape_string(dy.shape()) +
                              " vs " + shape_string(x.shape()));
    }
    tensor_f dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
    return dx;
}

tensor_f sigmoid(const tensor_f& x) {
    tensor_f y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        // Split by sign to avoid overflow in exp for large |x|.
        const double v = x[i];
        if (v >= 0.0) {
            y[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            y[i] = e / (1.0 + e);
        }
    }
    return y;
}

tensor_f sigmoid_backward(const tensor_f& dy, const tensor_f& y) {
    if (!dy.same_shape(y)) {
        throw dimension_error("sigmoid_backward: shape mismatch " + shape_string(dy.shape()) +
                              " vs " + shape_string(y.shape()));
    }
    tensor_f dx(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (1.0 - y[i]);
    return dx;
}

tensor_f maxpool2(const tensor_f& x, std::vector<std::uint32_t>* argmax) {
    if (x.rank() != 3) {
        throw dimension_error("maxpool2: input must be rank 3, got " + shape_string(x.shape()));
    }
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    if (h % 2 != 0 || w % 2 != 0) {
        throw dimension_error("maxpool2: height and width must be even, got " +
                              shape_string(x.shape()));
    }
    if (x.size() > std::numeric_limits<std::uint32_t>::max()) {
        throw range_error("maxpool2: input too large for 32-bit argmax indices");
    }
    tensor_f y({c, h / 2, w / 2});
    if (argmax) argmax->assign(y.size(), 0);

    std::size_t oi = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* xp = x.data() + ch * h * w;
        for (std::size_t r = 0; r < h; r += 2) {
            for (std::size_t col = 0; col < w; col += 2) {
                // Row-major window order; strict '>' keeps the first maximum.
                std::size_t best = r * w + col;
                double best_v = xp[best];
                const std::size_t cand[3] = {r * w + col + 1, (r + 1) * w + col,
                                             (r + 1) * w + col + 1};
                for (std::size_t idx : cand) {
                    if (xp[idx] > best_v) {
                        best_v = xp[idx];
                        best = idx;
                    }
                }
                y[oi] = best_v;
                if (argmax) (*argmax)[oi] = static_cast<std::uint32_t>(ch * h * w + best);
                ++oi;
            }
        }
    }
    return y;
}

tensor_f maxpool2_backward(const tensor_f& dy, const std::vector<std::uint32_t>& argmax,
                           const std::vector<std::size_t>& input_shape) {
    if (input_shape.size() != 3) {
        throw dimension_error("maxpool2_backward: input shape must be rank 3");
    }
    if (dy.size() != argmax.size()) {
        throw dimension_error("maxpool2_backward: dy and argmax sizes differ");
    }
    tensor_f dx(input_shape);
    for (std::size_t i = 0; i < dy.size(); ++i) {
        if (argmax[i] >= dx.size()) {
            throw range_error("maxpool2_backward: argmax index out of range");
        }
        dx[argmax[i]] += dy[i];
    }
    return dx;
}

tensor_f upsample2(const tensor_f& x) {
    if (x.rank() != 3) {
        throw dimension_error("upsample2: input must be rank 3, got " + shape_string(x.shape()));
    }
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    tensor_f y({c, 2 * h, 2 * w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t r = 0; r < 2 * h; ++r) {
            const double* xr = x.data() + (ch * h + r / 2) * w;
            double* yr = y.data() + (ch * 2 * h + r) * 2 * w;
            for (std::size_t col = 0; col < 2 * w; ++col) yr[col] = xr[col / 2];
        }
    }
    return y;
}

tensor_f upsample2_backward(const tensor_f& dy) {
    if (dy.rank() != 3) {
        throw dimension_error("upsample2_backward: input must be rank 3");
    }
    const std::size_t c = dy.extent(0), h2 = dy.extent(1), w2 = dy.extent(2);
    if (h2 % 2 != 0 || w2 % 2 != 0) {
        throw dimension_error("upsample2_backward: dimensions must be even");
    }
    tensor_f dx({c, h2 / 2, w2 / 2});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t r = 0; r < h2; ++r) {
            const double* dyr = dy.data() + (ch * h2 + r) * w2;
            double* dxr = dx.data() + (ch * (h2 / 2) + r / 2) * (w2 / 2);
            for (std::size_t col = 0; col < w2; ++col) dxr[col / 2] += dyr[col];
        }
    }
    return dx;
}

tensor_f merge_skip(const tensor_f& skip, const tensor_f& up, merge_mode mode) {
    if (skip.rank() != 3 || up.rank() != 3) {
        throw dimension_error("merge_skip: operands must be rank 3");
    }
    if (skip.extent(1) != up.extent(1) || skip.extent(2) != up.extent(2)) {
        throw dimension_error("merge_skip: spatial dimensions differ: " +
                              shape_string(skip.shape()) + " vs " + shape_string(up.shape()));
    }
    if (mode == merge_mode::concat) {
        tensor_f out({skip.extent(0) + up.extent(0), skip.extent(1), skip.extent(2)});
        std::copy(skip.values().begin(), skip.values().end(), out.values().begin());
        std::copy(up.values().begin(), up.values().end(),
                  out.values().begin() + static_cast<std::ptrdiff_t>(skip.size()));
        return out;
    }
    if (skip.extent(0) != up.extent(0)) {
        throw dimension_error("merge_skip: add mode needs equal channels, got " +
                              shape_string(skip.shape()) + " vs " + shape_string(up.shape()));
    }
    tensor_f out(skip.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = skip[i] + up[i];
    return out;
}

// ---- segmenter ---------------------------------------------------------------

namespace {

struct conv_desc {
    std::string prefix;  // parameter names are prefix + ".w" / ".b"
    param_tag tag;
    std::size_t cin;
    std::size_t cout;
    std::size_t k;
};

std::size_t pow2(std::size_t e) { return std::size_t{1} << e; }

// Channel plan for every conv in the network, in initialization order
// (encoder first, then bottleneck, decoder top-down, head).
std::vector<conv_desc> conv_layout(const net_config& cfg) {
    const std::size_t b = cfg.base_channels, d = cfg.depth;
    std::vector<conv_desc> layout;

    for (std::size_t s = 0; s < d; ++s) {
        const std::size_t cin = s == 0 ? cfg.in_channels : b * pow2(s - 1);
        const std::size_t cout = b * pow2(s);
        const std::string stage = "enc" + std::to_string(s);
        layout.push_back({stage + ".conv1", param_tag::encoder, cin, cout, 3});
        layout.push_back({stage + ".conv2", param_tag::encoder, cout, cout, 3});
    }

    const std::size_t bott_in = b * pow2(d - 1);
    const std::size_t bott_out = cfg.merge == merge_mode::concat ? b * pow2(d) : b * pow2(d - 1);
    layout.push_back({"bott.conv1", param_tag::decoder, bott_in, bott_out, 3});
    layout.push_back({"bott.conv2", param_tag::decoder, bott_out, bott_out, 3});

    std::size_t prev = bott_out;
    for (std::size_t s = d; s-- > 0;) {
        const std::size_t skip_c = b * pow2(s);
        std::size_t cin, cout;
        if (cfg.merge == merge_mode::concat) {
            cin = prev + skip_c;
            cout = skip_c;
        } else {
            cin = skip_c;  // add: upsampled map must already match the skip
            cout = s == 0 ? b : b * pow2(s - 1);
        }
        const std::string stage = "dec" + std::to_string(s);
        layout.push_back({stage + ".conv1", param_tag::decoder, cin, cout, 3});
        layout.push_back({stage + ".conv2", param_tag::decoder, cout, cout, 3});
        prev = cout;
    }

    layout.push_back({"head.conv", param_tag::decoder, prev, 1, 1});
    return layout;
}

}  // namespace

segmenter::segmenter(net_config cfg) : cfg_(cfg) { cfg_.validate(); }

std::size_t segmenter::stage_channels(std::size_t stage) const {
    if (stage >= cfg_.depth) {
        throw range_error("segmenter::stage_channels: stage " + std::to_string(stage) +
                          " out of range for depth " + std::to_string(cfg_.depth));
    }
    return cfg_.base_channels * pow2(stage);
}

std::size_t segmenter::min_input_extent() const { return pow2(cfg_.depth); }

param_set segmenter::init_params() const {
    std::mt19937_64 rng(cfg_.seed);
    param_set params;
    for (const conv_desc& cd : conv_layout(cfg_)) {
        tensor_f kernel({cd.cout, cd.cin, cd.k, cd.k});
        const double fan_in = static_cast<double>(cd.cin * cd.k * cd.k);
        const double fan_out = static_cast<double>(cd.cout * cd.k * cd.k);
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (double& v : kernel.values()) v = dist(rng);
        params.add(cd.prefix + ".w", cd.tag, std::move(kernel));
        params.add(cd.prefix + ".b", cd.tag, tensor_f({cd.cout}));
    }
    return params;
}

void segmenter::check_params(const param_set& params) const {
    const std::vector<conv_desc> layout = conv_layout(cfg_);
    if (params.count() != layout.size() * 2) {
        throw dimension_error("segmenter: parameter set has " + std::to_string(params.count()) +
                              " entries, network expects " + std::to_string(layout.size() * 2));
    }
    for (const conv_desc& cd : layout) {
        const std::string wname = cd.prefix + ".w";
        const std::string bname = cd.prefix + ".b";
        if (!params.contains(wname) || !params.contains(bname)) {
            throw dimension_error("segmenter: missing parameter " + cd.prefix);
        }
        const parameter& wp = params.at(wname);
        const std::vector<std::size_t> want = {cd.cout, cd.cin, cd.k, cd.k};
        if (wp.value.shape() != want) {
            throw dimension_error("segmenter: " + wname + " has shape " +
                                  shape_string(wp.value.shape()) + ", expected " +
                                  shape_string(want));
        }
        if (wp.tag != cd.tag) {
            throw data_error("segmenter: " + wname + " carries the wrong tag");
        }
        const parameter& bp = params.at(bname);
        if (bp.value.shape() != std::vector<std::size_t>{cd.cout}) {
            throw dimension_error("segmenter: " + bname + " has shape " +
                                  shape_string(bp.value.shape()));
        }
    }
}

tensor_f segmenter::forward(const tensor_f& image, const param_set& params) const {
    cache scratch;
    return forward(image, params, scratch);
}

tensor_f segmenter::forward(const tensor_f& image, const param_set& params,
                            cache& cache) const {
    check_params(params);
    if (image.rank() != 3 || image.extent(0) != cfg_.in_channels) {
        throw dimension_error("segmenter::forward: expected (" +
                              std::to_string(cfg_.in_channels) + ",h,w) input, got " +
                              shape_string(image.shape()));
    }
    const std::size_t div = min_input_extent();
    if (image.extent(1) % div != 0 || image.extent(2) % div != 0) {
        throw dimension_error("segmenter::forward: spatial extents " +
                              shape_string(image.shape()) + " must be divisible by " +
                              std::to_string(div));
    }

    const std::size_t d = cfg_.depth;
    cache = {};
    cache.input = image;
    cache.enc_pre1.resize(d);
    cache.enc_act1.resize(d);
    cache.enc_pre2.resize(d);
    cache.enc_act2.resize(d);
    cache.enc_pooled.resize(d);
    cache.enc_pool_argmax.resize(d);
    cache.dec_up.resize(d);
    cache.dec_merged.resize(d);
    cache.dec_pre1.resize(d);
    cache.dec_act1.resize(d);
    cache.dec_pre2.resize(d);
    cache.dec_act2.resize(d);

    auto conv = [&params](const tensor_f& x, const std::string& prefix) {
        return conv2d_forward(x, params.at(prefix + ".w").value, params.at(prefix + ".b").value);
    };

    const tensor_f* cur = &cache.input;
    for (std::size_t s = 0; s < d; ++s) {
        const std::string stage = "enc" + std::to_string(s);
        cache.enc_pre1[s] = conv(*cur, stage + ".conv1");
        cache.enc_act1[s] = relu(cache.enc_pre1[s]);
        cache.enc_pre2[s] = conv(cache.enc_act1[s], stage + ".conv2");
        cache.enc_act2[s] = relu(cache.enc_pre2[s]);
        cache.enc_pooled[s] = maxpool2(cache.enc_act2[s], &cache.enc_pool_argmax[s]);
        cur = &cache.enc_pooled[s];
    }

    cache.bott_pre1 = conv(*cur, "bott.conv1");
    cache.bott_act1 = relu(cache.bott_pre1);
    cache.bott_pre2 = conv(cache.bott_act1, "bott.conv2");
    cache.bott_act2 = relu(cache.bott_pre2);
    cur = &cache.bott_act2;

    for (std::size_t s = d; s-- > 0;) {
        const std::string stage = "dec" + std::to_string(s);
        cache.dec_up[s] = upsample2(*cur);
        cache.dec_merged[s] = merge_skip(cache.enc_act2[s], cache.dec_up[s], cfg_.merge);
        cache.dec_pre1[s] = conv(cache.dec_merged[s], stage + ".conv1");
        cache.dec_act1[s] = relu(cache.dec_pre1[s]);
        cache.dec_pre2[s] = conv(cache.dec_act1[s], stage + ".conv2");
        cache.dec_act2[s] = relu(cache.dec_pre2[s]);
        cur = &cache.dec_act2[s];
    }

    cache.logits = conv(*cur, "head.conv");
    cache.prob = sigmoid(cache.logits);
    return cache.prob;
}

void segmenter::backward(const tensor_f& dprob, const cache& cache, param_set& params) const {
    check_params(params);
    if (!dprob.same_shape(cache.prob)) {
        throw dimension_error("segmenter::backward: dprob has shape " +
                              shape_string(dprob.shape()) + ", forward produced " +
                              shape_string(cache.prob.shape()));
    }
    const std::size_t d = cfg_.depth;

    auto conv_back = [&params](const tensor_f& x, const std::string& prefix,
                               const tensor_f& dy) {
        parameter& wp = params.at(prefix + ".w");
        parameter& bp = params.at(prefix + ".b");
        conv2d_grads g = conv2d_backward(x, wp.value, dy);
        for (std::size_t i = 0; i < g.dkernel.size(); ++i) wp.grad[i] += g.dkernel[i];
        for (std::size_t i = 0; i < g.dbias.size(); ++i) bp.grad[i] += g.dbias[i];
        return std::move(g.dx);
    };

    const tensor_f dlogits = sigmoid_backward(dprob, cache.prob);
    tensor_f dcur = conv_back(cache.dec_act2[0], "head.conv", dlogits);

    // Gradients flowing into each encoder skip connection, filled while
    // walking the decoder and consumed on the way back up the encoder.
    std::vector<tensor_f> dskip(d);

    for (std::size_t s = 0; s < d; ++s) {
        const std::string stage = "dec" + std::to_string(s);
        tensor_f dpre2 = relu_backward(dcur, cache.dec_pre2[s]);
        tensor_f dact1 = conv_back(cache.dec_act1[s], stage + ".conv2", dpre2);
        tensor_f dpre1 = relu_backward(dact1, cache.dec_pre1[s]);
        tensor_f dmerged = conv_back(cache.dec_merged[s], stage + ".conv1", dpre1);

        tensor_f dup;
        if (cfg_.merge == merge_mode::concat) {
            const std::size_t skip_c = cache.enc_act2[s].extent(0);
            const std::size_t up_c = cache.dec_up[s].extent(0);
            const std::size_t hh = dmerged.extent(1), ww = dmerged.extent(2);
            dskip[s] = tensor_f({skip_c, hh, ww});
            std::copy(dmerged.values().begin(),
                      dmerged.values().begin() + static_cast<std::ptrdiff_t>(skip_c * hh * ww),
                      dskip[s].values().begin());
            dup = tensor_f({up_c, hh, ww});
            std::copy(dmerged.values().begin() + static_cast<std::ptrdiff_t>(skip_c * hh * ww),
                      dmerged.values().end(), dup.values().begin());
        } else {
            dskip[s] = dmerged;  // both branches receive the full gradient
            dup = std::move(dmerged);
        }
        dcur = upsample2_backward(dup);
    }

    {
        tensor_f dpre2 = relu_backward(dcur, cache.bott_pre2);
        tensor_f dact1 = conv_back(cache.bott_act1, "bott.conv2", dpre2);
        tensor_f dpre1 = relu_backward(dact1, cache.bott_pre1);
        dcur = conv_back(cache.enc_pooled[d - 1], "bott.conv1", dpre1);
    }

    for (std::size_t s = d; s-- > 0;) {
        const std::string stage = "enc" + std::to_string(s);
        tensor_f dact2 = maxpool2_backward(dcur, cache.enc_pool_argmax[s],
                                           cache.enc_act2[s].shape());
        for (std::size_t i = 0; i < dact2.size(); ++i) dact2[i] += dskip[s][i];
        tensor_f dpre2 = relu_backward(dact2, cache.enc_pre2[s]);
        tensor_f dact1 = conv_back(cache.enc_act1[s], stage + ".conv2", dpre2);
        tensor_f dpre1 = relu_backward(dact1, cache.enc_pre1[s]);
        const tensor_f& block_in = s == 0 ? cache.input : cache.enc_pooled[s - 1];
        dcur = conv_back(block_in, stage + ".conv1", dpre1);
    }
}

}  // namespace tatl
